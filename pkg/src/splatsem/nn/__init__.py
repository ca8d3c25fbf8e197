"""Small deterministic neural-network toolkit built on NumPy."""

from .autograd import Tensor, no_grad
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import gradcheck, rel_error
from .layers import MLP, Block, LayerNorm, Linear, Module, ModuleList, MultiHeadAttention
from .model import Backbone, ForwardOutput, NetworkSpec, NetworkState, parameter_digest
from .optim import AdamW, EMATeacher, OptimizerState, ema_update, one_cycle_lr

__all__ = [
    "Tensor", "no_grad", "CheckpointError", "load_checkpoint", "save_checkpoint",
    "gradcheck", "rel_error", "MLP", "Block", "LayerNorm", "Linear", "Module",
    "ModuleList", "MultiHeadAttention", "Backbone", "ForwardOutput", "NetworkSpec",
    "NetworkState", "parameter_digest", "AdamW", "EMATeacher", "OptimizerState",
    "ema_update", "one_cycle_lr",
]
