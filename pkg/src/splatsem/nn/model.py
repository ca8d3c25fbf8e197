"""Dense transformer backbone over Gaussian tokens.

Tokens are the 59 activated attributes of each primitive.  The network embeds
them, swaps masked tokens for a learnable mask token, adds a sinusoidal
encoding of the (view-normalized) centers, runs a pre-norm encoder and
decoder, and exposes a language head plus per-attribute reconstruction heads.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .. import scene as sc
from . import autograd as ag
from .autograd import Tensor
from .layers import MLP, Block, LayerNorm, Linear, Module, ModuleList, param

# reconstruction heads in attribute order: name, width, activation
RECON_HEADS = (("center", 3, "linear"), ("scale", 3, "sigmoid"),
               ("rotation", 4, "unit"), ("opacity", 1, "sigmoid"),
               ("color", sc.N_SH, "tanh"))
# tanh color is scaled so that the DC term spans the displayable range
COLOR_SCALE = 0.5 / sc.SH_C0


@dataclass(frozen=True)
class NetworkSpec:
    in_dim: int = sc.ATTR_DIM
    embed_dim: int = 32
    embed_hidden: int = 64
    enc_depth: int = 2
    enc_heads: int = 4
    dec_depth: int = 1
    dec_heads: int = 4
    lang_dim: int = 16
    recon_hidden: int = 64
    pe_freqs: int = 6
    mask_token: bool = True
    mlp_ratio: int = 4

    def validate(self) -> "NetworkSpec":
        for k, v in asdict(self).items():
            if isinstance(v, bool):
                continue
            if v <= 0:
                raise ValueError(f"network spec: {k} must be positive, got {v}")
        for heads in (self.enc_heads, self.dec_heads):
            if self.embed_dim % heads:
                raise ValueError(f"network spec: {heads} heads do not divide embed_dim {self.embed_dim}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "NetworkSpec":
        return cls(**d).validate()


class ForwardOutput(NamedTuple):
    encoded: Tensor          # N x d_e after the encoder
    latents: Tensor          # N x d_e after the decoder
    pooled: Tensor           # d_e, mean of encoder tokens
    language: Tensor         # N x lang_dim
    recon: dict              # name -> N x width
    recon_all: Tensor        # N x 59, attribute order


def normalize_positions(positions) -> np.ndarray:
    """Center on the mean and scale by the largest extent, so values lie in [-1, 1]."""
    p = np.asarray(positions, np.float64)
    if len(p) == 0:
        return p.reshape(0, 3)
    c = p - p.mean(axis=0)
    ext = np.abs(c).max()
    return c / ext if ext > 0 else c


def positional_features(positions, n_freqs: int) -> np.ndarray:
    """Raw normalized coordinates plus sin/cos at frequencies 2^k * pi / 2.

    The lowest period (4) exceeds the coordinate range (2), so opposite ends
    of a view never alias.
    """
    p = normalize_positions(positions)
    freqs = (2.0 ** np.arange(n_freqs)) * (np.pi / 2)
    ang = p[:, :, None] * freqs  # N x 3 x L
    trig = np.concatenate([np.sin(ang), np.cos(ang)], axis=2).reshape(len(p), -1)
    return np.concatenate([p, trig], axis=1)


def _check_finite(x: np.ndarray, what: str):
    bad = ~np.isfinite(x).all(axis=1)
    if bad.any():
        raise ValueError(f"non-finite {what} at row {int(np.flatnonzero(bad)[0])}")


class Backbone(Module):
    def __init__(self, spec: NetworkSpec, seed: int = 0):
        super().__init__()
        self.spec = spec.validate()
        rng = np.random.default_rng(seed)
        d = spec.embed_dim
        self.embed = MLP([spec.in_dim, spec.embed_hidden, d], rng)
        if spec.mask_token:
            self.mask_token = param(rng.normal(0.0, 0.02, d))
        else:
            self.mask_token = Tensor(np.zeros(d))
        self.pos = Linear(3 + 6 * spec.pe_freqs, d, rng)
        self.encoder = ModuleList(Block(d, spec.enc_heads, rng, spec.mlp_ratio)
                                  for _ in range(spec.enc_depth))
        self.enc_norm = LayerNorm(d)
        self.decoder = ModuleList(Block(d, spec.dec_heads, rng, spec.mlp_ratio)
                                  for _ in range(spec.dec_depth))
        self.dec_norm = LayerNorm(d)
        self.lang_head = Linear(d, spec.lang_dim, rng)
        h = spec.recon_hidden
        self.heads = ModuleList(MLP([d, h, h, w], rng) for _, w, _ in RECON_HEADS)

    def embed_tokens(self, tokens) -> Tensor:
        x = ag.as_tensor(tokens)
        _check_finite(x.data.reshape(len(x.data), -1), "token")
        return self.embed(x)

    def forward(self, tokens, positions, mask_set=None) -> ForwardOutput:
        tokens = np.asarray(tokens.data if isinstance(tokens, Tensor) else tokens, np.float64)
        n = len(tokens)
        pos = np.asarray(positions, np.float64)
        if pos.shape != (n, 3):
            raise ValueError(f"positions must be {n}x3, got {pos.shape}")
        _check_finite(pos, "position")
        x = self.embed_tokens(tokens)
        if mask_set is not None and len(mask_set):
            idx = np.asarray(mask_set, np.int64)
            if idx.min() < 0 or idx.max() >= n:
                raise ValueError("mask_set refers to tokens outside the view")
            m = np.zeros((n, 1), bool)
            m[idx] = True
            x = ag.where(m, self.mask_token, x)
        x = x + self.pos(positional_features(pos, self.spec.pe_freqs))
        for blk in self.encoder:
            x = blk(x)
        enc = self.enc_norm(x)
        pooled = enc.mean(axis=0)
        y = enc
        for blk in self.decoder:
            y = blk(y)
        y = self.dec_norm(y)
        recon = {}
        for (name, _, act), head in zip(RECON_HEADS, self.heads):
            r = head(y)
            if act == "sigmoid":
                r = ag.sigmoid(r)
            elif act == "tanh":
                r = ag.tanh(r) * COLOR_SCALE
            elif act == "unit":
                r = ag.l2_normalize(ag.tanh(r), axis=-1)
            recon[name] = r
        return ForwardOutput(enc, y, pooled, self.lang_head(y), recon,
                             ag.concat([recon[k] for k, _, _ in RECON_HEADS], axis=1))


def parameter_digest(module: Module) -> str:
    """SHA-256 over parameter paths, shapes and raw bytes."""
    h = hashlib.sha256()
    for k, p in module.named_parameters():
        h.update(k.encode())
        h.update(str(p.shape).encode())
        h.update(np.ascontiguousarray(p.data, "<f8").tobytes())
    return h.hexdigest()


@dataclass
class NetworkState:
    """Model plus the bookkeeping needed to resume: step count and RNG state."""

    model: Backbone
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    extra: Optional[dict] = None

    def digest(self) -> str:
        return parameter_digest(self.model)

    def check_finite(self):
        for k, p in self.model.named_parameters():
            if not np.isfinite(p.data).all():
                raise FloatingPointError(f"non-finite parameter {k}")
