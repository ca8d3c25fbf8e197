"""AdamW, the one-cycle learning-rate schedule and EMA parameter shadows."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .layers import Module


def check_grads(named_params):
    for k, p in named_params:
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise FloatingPointError(f"non-finite gradient for parameter {k}")


def decays(path: str, array: np.ndarray) -> bool:
    """Weight decay applies to matrices only (not biases, norms, tokens or scalars)."""
    return array.ndim >= 2


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


class AdamW:
    def __init__(self, named_params, weight_decay=0.05, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(named_params)
        self.weight_decay = float(weight_decay)
        self.b1, self.b2 = betas
        self.eps = eps
        self.state = OptimizerState(
            {k: np.zeros_like(p.data) for k, p in self.params},
            {k: np.zeros_like(p.data) for k, p in self.params})

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float):
        if not lr > 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        check_grads(self.params)
        st = self.state
        st.t += 1
        c1 = 1.0 - self.b1 ** st.t
        c2 = 1.0 - self.b2 ** st.t
        for k, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = st.m[k]
            v = st.v[k]
            if m.shape != p.shape:
                raise ValueError(f"optimizer moments for {k} do not match parameter shape")
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and decays(k, p.data):
                p.data = p.data - lr * self.weight_decay * p.data - lr * upd
            else:
                p.data = p.data - lr * upd

    def state_arrays(self) -> dict:
        out = {f"m/{k}": a for k, a in self.state.m.items()}
        out.update({f"v/{k}": a for k, a in self.state.v.items()})
        return out

    def load_state_arrays(self, arrays: dict, t: int):
        for k, p in self.params:
            for tag, dst in (("m", self.state.m), ("v", self.state.v)):
                a = arrays[f"{tag}/{k}"]
                if a.shape != p.shape:
                    raise ValueError(f"optimizer moment {tag}/{k} shape mismatch")
                dst[k] = np.array(a, dtype=p.dtype, copy=True)
        self.state.t = int(t)


def one_cycle_lr(step: int, total: int, peak: float, pct_start: float = 0.05,
                 div_factor: float = 10.0, final_div_factor: float = 1000.0) -> float:
    """Linear warmup from peak/div to peak, then cosine decay to peak/(div*final_div)."""
    if total <= 0:
        return peak
    start = peak / div_factor
    end = start / final_div_factor
    warm = max(1, int(round(pct_start * total)))
    if step < warm:
        return start + (peak - start) * step / warm
    frac = min(1.0, (step - warm) / max(1, total - warm))
    return end + (peak - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


def ema_update(teacher: Module, student: Module, m: float) -> None:
    """shadow <- m * shadow + (1 - m) * student, in place on the teacher."""
    if not 0.0 <= m < 1.0:
        raise ValueError(f"EMA momentum must lie in [0, 1), got {m}")
    tp = dict(teacher.named_parameters())
    sp = dict(student.named_parameters())
    if tp.keys() != sp.keys():
        raise ValueError("teacher and student parameter sets differ")
    for k, s in sp.items():
        t = tp[k]
        if t.shape != s.shape:
            raise ValueError(f"EMA shape mismatch for {k}: {t.shape} vs {s.shape}")
        t.data = m * t.data + (1.0 - m) * s.data


class EMATeacher:
    """Frozen copy of a student module, moved only by :func:`ema_update`."""

    def __init__(self, student: Module, momentum: float):
        self.module = copy.deepcopy(student)
        for p in self.module.parameters():
            p.grad = None
        self.momentum = momentum

    def update(self, student: Module, momentum=None):
        ema_update(self.module, student, self.momentum if momentum is None else momentum)
