"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import numpy as np

from .autograd import Tensor


class GradCheckResult(NamedTuple):
    max_rel_error: float
    per_param: dict


def numeric_grad(f: Callable[[], Tensor], p: Tensor, eps: float = 1e-3) -> np.ndarray:
    g = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = float(f().data)
        flat[i] = old - eps
        lo = float(f().data)
        flat[i] = old
        gf[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||)."""
    den = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / den)


def gradcheck(f: Callable[[], Tensor], params: Sequence, eps: float = 1e-3) -> GradCheckResult:
    """Compare analytic and numeric gradients of scalar ``f()`` for each parameter.

    ``params`` holds Tensors or ``(name, Tensor)`` pairs; all must be float64.
    """
    named = [(p if isinstance(p, tuple) else (str(i), p)) for i, p in enumerate(params)]
    for _, p in named:
        if p.dtype != np.float64:
            raise TypeError("gradcheck needs float64 parameters")
        p.grad = None
    f().backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in named}
    errs = {k: rel_error(analytic[k], numeric_grad(f, p, eps)) for k, p in named}
    return GradCheckResult(max(errs.values(), default=0.0), errs)
