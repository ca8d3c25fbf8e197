"""Training objectives.  Every loss returns a scalar :class:`Tensor`.

Losses that can become vacuous (no labeled rows, no masked tokens, too few
classes) return a constant zero and emit a warning through the module logger.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .nn import autograd as ag
from .nn.autograd import Tensor
from .nn.layers import MLP, Module

log = logging.getLogger(__name__)

NORM_FLOOR = 1e-8
CONTRAST_START = 0.25


@dataclass(frozen=True)
class LossWeights:
    cos: float = 1.0
    l2: float = 1.0
    con: float = 0.02
    sim: float = 1.0
    cr: float = 1.0
    mgm: float = 1.0
    dino: float = 1.0
    ibot: float = 1.0
    la: float = 1.0
    tau_init: float = 0.2
    contrast_start: float = CONTRAST_START

    def validate(self) -> "LossWeights":
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative")
        if not self.tau_init > 0:
            raise ValueError("tau_init must be positive")
        if not 0 <= self.contrast_start <= 1:
            raise ValueError("contrast_start must lie in [0, 1]")
        return self


def _zero(what: str) -> Tensor:
    log.warning("%s: nothing to average, loss is 0", what)
    return Tensor(0.0)


def _rows(n: int, subset) -> np.ndarray:
    if subset is None:
        return np.arange(n)
    s = np.asarray(subset)
    return np.flatnonzero(s) if s.dtype == bool else s.astype(np.int64)


def cosine_rows(a: Tensor, b) -> Tensor:
    """Row-wise cosine with the prediction norm floored at 1e-8."""
    b = ag.as_tensor(b)
    na = ag.row_norms(a)
    nb = ag.row_norms(b)
    if (na.data < NORM_FLOOR).any():
        log.warning("cosine: %d prediction rows below the norm floor",
                    int((na.data < NORM_FLOOR).sum()))
    na = ag.where(na.data < NORM_FLOOR, NORM_FLOOR, na)
    return (a * b).sum(axis=-1) / (na * nb)


def cosine_loss(pred: Tensor, target, labeled=None) -> Tensor:
    """Mean of 1 - cos(pred_i, target_i) over the selected rows."""
    idx = _rows(len(pred), labeled)
    if len(idx) == 0:
        return _zero("cosine_loss")
    return (1.0 - cosine_rows(pred[idx], ag.as_tensor(target).data[idx])).mean()


def l2_loss(pred: Tensor, target, labeled=None) -> Tensor:
    """Mean squared Euclidean distance over the selected rows."""
    idx = _rows(len(pred), labeled)
    if len(idx) == 0:
        return _zero("l2_loss")
    return ag.mse_rows(pred[idx], ag.as_tensor(target).data[idx]).mean()


def class_split(labels, min_class_size: int, rng_seed: int) -> dict:
    """Random disjoint halves per class with at least ``min_class_size`` members."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(rng_seed)
    out = {}
    for c in np.unique(labels):
        if c < 0:
            continue
        idx = np.flatnonzero(labels == c)
        if len(idx) < max(2, min_class_size):
            continue
        perm = rng.permutation(idx)
        h = len(perm) // 2
        out[int(c)] = (np.sort(perm[:h]), np.sort(perm[h:]))
    return out


def pooled_contrastive(fa: Tensor, fb: Tensor, tau) -> Tensor:
    """Symmetric cross-entropy with diagonal targets on normalized pooled features."""
    fa = ag.l2_normalize(fa)
    fb = ag.l2_normalize(fb)
    z = (fa @ fb.T) / ag.as_tensor(tau)
    n = z.shape[0]
    eye = np.eye(n, dtype=bool)
    ce_a = -ag.log_softmax(z, axis=1)[eye].mean()
    ce_b = -ag.log_softmax(z.T, axis=1)[eye].mean()
    return (ce_a + ce_b) * 0.5


def aggregated_contrastive(pred: Tensor, labels, tau, min_class_size: int = 10,
                           rng_seed: int = 0) -> Tensor:
    """Class-pooled bidirectional contrastive loss; labels < 0 are ignored."""
    split = class_split(labels, min_class_size, rng_seed)
    if len(split) < 2:
        return _zero("aggregated_contrastive (fewer than 2 eligible classes)")
    fa = ag.stack([pred[a].mean(axis=0) for a, _ in split.values()])
    fb = ag.stack([pred[b].mean(axis=0) for _, b in split.values()])
    return pooled_contrastive(fa, fb, tau)


def vl_total(losses: dict, weights: LossWeights, epoch_fraction: float) -> Tensor:
    total = ag.as_tensor(losses["cos"]) * weights.cos + ag.as_tensor(losses["l2"]) * weights.l2
    if epoch_fraction >= weights.contrast_start and "con" in losses:
        total = total + ag.as_tensor(losses["con"]) * weights.con
    return total


def mgm_loss(pred: Tensor, true, masked) -> Tensor:
    """Squared error summed over attributes, averaged over masked rows."""
    idx = _rows(len(pred), masked)
    if len(idx) == 0:
        return _zero("mgm_loss")
    return ag.mse_rows(pred[idx], ag.as_tensor(true).data[idx]).mean()


class Projector(Module):
    """Perceptron head followed by L2 normalization."""

    def __init__(self, dims, rng):
        super().__init__()
        self.mlp = MLP(dims, rng)

    def forward(self, x):
        return ag.l2_normalize(self.mlp(x), axis=-1)


def sim_loss(student: Tensor, teacher, n_global: int | None = None) -> Tensor:
    """Negative mean cosine between student views and detached teacher globals.

    ``student`` is V x k with the global views first, aligned with the
    ``teacher`` rows (G x k).  Pairs of a view with itself are skipped.
    """
    t = np.asarray(teacher.data if isinstance(teacher, Tensor) else teacher)
    g = len(t) if n_global is None else n_global
    v = len(student)
    s = ag.l2_normalize(student, axis=-1)
    t = t / np.maximum(np.linalg.norm(t, axis=1, keepdims=True), NORM_FLOOR)
    keep = np.ones((v, g), bool)
    keep[np.arange(min(v, g)), np.arange(min(v, g))] = False
    if not keep.any():
        return _zero("sim_loss")
    return -(s @ t.T)[keep].mean()


def rate_distortion(cov: Tensor, eps: float = 0.5) -> Tensor:
    """R = 1/2 logdet(I + d/eps^2 * cov) for a d x d covariance."""
    cov = ag.as_tensor(cov)
    d = cov.shape[0]
    return ag.logdet_spd(np.eye(d) + cov * (d / eps ** 2)) * 0.5


def covariance(z: Tensor) -> Tensor:
    """Unbiased covariance of the rows of z."""
    n = z.shape[0]
    zc = z - z.mean(axis=0, keepdims=True)
    return (zc.T @ zc) * (1.0 / (n - 1))


def coding_rate_loss(z: Tensor, eps: float = 0.5) -> Tensor:
    """-R_eps of the batch covariance; 0 with a warning for fewer than 2 rows."""
    if z.shape[0] < 2:
        return _zero("coding_rate_loss (fewer than 2 rows)")
    return -rate_distortion(covariance(z), eps)


def ibot_loss(student: Tensor, teacher, masked) -> Tensor:
    """Negative mean cosine between student and detached teacher tokens at masked rows."""
    idx = _rows(len(student), masked)
    if len(idx) == 0:
        return _zero("ibot_loss")
    t = np.asarray(teacher.data if isinstance(teacher, Tensor) else teacher)[idx]
    return -cosine_rows(student[idx], t).mean()


def la_loss(pred: Tensor, target, masked, labeled) -> Tensor:
    """Cosine plus L2 on rows that are both masked and labeled."""
    m = np.zeros(len(pred), bool)
    m[_rows(len(pred), masked)] = True
    lab = np.zeros(len(pred), bool)
    lab[_rows(len(pred), labeled)] = True
    idx = np.flatnonzero(m & lab)
    if len(idx) == 0:
        return _zero("la_loss")
    return cosine_loss(pred, target, idx) + l2_loss(pred, target, idx)
