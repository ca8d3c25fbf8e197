"""Optimization-free lifting of 2D feature maps onto Gaussians."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..scene import SemanticFeatureField
from .composite import Contributions


def accumulate_features(contributions: Sequence[Contributions], feature_maps,
                        n_primitives: int):
    """Blend-weighted feature sums and total weights per primitive (unnormalized).

    Only pixels marked valid in a feature map contribute.
    """
    if len(contributions) != len(feature_maps):
        raise ValueError("need exactly one feature map per view")
    dims = {fm.features.shape[2] for fm in feature_maps}
    if len(dims) > 1:
        raise ValueError(f"feature dimension mismatch across views: {sorted(dims)}")
    d = dims.pop() if dims else 0
    acc = np.zeros((n_primitives, d))
    wsum = np.zeros(n_primitives)
    for view, (con, fm) in enumerate(zip(contributions, feature_maps)):
        H, W = fm.features.shape[:2]
        if (H, W) != (con.height, con.width):
            raise ValueError(f"view {view}: feature map {H}x{W} does not match "
                             f"render {con.height}x{con.width}")
        if len(con) and con.primitive.max() >= n_primitives:
            raise ValueError(f"view {view}: contribution refers to a primitive out of range")
        flat = fm.features.reshape(H * W, d)
        ok = fm.valid.reshape(-1)[con.pixel]
        pix, prim, w = con.pixel[ok], con.primitive[ok], con.weight[ok]
        np.add.at(acc, prim, w[:, None] * flat[pix].astype(np.float64))
        np.add.at(wsum, prim, w)
    return acc, wsum


def lift_features(contributions: Sequence[Contributions], feature_maps,
                  n_primitives: int, scene_id: str = "scene") -> SemanticFeatureField:
    """F_i = sum over views and pixels of w_ip * f_p, then row-normalized.

    Gaussians that never receive weight from a valid pixel come back as zero
    rows flagged unlabeled.
    """
    acc, wsum = accumulate_features(contributions, feature_maps, n_primitives)
    norms = np.linalg.norm(acc, axis=1)
    labeled = (wsum > 0) & (norms > 0)
    return SemanticFeatureField.from_rows(acc, labeled, scene_id)
