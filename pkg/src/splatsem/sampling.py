"""Grid sampling, neighbourhood crops and token masking over Gaussian scenes."""

from __future__ import annotations

import numpy as np

from .augment import AugmentationSpec
from .scene import CropView, GaussianScene


def voxel_keys(centers: np.ndarray, grid_size: float) -> np.ndarray:
    return np.floor(np.asarray(centers, dtype=np.float64) / grid_size).astype(np.int64)


def grid_sample(scene: GaussianScene, grid_size: float) -> CropView:
    """Keep one primitive per occupied voxel: the one with the smallest index."""
    if grid_size <= 0:
        raise ValueError("grid_size must be positive")
    if len(scene) == 0:
        return CropView(np.zeros(0, np.int64), "global",
                        [{"op": "grid_sample", "grid_size": grid_size}])
    keys = voxel_keys(scene.centers, grid_size)
    # np.unique(return_index) reports the first occurrence, i.e. the smallest index
    _, first = np.unique(keys, axis=0, return_index=True)
    return CropView(np.sort(first), "global",
                    [{"op": "grid_sample", "grid_size": grid_size}])


def nearest_indices(centers: np.ndarray, anchor: np.ndarray, k: int) -> np.ndarray:
    """The ``k`` centers closest to ``anchor``; equal distances break by index."""
    d2 = np.sum((np.asarray(centers, np.float64) - anchor) ** 2, axis=1)
    order = np.lexsort((np.arange(len(d2)), d2))
    return order[:k]


def sample_crop(scene: GaussianScene, kind: str, spec: AugmentationSpec,
                rng_seed: int, indices=None) -> CropView:
    """K nearest neighbours of a random anchor primitive.

    ``indices`` restricts sampling to a base view (e.g. a grid-sampled subset);
    returned indices always refer to the full scene.
    """
    if kind not in ("global", "local"):
        raise ValueError(f"kind must be 'global' or 'local', got {kind!r}")
    pool = np.arange(len(scene)) if indices is None else np.asarray(indices, np.int64)
    if len(pool) == 0:
        raise ValueError("cannot crop an empty scene")
    lo, hi = spec.crop_global if kind == "global" else spec.crop_local
    cap = spec.cap_global if kind == "global" else spec.cap_local
    rng = np.random.default_rng(rng_seed)
    frac = rng.uniform(lo, hi)
    k = max(1, int(round(frac * cap)))
    anchor = int(rng.integers(len(pool)))
    log = [{"op": "crop", "kind": kind, "ratio": float(frac), "cap": int(cap),
            "k": k, "anchor": int(pool[anchor])}]
    if k > len(pool):
        log.append({"op": "crop_clamp", "requested": k, "available": int(len(pool))})
        k = len(pool)
    centers = scene.centers[pool]
    near = nearest_indices(centers, centers[anchor].astype(np.float64), k)
    return CropView(np.sort(pool[near]), kind, log)


def mask_positions(n: int, ratio: float, rng_seed: int) -> np.ndarray:
    """Boolean mask over ``n`` token positions with ``round(n * ratio)`` set."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("mask ratio must lie in [0, 1]")
    m = int(np.floor(n * ratio + 0.5))
    rng = np.random.default_rng(rng_seed)
    mask = np.zeros(n, dtype=bool)
    mask[rng.permutation(n)[:m]] = True
    return mask


def mask_tokens(view: CropView, ratio: float, rng_seed: int):
    """Split a view's primitive indices into (masked, kept), both sorted."""
    mask = mask_positions(len(view), ratio, rng_seed)
    return view.indices[mask], view.indices[~mask]
