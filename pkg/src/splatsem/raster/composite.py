"""Front-to-back alpha compositing of projected Gaussians.

The per-pixel loop lives in a compiled kernel (``_composite_ext``) with a
vectorized NumPy fallback (``_composite_py``).  The fallback is used when the
extension is not built or ``SPLATSEM_PURE_PYTHON=1`` is set.  Both produce the
same contribution lists; pixel order is fixed by (depth, index), so results do
not depend on the number of worker threads.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from ..scene import GaussianScene
from . import _composite_py
from .camera import Camera, project_scene

log = logging.getLogger(__name__)

try:
    from . import _composite_ext
except ImportError:  # extension not built
    _composite_ext = None

ALPHA_MAX = 0.99
T_MIN = 1e-4
COND_MAX = 1e8
TILE = 16


def available_backends() -> list:
    return ["python"] + (["cython"] if _composite_ext is not None else [])


def default_backend() -> str:
    if _composite_ext is None or os.environ.get("SPLATSEM_PURE_PYTHON", "") not in ("", "0"):
        return "python"
    return "cython"


class BlendContribution(NamedTuple):
    primitive: int
    row: int
    col: int
    weight: float


@dataclass(frozen=True, eq=False)
class Contributions:
    """Flat contribution table, sorted by pixel (row-major) then blend order."""

    width: int
    height: int
    pixel: np.ndarray
    primitive: np.ndarray
    weight: np.ndarray

    def __len__(self) -> int:
        return len(self.pixel)

    def __iter__(self) -> Iterator[BlendContribution]:
        for p, i, w in zip(self.pixel, self.primitive, self.weight):
            yield BlendContribution(int(i), int(p // self.width), int(p % self.width), float(w))

    @property
    def rows(self) -> np.ndarray:
        return self.pixel // self.width

    @property
    def cols(self) -> np.ndarray:
        return self.pixel % self.width

    def weight_sums(self) -> np.ndarray:
        s = np.zeros(self.width * self.height)
        np.add.at(s, self.pixel, self.weight)
        return s.reshape(self.height, self.width)


@dataclass(frozen=True, eq=False)
class RenderTarget:
    image: np.ndarray      # H x W x 3, [0, 1]
    alpha: np.ndarray      # H x W accumulated alpha = 1 - transmittance
    transmittance: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def _prepare(scene: GaussianScene, cam: Camera):
    proj = project_scene(scene, cam)
    vis = np.flatnonzero(proj.visible)
    order = vis[np.lexsort((vis, proj.depths[vis]))]
    covs = proj.covs[order]
    a, b, c = covs[:, 0, 0], covs[:, 0, 1], covs[:, 1, 1]
    det = a * c - b * b
    mid = 0.5 * (a + c)
    rad = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    lmax, lmin = mid + rad, mid - rad
    singular = (lmin <= 0) | (det <= 0) | (lmax > COND_MAX * np.maximum(lmin, 1e-300))
    safe = np.where(singular, 1.0, det)
    conics = np.stack([c / safe, -b / safe, a / safe], axis=1)

    radius = 3.0 * np.sqrt(np.maximum(lmax, 0.0))
    u, v = proj.means[order, 0], proj.means[order, 1]
    # pixels whose centers fall within the 3-sigma box
    c0 = np.maximum(np.ceil(u - radius - 0.5), 0)
    c1 = np.minimum(np.floor(u + radius - 0.5), cam.width - 1)
    r0 = np.maximum(np.ceil(v - radius - 0.5), 0)
    r1 = np.minimum(np.floor(v + radius - 0.5), cam.height - 1)
    bbox = np.stack([c0, c1, r0, r1], axis=1)
    bbox = np.nan_to_num(bbox, nan=-1).astype(np.int32)
    empty = (bbox[:, 0] > bbox[:, 1]) | (bbox[:, 2] > bbox[:, 3])
    area = np.where(empty, 0, (bbox[:, 1] - bbox[:, 0] + 1) * (bbox[:, 3] - bbox[:, 2] + 1))
    diag = {"visible": int(len(order)), "singular": int(singular.sum()),
            "singular_pixel_skips": int(area[singular].sum())}
    keep = ~singular & ~empty
    order, bbox = order[keep], bbox[keep]
    return (order, np.ascontiguousarray(proj.means[order]), np.ascontiguousarray(conics[keep]),
            bbox, diag)


def _bin_tiles(bbox: np.ndarray, width: int, height: int, tile: int):
    tiles_x = -(-width // tile)
    tiles_y = -(-height // tile)
    tx0, tx1 = bbox[:, 0] // tile, bbox[:, 1] // tile
    ty0, ty1 = bbox[:, 2] // tile, bbox[:, 3] // tile
    nx, ny = tx1 - tx0 + 1, ty1 - ty0 + 1
    per = (nx * ny).astype(np.int64)
    rank = np.repeat(np.arange(len(bbox), dtype=np.int64), per)
    local = np.arange(per.sum(), dtype=np.int64) - np.repeat(np.cumsum(per) - per, per)
    tx = np.repeat(tx0, per) + local % np.repeat(nx, per)
    ty = np.repeat(ty0, per) + local // np.repeat(nx, per)
    tile_id = ty * tiles_x + tx
    srt = np.argsort(tile_id, kind="stable")  # rank order kept within a tile
    tile_prims = rank[srt].astype(np.int32)
    offsets = np.searchsorted(tile_id[srt], np.arange(tiles_x * tiles_y + 1)).astype(np.int64)
    return tiles_x, tiles_y, offsets, tile_prims


def composite(scene: GaussianScene, cam: Camera, max_contribs_per_pixel: int = 64,
              threads: int = 1, backend: str = None):
    """Render DC colors and record every (primitive, pixel, weight) blend term.

    Returns ``(RenderTarget, Contributions)``.  Primitives whose 2D covariance
    is singular (condition number above 1e8) are skipped and tallied in
    ``RenderTarget.diagnostics``.
    """
    if max_contribs_per_pixel < 1:
        raise ValueError("max_contribs_per_pixel must be >= 1")
    backend = backend or default_backend()
    if backend == "cython" and _composite_ext is None:
        raise RuntimeError("compiled compositing kernel is not available")
    if backend not in ("python", "cython"):
        raise ValueError(f"unknown backend {backend!r}")
    H, W = cam.height, cam.width
    order, means, conics, bbox, diag = _prepare(scene, cam)
    opac = np.ascontiguousarray(scene.opacities[order], dtype=np.float64)
    rgb = np.ascontiguousarray(scene.rgb[order], dtype=np.float64)
    tiles_x, tiles_y, offsets, tile_prims = _bin_tiles(bbox, W, H, TILE)
    args = (means, conics, opac, rgb, bbox, offsets, tile_prims, H, W, TILE, tiles_x,
            int(max_contribs_per_pixel), max(1, int(threads)), ALPHA_MAX, T_MIN)
    if backend == "cython":
        image, trans, pix, rank, weight = _composite_ext.composite_tiles(*args)
    else:
        image, trans, pix, rank, weight = _composite_py.composite_tiles(*args)
    diag["backend"] = backend
    diag["contributions"] = int(len(pix))
    target = RenderTarget(np.clip(image, 0.0, 1.0), 1.0 - trans, trans, diag)
    contribs = Contributions(W, H, pix, order[rank].astype(np.int64), weight)
    if diag["singular"]:
        log.debug("skipped %d singular splats", diag["singular"])
    return target, contribs
