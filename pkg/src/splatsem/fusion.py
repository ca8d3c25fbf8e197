"""Dynamic-weighted fusion of per-segment embeddings into 2D feature maps.

Each segment carries three unit embeddings: the whole frame (``f_g``), a crop
with background (``f_l``) and a crop without background (``f_m``).  The
background-free and background-inclusive crops are first mixed according to
their agreement, then blended with the frame embedding using a weight derived
from how well the mixed local feature agrees with the frame.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple, Optional

import numpy as np

UNIT_TOL = 1e-5


class FusionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SegmentFeatureTriple:
    segment_id: int
    f_g: np.ndarray
    f_l: np.ndarray
    f_m: np.ndarray

    def __post_init__(self):
        vecs = [np.asarray(v, np.float64).reshape(-1) for v in (self.f_g, self.f_l, self.f_m)]
        if len({len(v) for v in vecs}) != 1:
            raise FusionError(f"segment {self.segment_id}: embedding sizes differ")
        for name, v in zip(("f_g", "f_l", "f_m"), vecs):
            if abs(np.linalg.norm(v) - 1.0) > UNIT_TOL:
                raise FusionError(f"segment {self.segment_id}: {name} is not unit norm")
            object.__setattr__(self, name, v)


@dataclass(frozen=True, eq=False)
class SegmentMask:
    ids: np.ndarray  # H x W uint32, 0 = no segment

    def __post_init__(self):
        ids = np.ascontiguousarray(self.ids, dtype=np.uint32)
        if ids.ndim != 2:
            raise ValueError("segment mask must be 2D")
        object.__setattr__(self, "ids", ids)

    @property
    def shape(self):
        return self.ids.shape

    def segment_ids(self) -> np.ndarray:
        u = np.unique(self.ids)
        return u[u != 0]


@dataclass(frozen=True, eq=False)
class FeatureMap2D:
    features: np.ndarray  # H x W x d float32; invalid pixels are zero
    valid: np.ndarray     # H x W bool
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        f = np.ascontiguousarray(self.features, dtype=np.float32)
        v = np.ascontiguousarray(self.valid, dtype=bool)
        if f.ndim != 3 or v.shape != f.shape[:2]:
            raise ValueError("feature map must be H x W x d with an H x W validity mask")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "valid", v)

    @property
    def shape(self):
        return self.features.shape


class FusedSegment(NamedTuple):
    f_s: np.ndarray
    w_g: float
    w_l: float
    w_m: float


def _unit_rows(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def fuse_batch(f_g, f_l, f_m):
    """Vectorized fusion over rows; returns ``(f_s, w_g, w_l, w_m, norms)``.

    ``norms`` is the length of the weighted sum before normalization so the
    caller can reject degenerate (zero-norm) segments.
    """
    f_g, f_l, f_m = (np.atleast_2d(np.asarray(a, np.float64)) for a in (f_g, f_l, f_m))
    r_lm = np.clip(np.sum(f_l * f_m, axis=1) / (np.linalg.norm(f_l, axis=1)
                                                 * np.linalg.norm(f_m, axis=1)), 0.0, 1.0)
    F_l = _unit_rows(r_lm[:, None] * f_m + (1.0 - r_lm)[:, None] * f_l)
    phi = np.sum(F_l * f_g, axis=1) / np.linalg.norm(f_g, axis=1)
    w_i = 1.0 / (1.0 + np.exp(-phi))
    w_g = w_i
    w_m = (1.0 - w_i) * r_lm
    w_l = (1.0 - w_i) * (1.0 - r_lm)
    fused = w_g[:, None] * f_g + w_l[:, None] * f_l + w_m[:, None] * f_m
    norms = np.linalg.norm(fused, axis=1)
    f_s = fused / np.where(norms > 0, norms, 1.0)[:, None]
    return f_s, w_g, w_l, w_m, norms


def fuse_triple(t: SegmentFeatureTriple, frame_feature: Optional[np.ndarray] = None) -> FusedSegment:
    f_g = t.f_g
    if frame_feature is not None:
        f_g = np.asarray(frame_feature, np.float64).reshape(-1)
        if f_g.shape != t.f_g.shape or abs(np.linalg.norm(f_g) - 1.0) > UNIT_TOL:
            raise FusionError(f"segment {t.segment_id}: frame feature must be a unit "
                              f"vector of size {len(t.f_g)}")
    f_s, w_g, w_l, w_m, norms = fuse_batch(f_g, t.f_l, t.f_m)
    if not norms[0] > 1e-12:
        raise FusionError(f"segment {t.segment_id}: fused feature has zero norm")
    return FusedSegment(f_s[0], float(w_g[0]), float(w_l[0]), float(w_m[0]))


def build_feature_map(mask: SegmentMask, triples, frame_feature=None) -> FeatureMap2D:
    """Paint each segment's fused feature over its pixels.

    ``triples`` is an iterable of :class:`SegmentFeatureTriple` or a mapping
    from id to triple.  ``frame_feature``, when given, replaces each triple's
    ``f_g`` (one frame embedding shared by all segments).  Triples whose id
    does not occur in the mask are accepted and listed in ``meta["unused_ids"]``.
    """
    if isinstance(triples, Mapping):
        triples = list(triples.values())
    by_id = {}
    for t in triples:
        if t.segment_id in by_id:
            raise FusionError(f"duplicate triple for segment {t.segment_id}")
        by_id[t.segment_id] = t
    present = [int(i) for i in mask.segment_ids()]
    missing = [i for i in present if i not in by_id]
    if missing:
        raise FusionError(f"no feature triple for segment ids {missing}")
    if not by_id:
        raise FusionError("no feature triples given; feature dimension unknown")
    d = len(next(iter(by_id.values())).f_g)
    H, W = mask.shape
    feats = np.zeros((H, W, d), np.float32)
    weights = {}
    for sid in present:
        fs = fuse_triple(by_id[sid], frame_feature)
        feats[mask.ids == sid] = fs.f_s.astype(np.float32)
        weights[sid] = (fs.w_g, fs.w_l, fs.w_m)
    unused = sorted(int(i) for i in by_id if i not in set(present))
    return FeatureMap2D(feats, mask.ids != 0, {"unused_ids": unused, "weights": weights})


# -- binary formats ---------------------------------------------------------

def save_segment_mask(mask: SegmentMask, path) -> None:
    H, W = mask.shape
    with open(path, "wb") as fh:
        fh.write(b"SSEG" + struct.pack("<III", 1, H, W))
        fh.write(mask.ids.astype("<u4").tobytes())


def load_segment_mask(path) -> SegmentMask:
    buf = Path(path).read_bytes()
    if buf[:4] != b"SSEG":
        raise ValueError(f"{path}: bad magic, expected SSEG")
    version, H, W = struct.unpack_from("<III", buf, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported SSEG version {version}")
    if len(buf) != 16 + 4 * H * W:
        raise ValueError(f"{path}: size does not match {H}x{W} header")
    return SegmentMask(np.frombuffer(buf, "<u4", H * W, 16).reshape(H, W))


def save_triples(triples, path) -> None:
    triples = list(triples)
    d = len(triples[0].f_g) if triples else 0
    with open(path, "wb") as fh:
        fh.write(b"SSTR" + struct.pack("<II", d, len(triples)))
        for t in triples:
            fh.write(struct.pack("<I", t.segment_id))
            fh.write(np.stack([t.f_g, t.f_l, t.f_m]).astype("<f4").tobytes())


def load_triples(path) -> list:
    buf = Path(path).read_bytes()
    if buf[:4] != b"SSTR":
        raise ValueError(f"{path}: bad magic, expected SSTR")
    d, count = struct.unpack_from("<II", buf, 4)
    rec = 4 + 12 * d
    if len(buf) != 12 + count * rec:
        raise ValueError(f"{path}: size does not match header ({count} x d={d})")
    out = []
    for k in range(count):
        off = 12 + k * rec
        (sid,) = struct.unpack_from("<I", buf, off)
        rows = np.frombuffer(buf, "<f4", 3 * d, off + 4).reshape(3, d).astype(np.float64)
        # stored as float32: renormalize to the unit invariant
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        out.append(SegmentFeatureTriple(int(sid), rows[0], rows[1], rows[2]))
    return out


def save_feature_map(fm: FeatureMap2D, path) -> None:
    H, W, d = fm.shape
    with open(path, "wb") as fh:
        fh.write(b"SSFM" + struct.pack("<III", H, W, d))
        fh.write(np.packbits(fm.valid.reshape(-1), bitorder="little").tobytes())
        fh.write(fm.features[fm.valid].astype("<f4").tobytes())


def load_feature_map(path) -> FeatureMap2D:
    buf = Path(path).read_bytes()
    if buf[:4] != b"SSFM":
        raise ValueError(f"{path}: bad magic, expected SSFM")
    H, W, d = struct.unpack_from("<III", buf, 4)
    nbytes = (H * W + 7) // 8
    bits = np.frombuffer(buf, np.uint8, nbytes, 16)
    valid = np.unpackbits(bits, bitorder="little")[: H * W].astype(bool).reshape(H, W)
    nv = int(valid.sum())
    if len(buf) != 16 + nbytes + nv * d * 4:
        raise ValueError(f"{path}: size does not match header")
    feats = np.zeros((H, W, d), np.float32)
    feats[valid] = np.frombuffer(buf, "<f4", nv * d, 16 + nbytes).reshape(nv, d)
    return FeatureMap2D(feats, valid)
