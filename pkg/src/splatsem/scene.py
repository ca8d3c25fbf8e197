"""Gaussian scene data model, binary PLY interchange and feature-field storage.

A scene is stored structure-of-arrays: one float32 array per attribute group,
all in the *activated* domain (linear scale, opacity in [0, 1], unit
quaternions).  ``scene[i]`` still hands back a single :class:`GaussianPrimitive`
when per-splat access is more convenient.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

SH_C0 = 0.28209479177387814
N_SH = 48
N_REST = 45
ATTR_DIM = 3 + 3 + 4 + 1 + N_SH  # 59

# column slices into the 59-dim attribute vector
CENTER = slice(0, 3)
SCALE = slice(3, 6)
ROTATION = slice(6, 10)
OPACITY = slice(10, 11)
COLOR = slice(11, 59)

PLY_ATTRIBUTES = (
    ["x", "y", "z"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
    + ["opacity"]
    + [f"f_dc_{i}" for i in range(3)]
    + [f"f_rest_{i}" for i in range(N_REST)]
)

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


class PlyError(ValueError):
    """Malformed or unsupported PLY file."""


class SceneValidationError(ValueError):
    """Scene attributes violate the primitive invariants."""


@dataclass(frozen=True)
class GaussianPrimitive:
    center: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray  # (w, x, y, z)
    opacity: float
    color_sh: np.ndarray  # 3 DC + 45 higher order

    def as_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.center, self.scale, self.rotation, [self.opacity], self.color_sh]
        ).astype(np.float64)


def _frozen(a, dtype=np.float32, shape=None) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=dtype)
    if shape is not None:
        a = a.reshape(shape)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GaussianScene:
    """An ordered collection of Gaussian primitives.

    Index ``i`` is an identity: it survives save/load round trips and every
    derived structure (feature fields, crop views, labels) refers to it.
    """

    centers: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray
    scene_id: str = "scene"
    source_meta: Optional[dict] = None

    def __post_init__(self):
        n = len(np.asarray(self.centers).reshape(-1, 3))
        object.__setattr__(self, "centers", _frozen(self.centers, shape=(n, 3)))
        object.__setattr__(self, "scales", _frozen(self.scales, shape=(n, 3)))
        object.__setattr__(self, "rotations", _frozen(self.rotations, shape=(n, 4)))
        object.__setattr__(self, "opacities", _frozen(self.opacities, shape=(n,)))
        object.__setattr__(self, "sh", _frozen(self.sh, shape=(n, N_SH)))

    def __len__(self) -> int:
        return self.centers.shape[0]

    def __getitem__(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            self.centers[i], self.scales[i], self.rotations[i],
            float(self.opacities[i]), self.sh[i],
        )

    def __iter__(self) -> Iterator[GaussianPrimitive]:
        for i in range(len(self)):
            yield self[i]

    @property
    def dc(self) -> np.ndarray:
        return self.sh[:, :3]

    @property
    def rgb(self) -> np.ndarray:
        """Base color from the DC coefficients, clamped to [0, 1]."""
        return np.clip(0.5 + SH_C0 * self.sh[:, :3].astype(np.float64), 0.0, 1.0)

    @classmethod
    def from_attributes(cls, attrs: np.ndarray, scene_id: str = "scene",
                        source_meta: Optional[dict] = None) -> "GaussianScene":
        attrs = np.asarray(attrs)
        if attrs.ndim != 2 or attrs.shape[1] != ATTR_DIM:
            raise ValueError(f"expected N x {ATTR_DIM} attributes, got {attrs.shape}")
        return cls(attrs[:, CENTER], attrs[:, SCALE], attrs[:, ROTATION],
                   attrs[:, 10], attrs[:, COLOR], scene_id, source_meta)

    def attributes(self, dtype=np.float64) -> np.ndarray:
        """N x 59 matrix: center, scale, rotation, opacity, 48 SH coefficients."""
        return np.concatenate(
            [self.centers, self.scales, self.rotations,
             self.opacities[:, None], self.sh], axis=1
        ).astype(dtype)

    def subset(self, indices) -> "GaussianScene":
        idx = np.asarray(indices, dtype=np.int64)
        return GaussianScene(self.centers[idx], self.scales[idx], self.rotations[idx],
                             self.opacities[idx], self.sh[idx], self.scene_id,
                             self.source_meta)

    def replace(self, **kw) -> "GaussianScene":
        args = dict(centers=self.centers, scales=self.scales, rotations=self.rotations,
                    opacities=self.opacities, sh=self.sh, scene_id=self.scene_id,
                    source_meta=self.source_meta)
        args.update(kw)
        return GaussianScene(**args)

    def validate(self) -> None:
        attrs = self.attributes(np.float64)
        bad = ~np.isfinite(attrs).all(axis=1)
        if bad.any():
            raise SceneValidationError(
                f"non-finite attribute at primitive {int(np.flatnonzero(bad)[0])}")
        if (self.scales <= 0).any():
            i = int(np.flatnonzero((self.scales <= 0).any(axis=1))[0])
            raise SceneValidationError(f"non-positive scale at primitive {i}")
        if ((self.opacities < 0) | (self.opacities > 1)).any():
            i = int(np.flatnonzero((self.opacities < 0) | (self.opacities > 1))[0])
            raise SceneValidationError(f"opacity outside [0, 1] at primitive {i}")
        norms = np.linalg.norm(self.rotations.astype(np.float64), axis=1)
        if (np.abs(norms - 1.0) > 1e-6).any():
            i = int(np.flatnonzero(np.abs(norms - 1.0) > 1e-6)[0])
            raise SceneValidationError(f"non-unit quaternion at primitive {i}")


def normalize_quaternions(q: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Normalize rows of ``q`` whose norm deviates from 1 by more than ``tol``.

    Rows already within tolerance are returned untouched so that activated
    round trips stay bit-exact.
    """
    q = np.array(q, dtype=np.float32)
    n = np.linalg.norm(q.astype(np.float64), axis=1)
    off = np.abs(n - 1.0) > tol
    if off.any():
        if (n[off] == 0).any():
            raise SceneValidationError(
                f"zero quaternion at primitive {int(np.flatnonzero(off & (n == 0))[0])}")
        q[off] = (q[off].astype(np.float64) / n[off, None]).astype(np.float32)
    return q


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


# --------------------------------------------------------------------------
# PLY
# --------------------------------------------------------------------------

def _read_ply_header(fh):
    first = fh.readline()
    if first.strip() != b"ply":
        raise PlyError("not a PLY file")
    fmt = None
    n_vertex = None
    props = []
    current = None
    while True:
        line = fh.readline()
        if not line:
            raise PlyError("unexpected end of header")
        tokens = line.decode("ascii", "replace").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "end_header":
            break
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            current = tokens[1]
            if current == "vertex":
                n_vertex = int(tokens[2])
            elif n_vertex is None:
                raise PlyError(f"element {current!r} before vertex is not supported")
        elif tokens[0] == "property" and current == "vertex":
            if tokens[1] == "list":
                raise PlyError("list properties on vertex are not supported")
            if tokens[1] not in _PLY_TYPES:
                raise PlyError(f"unknown property type {tokens[1]!r}")
            props.append((tokens[2], "<" + _PLY_TYPES[tokens[1]]))
    if fmt != "binary_little_endian":
        raise PlyError(f"unsupported PLY format {fmt!r}; need binary_little_endian")
    if n_vertex is None:
        raise PlyError("missing vertex element")
    return n_vertex, props


def load_scene_ply(path, activation: str = "raw", scene_id: Optional[str] = None) -> GaussianScene:
    """Read a binary little-endian 3DGS PLY.

    With ``activation="raw"`` the file is assumed to hold log-scales and
    logit-opacities (the usual training dump); ``"activated"`` reads values
    as-is.  Quaternions are renormalized when they drift from unit length.
    """
    if activation not in ("raw", "activated"):
        raise ValueError(f"activation must be 'raw' or 'activated', got {activation!r}")
    path = Path(path)
    with open(path, "rb") as fh:
        n, props = _read_ply_header(fh)
        names = [p[0] for p in props]
        for attr in PLY_ATTRIBUTES:
            if attr not in names:
                raise PlyError(f"missing attribute {attr}")
        data = np.fromfile(fh, dtype=np.dtype(props), count=n)
    if len(data) != n:
        raise PlyError(f"truncated vertex data: expected {n}, read {len(data)}")

    def cols(keys):
        if n == 0:
            return np.zeros((0, len(keys)), np.float32)
        return np.stack([data[k] for k in keys], axis=1).astype(np.float32)

    centers = cols(["x", "y", "z"])
    scales = cols([f"scale_{i}" for i in range(3)])
    rots = cols([f"rot_{i}" for i in range(4)])
    opac = cols(["opacity"])[:, 0]
    sh = cols([f"f_dc_{i}" for i in range(3)] + [f"f_rest_{i}" for i in range(N_REST)])

    raw = np.concatenate([centers, scales, rots, opac[:, None], sh], axis=1)
    bad = ~np.isfinite(raw).all(axis=1)
    if bad.any():
        raise SceneValidationError(f"non-finite value at primitive {int(np.flatnonzero(bad)[0])}")

    if activation == "raw":
        scales = np.exp(scales.astype(np.float64))
        opac = sigmoid(opac.astype(np.float64))
    rots = normalize_quaternions(rots)
    scene = GaussianScene(centers, scales, rots, opac, sh, scene_id=scene_id or path.stem)
    scene.validate()
    return scene


def save_scene_ply(scene: GaussianScene, path, activation: str = "activated") -> None:
    """Write ``scene`` as binary little-endian PLY (float32 properties)."""
    if activation not in ("raw", "activated"):
        raise ValueError(f"activation must be 'raw' or 'activated', got {activation!r}")
    n = len(scene)
    scales = scene.scales
    opac = scene.opacities
    if activation == "raw":
        scales = np.log(scales.astype(np.float64)).astype(np.float32)
        p = np.clip(opac.astype(np.float64), 1e-7, 1 - 1e-7)
        opac = np.log(p / (1 - p)).astype(np.float32)
    dtype = np.dtype([(k, "<f4") for k in PLY_ATTRIBUTES])
    out = np.empty(n, dtype=dtype)
    for i, k in enumerate("xyz"):
        out[k] = scene.centers[:, i]
    for i in range(3):
        out[f"scale_{i}"] = scales[:, i]
    for i in range(4):
        out[f"rot_{i}"] = scene.rotations[:, i]
    out["opacity"] = opac
    for i in range(3):
        out[f"f_dc_{i}"] = scene.sh[:, i]
    for i in range(N_REST):
        out[f"f_rest_{i}"] = scene.sh[:, 3 + i]
    header = ["ply", "format binary_little_endian 1.0",
              f"comment scene_id {scene.scene_id}",
              f"comment activation {activation}",
              f"element vertex {n}"]
    header += [f"property float {k}" for k in PLY_ATTRIBUTES]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(out.tobytes())


# --------------------------------------------------------------------------
# Semantic feature field
# --------------------------------------------------------------------------

FIELD_MAGIC = b"SSFF"
FIELD_VERSION = 1


@dataclass(frozen=True, eq=False)
class SemanticFeatureField:
    """Per-Gaussian feature rows aligned 1:1 with a scene.

    Rows of never-observed Gaussians are zero and ``labeled[i]`` is False.
    """

    features: np.ndarray
    labeled: np.ndarray
    scene_id: str = "scene"

    def __post_init__(self):
        f = _frozen(self.features, dtype=np.float32)
        if f.ndim != 2:
            raise ValueError("features must be N x d")
        lab = _frozen(self.labeled, dtype=bool)
        if lab.shape != (f.shape[0],):
            raise ValueError("labeled flag must have one entry per row")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labeled", lab)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]

    @classmethod
    def from_rows(cls, rows, labeled=None, scene_id="scene", normalize=True):
        rows = np.asarray(rows, dtype=np.float64)
        if labeled is None:
            labeled = np.linalg.norm(rows, axis=1) > 0
        labeled = np.asarray(labeled, dtype=bool)
        out = np.zeros_like(rows)
        if normalize:
            norms = np.linalg.norm(rows[labeled], axis=1, keepdims=True)
            out[labeled] = rows[labeled] / np.maximum(norms, 1e-12)
        else:
            out[labeled] = rows[labeled]
        return cls(out, labeled, scene_id)

    def check_unit(self, tol: float = 1e-5) -> bool:
        n = np.linalg.norm(self.features.astype(np.float64), axis=1)
        return bool(np.all(np.abs(n[self.labeled] - 1) <= tol) and np.all(n[~self.labeled] == 0))


def save_feature_field(field_: SemanticFeatureField, path) -> None:
    n, d = field_.features.shape
    with open(path, "wb") as fh:
        fh.write(FIELD_MAGIC)
        fh.write(struct.pack("<IQI", FIELD_VERSION, n, d))
        fh.write((~field_.labeled).astype(np.uint8).tobytes())
        fh.write(field_.features.astype("<f4").tobytes())


def load_feature_field(path, scene_id: Optional[str] = None) -> SemanticFeatureField:
    buf = Path(path).read_bytes()
    if buf[:4] != FIELD_MAGIC:
        raise ValueError(f"{path}: bad magic, expected SSFF")
    version, n, d = struct.unpack_from("<IQI", buf, 4)
    if version != FIELD_VERSION:
        raise ValueError(f"{path}: unsupported SSFF version {version}")
    off = 4 + 16
    unlabeled = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off)
    off += n
    expected = off + n * d * 4
    if len(buf) != expected:
        raise ValueError(f"{path}: size {len(buf)} does not match header ({expected})")
    feats = np.frombuffer(buf, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    return SemanticFeatureField(feats.astype(np.float32), unlabeled == 0,
                                scene_id or Path(path).stem)


@dataclass(frozen=True)
class CropView:
    """A subset of scene primitives plus the record of how it was produced."""

    indices: np.ndarray
    kind: str = "global"
    augmentation_log: list = field(default_factory=list)

    def __post_init__(self):
        object.__setattr__(self, "indices", _frozen(self.indices, dtype=np.int64).reshape(-1))

    def __len__(self) -> int:
        return len(self.indices)

    def to_dict(self) -> dict:
        return {"indices": self.indices.tolist(), "kind": self.kind,
                "augmentation_log": list(self.augmentation_log)}

    @classmethod
    def from_dict(cls, d: dict) -> "CropView":
        return cls(np.asarray(d["indices"], dtype=np.int64), d.get("kind", "global"),
                   list(d.get("augmentation_log", [])))
