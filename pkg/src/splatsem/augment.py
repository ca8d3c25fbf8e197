"""Geometric and photometric augmentations for Gaussian scenes.

An :class:`AugmentationSpec` is an ordered list of transform steps plus the
crop/grid parameters used by :mod:`splatsem.sampling`.  The preset builders
reproduce the global/local view pipelines of DINO-style multi-crop training
adapted to splats; angles are in radians.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import ndimage
from scipy.interpolate import RegularGridInterpolator
from scipy.spatial import cKDTree

from .scene import SH_C0, GaussianScene

_AXES = {"x": 0, "y": 1, "z": 2}

# parameters accepted by each step kind (besides "p")
STEP_KINDS = {
    "rotate": ("axis", "angle"),
    "scale": ("range",),
    "flip": ("axes",),
    "jitter": ("sigma", "clip"),
    "elastic": ("params",),
    "dropout": ("ratio",),
    "color_jitter": ("brightness", "contrast", "saturation", "hue"),
    "grayscale": (),
    "blur": ("sigma", "k"),
}


@dataclass
class Step:
    kind: str
    p: float = 1.0
    params: dict = field(default_factory=dict)


@dataclass
class AugmentationSpec:
    steps: list = field(default_factory=list)
    crop_global: tuple = (0.4, 1.0)
    crop_local: tuple = (0.1, 0.4)
    cap_global: int = 4096
    cap_local: int = 1024
    grid_size: float = 0.02

    def __post_init__(self):
        self.steps = [s if isinstance(s, Step) else Step(**s) for s in self.steps]
        self.crop_global = tuple(self.crop_global)
        self.crop_local = tuple(self.crop_local)
        self.validate()

    def validate(self) -> None:
        for s in self.steps:
            if s.kind not in STEP_KINDS:
                raise ValueError(f"unknown augmentation {s.kind!r}")
            if not 0.0 <= s.p <= 1.0:
                raise ValueError(f"{s.kind}: probability {s.p} outside [0, 1]")
            unknown = set(s.params) - set(STEP_KINDS[s.kind])
            if unknown:
                raise ValueError(f"{s.kind}: unknown parameters {sorted(unknown)}")
            for key in ("angle", "range"):
                if key in s.params and s.params[key][0] > s.params[key][1]:
                    raise ValueError(f"{s.kind}: {key} range is not ordered")
        for name in ("crop_global", "crop_local"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < lo <= hi")
        if self.cap_global < 1 or self.cap_local < 1 or self.grid_size <= 0:
            raise ValueError("crop caps and grid size must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AugmentationSpec":
        return cls(**json.loads(text))

    def with_steps(self, steps) -> "AugmentationSpec":
        return AugmentationSpec(list(steps), self.crop_global, self.crop_local,
                                self.cap_global, self.cap_local, self.grid_size)


# -- presets ---------------------------------------------------------------

def base_steps() -> list:
    return [
        Step("rotate", 0.5, {"axis": "z", "angle": (-np.pi, np.pi)}),
        Step("rotate", 0.5, {"axis": "x", "angle": (-np.pi / 64, np.pi / 64)}),
        Step("rotate", 0.5, {"axis": "y", "angle": (-np.pi / 64, np.pi / 64)}),
        Step("scale", 1.0, {"range": (0.9, 1.1)}),
        Step("flip", 0.5, {"axes": ("x", "y")}),
        Step("jitter", 1.0, {"sigma": 0.005, "clip": 0.02}),
        Step("elastic", 0.95, {"params": [[0.9, 0.1]]}),
    ]


def _photometric(dropout: bool, blur_p: float) -> list:
    steps = [Step("dropout", 0.2, {"ratio": 0.2})] if dropout else []
    return steps + [
        Step("color_jitter", 0.8, {"brightness": 0.4, "contrast": 0.4,
                                   "saturation": 0.2, "hue": 0.1}),
        Step("grayscale", 0.2),
        Step("blur", blur_p, {"sigma": 0.02, "k": 8}),
    ]


def global_view_steps(variant: int) -> list:
    """Global base flip followed by global transform 0 (strong) or 1 (weak)."""
    steps = [Step("flip", 0.5, {"axes": ("x", "y")})]
    if variant == 0:
        return steps + _photometric(dropout=False, blur_p=1.0)
    return steps + _photometric(dropout=True, blur_p=0.2)


def local_view_steps() -> list:
    return [
        Step("elastic", 0.95, {"params": [[0.2, 0.4], [0.8, 1.6]]}),
        Step("flip", 0.5, {"axes": ("x", "y")}),
    ] + _photometric(dropout=True, blur_p=0.5)


def identity_spec(**kw) -> AugmentationSpec:
    return AugmentationSpec([], **kw)


# -- quaternion / color helpers ------------------------------------------

def axis_angle_quaternion(axis: str, angle: float) -> np.ndarray:
    q = np.zeros(4)
    q[0] = np.cos(angle / 2)
    q[1 + _AXES[axis]] = np.sin(angle / 2)
    return q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b for (w, x, y, z); ``b`` may be N x 4."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], axis=-2)


def reflect_quaternions(q: np.ndarray, axis: int) -> np.ndarray:
    """Quaternion of F R F for the reflection F negating ``axis``.

    Conjugating a rotation by a mirror keeps the rotation component about the
    mirrored axis and flips the two others.
    """
    out = np.array(q, np.float64)
    for a in range(3):
        if a != axis:
            out[:, 1 + a] = -out[:, 1 + a]
    return out


def dc_to_rgb(dc):
    return 0.5 + SH_C0 * np.asarray(dc, np.float64)


def rgb_to_dc(rgb):
    return (np.asarray(rgb, np.float64) - 0.5) / SH_C0


_GRAY = np.array([0.299, 0.587, 0.114])
# YIQ basis for hue rotation
_RGB2YIQ = np.array([[0.299, 0.587, 0.114],
                     [0.596, -0.274, -0.322],
                     [0.211, -0.523, 0.312]])
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)


def _hue_rotate(rgb, turns):
    th = 2 * np.pi * turns
    c, s = np.cos(th), np.sin(th)
    rot = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    return rgb @ (_YIQ2RGB @ rot @ _RGB2YIQ).T


def _elastic(coords, granularity, magnitude, rng):
    coords = np.asarray(coords, np.float64)
    cmin = coords.min(0)
    noise_dim = ((coords - cmin).max(0) // granularity).astype(int) + 3
    noise = rng.standard_normal((*noise_dim, 3))
    blurs = [np.ones((3, 1, 1, 1)) / 3, np.ones((1, 3, 1, 1)) / 3, np.ones((1, 1, 3, 1)) / 3]
    for _ in range(2):
        for b in blurs:
            noise = ndimage.convolve(noise, b, mode="constant", cval=0)
    axes = [np.linspace(lo, hi, d) for lo, hi, d in
            zip(cmin - granularity, cmin + granularity * (noise_dim - 2), noise_dim)]
    interp = RegularGridInterpolator(axes, noise, bounds_error=False, fill_value=0)
    return coords + interp(coords) * magnitude


class Augmented(NamedTuple):
    scene: GaussianScene
    log: list
    kept: np.ndarray  # indices into the input scene that survive (dropout)


def apply_augmentation(scene: GaussianScene, spec: AugmentationSpec, rng_seed: int) -> Augmented:
    """Apply ``spec.steps`` in order; every sampled parameter goes to the log."""
    rng = np.random.default_rng(rng_seed)
    centers = scene.centers.astype(np.float64)
    scales = scene.scales.astype(np.float64)
    rots = scene.rotations.astype(np.float64)
    opac = scene.opacities
    sh = scene.sh.astype(np.float64)
    kept = np.arange(len(scene))
    log = []
    changed = False

    for step in spec.steps:
        prm = step.params
        if step.kind == "flip":
            # each axis flips independently with the step probability
            for ax in prm.get("axes", ("x",)):
                if rng.random() >= step.p:
                    continue
                a = _AXES[ax]
                centers[:, a] = -centers[:, a]
                rots = reflect_quaternions(rots, a)
                log.append({"op": "flip", "axis": ax})
                changed = True
            continue
        if rng.random() >= step.p or len(kept) == 0:
            continue
        changed = True
        if step.kind == "rotate":
            angle = float(rng.uniform(*prm["angle"]))
            q = axis_angle_quaternion(prm["axis"], angle)
            pivot = (centers.min(0) + centers.max(0)) / 2
            centers = (centers - pivot) @ quat_to_matrix(q).T + pivot
            rots = quat_multiply(q, rots)
            log.append({"op": "rotate", "axis": prm["axis"], "angle": angle})
        elif step.kind == "scale":
            s = float(rng.uniform(*prm["range"]))
            centers = centers * s
            scales = scales * s
            log.append({"op": "scale", "factor": s})
        elif step.kind == "jitter":
            noise = np.clip(prm["sigma"] * rng.standard_normal(centers.shape),
                            -prm["clip"], prm["clip"])
            centers = centers + noise
            log.append({"op": "jitter", "sigma": prm["sigma"], "clip": prm["clip"]})
        elif step.kind == "elastic":
            for gran, mag in prm["params"]:
                centers = _elastic(centers, gran, mag, rng)
            log.append({"op": "elastic", "params": [list(p) for p in prm["params"]]})
        elif step.kind == "dropout":
            n = len(kept)
            keep = np.sort(rng.choice(n, size=max(1, int(n * (1 - prm["ratio"]))), replace=False))
            centers, scales, rots, opac, sh = (a[keep] for a in (centers, scales, rots, opac, sh))
            kept = kept[keep]
            log.append({"op": "dropout", "ratio": prm["ratio"], "kept": int(len(keep))})
        elif step.kind == "color_jitter":
            rgb = dc_to_rgb(sh[:, :3])
            b = float(rng.uniform(1 - prm["brightness"], 1 + prm["brightness"]))
            c = float(rng.uniform(1 - prm["contrast"], 1 + prm["contrast"]))
            sat = float(rng.uniform(1 - prm["saturation"], 1 + prm["saturation"]))
            hue = float(rng.uniform(-prm["hue"], prm["hue"]))
            rgb = np.clip(rgb * b, 0, 1)
            mean_gray = float((rgb @ _GRAY).mean())
            rgb = np.clip((rgb - mean_gray) * c + mean_gray, 0, 1)
            gray = (rgb @ _GRAY)[:, None]
            rgb = np.clip((rgb - gray) * sat + gray, 0, 1)
            rgb = np.clip(_hue_rotate(rgb, hue), 0, 1)
            sh[:, :3] = rgb_to_dc(rgb)
            log.append({"op": "color_jitter", "brightness": b, "contrast": c,
                        "saturation": sat, "hue": hue})
        elif step.kind == "grayscale":
            gray = dc_to_rgb(sh[:, :3]) @ _GRAY
            sh[:, :3] = rgb_to_dc(np.repeat(gray[:, None], 3, axis=1))
            log.append({"op": "grayscale"})
        elif step.kind == "blur":
            k = min(int(prm.get("k", 8)), len(centers))
            sigma = float(prm.get("sigma", 0.02))
            dist, idx = cKDTree(centers).query(centers, k=k)
            dist = dist.reshape(len(centers), -1)
            idx = idx.reshape(len(centers), -1)
            w = np.exp(-0.5 * (dist / sigma) ** 2)
            w /= w.sum(1, keepdims=True)
            rgb = dc_to_rgb(sh[:, :3])
            sh[:, :3] = rgb_to_dc(np.einsum("nk,nkc->nc", w, rgb[idx]))
            log.append({"op": "blur", "sigma": sigma, "k": k})

    if not changed:
        return Augmented(scene, log, kept)
    rots = rots / np.linalg.norm(rots, axis=1, keepdims=True)
    out = GaussianScene(centers, scales, rots, opac, sh, scene.scene_id, scene.source_meta)
    return Augmented(out, log, kept)
