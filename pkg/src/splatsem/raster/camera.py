"""Pinhole cameras and EWA projection of 3D Gaussians to screen space.

Pixel ``(row, col)`` has its center at continuous image coordinates
``(col + 0.5, row + 0.5)``; the image spans ``[0, width] x [0, height]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from ..augment import quat_to_matrix
from ..scene import GaussianPrimitive, GaussianScene

NEAR_PLANE = 0.01
CULL_SIGMA = 3.0


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray  # world -> camera rotation
    t: np.ndarray
    frame_id: str = "0"

    def __post_init__(self):
        R = np.asarray(self.R, np.float64).reshape(3, 3)
        t = np.asarray(self.t, np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-6:
            raise ValueError(f"camera {self.frame_id}: rotation is not orthonormal")

    def to_dict(self) -> dict:
        return {"frame_id": self.frame_id, "fx": self.fx, "fy": self.fy,
                "cx": self.cx, "cy": self.cy, "width": self.width,
                "height": self.height, "R": self.R.reshape(-1).tolist(),
                "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), np.asarray(d["R"], np.float64),
                   np.asarray(d["t"], np.float64), str(d.get("frame_id", "0")))

    @classmethod
    def look_at(cls, eye, target, up=(0, 0, 1), fx=100.0, fy=None, width=64,
                height=64, frame_id="0") -> "Camera":
        """Camera at ``eye`` looking at ``target`` (camera +z forward, +y down)."""
        eye = np.asarray(eye, np.float64)
        fwd = np.asarray(target, np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(fx, fy or fx, width / 2, height / 2, width, height, R, -R @ eye, frame_id)


def load_cameras(path) -> list:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = data["cameras"]
    return [Camera.from_dict(d) for d in data]


def save_cameras(cameras, path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras], indent=1))


class Splat2D(NamedTuple):
    mean: np.ndarray  # (u, v) pixels
    cov: np.ndarray   # 2 x 2, px^2
    depth: float


class ProjectedScene(NamedTuple):
    means: np.ndarray   # P x 2
    covs: np.ndarray    # P x 2 x 2
    depths: np.ndarray  # P
    visible: np.ndarray  # P bool


def covariance_3d(scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    """R diag(s^2) R^T for each primitive."""
    Rm = quat_to_matrix(np.asarray(rotations, np.float64).reshape(-1, 4))
    s2 = np.asarray(scales, np.float64).reshape(-1, 3) ** 2
    return np.einsum("nij,nj,nkj->nik", Rm, s2, Rm)


def project_scene(scene: GaussianScene, cam: Camera) -> ProjectedScene:
    return _project(scene.centers, scene.scales, scene.rotations, cam)


def _project(centers, scales, rotations, cam: Camera) -> ProjectedScene:
    centers = np.asarray(centers, np.float64).reshape(-1, 3)
    pc = centers @ cam.R.T + cam.t
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    zs = np.where(z > NEAR_PLANE, z, 1.0)
    means = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=1)
    n = len(centers)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * x / zs ** 2
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * y / zs ** 2
    M = J @ cam.R
    covs = M @ covariance_3d(scales, rotations) @ np.transpose(M, (0, 2, 1))
    covs = 0.5 * (covs + np.transpose(covs, (0, 2, 1)))
    lam_max = _max_eigenvalue(covs)
    sig = CULL_SIGMA * np.sqrt(np.maximum(lam_max, 0.0))
    u, v = means[:, 0], means[:, 1]
    visible = ((z > NEAR_PLANE)
               & (u >= -sig) & (u <= cam.width + sig)
               & (v >= -sig) & (v <= cam.height + sig))
    return ProjectedScene(means, covs, z, visible)


def _max_eigenvalue(covs):
    a, b, c = covs[:, 0, 0], covs[:, 0, 1], covs[:, 1, 1]
    mid = 0.5 * (a + c)
    rad = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    return mid + rad


def project_gaussian(g: GaussianPrimitive, cam: Camera) -> Optional[Splat2D]:
    """Project one primitive; ``None`` when it is culled."""
    p = _project(g.center, g.scale, g.rotation, cam)
    if not p.visible[0]:
        return None
    return Splat2D(p.means[0], p.covs[0], float(p.depths[0]))
