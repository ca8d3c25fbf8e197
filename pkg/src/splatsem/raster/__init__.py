"""CPU splatting: projection, compositing, feature lifting and image metrics."""

from .camera import Camera, Splat2D, load_cameras, project_gaussian, project_scene, save_cameras
from .composite import (BlendContribution, Contributions, RenderTarget, available_backends,
                        composite, default_backend)
from .lift import lift_features
from .metrics import laplacian_sharpness, psnr, ssim

__all__ = [
    "Camera", "Splat2D", "load_cameras", "save_cameras", "project_gaussian", "project_scene",
    "BlendContribution", "Contributions", "RenderTarget", "composite",
    "available_backends", "default_backend", "lift_features",
    "psnr", "ssim", "laplacian_sharpness",
]
