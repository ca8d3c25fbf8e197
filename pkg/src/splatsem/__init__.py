"""Language-aligned feature fields for 3D Gaussian splat scenes."""

from .scene import (ATTR_DIM, GaussianPrimitive, GaussianScene, PlyError, SceneValidationError,
                    SemanticFeatureField, load_feature_field, load_scene_ply, save_feature_field,
                    save_scene_ply)

__version__ = "0.1.0"

__all__ = [
    "ATTR_DIM", "GaussianPrimitive", "GaussianScene", "PlyError", "SceneValidationError",
    "SemanticFeatureField", "load_feature_field", "load_scene_ply", "save_feature_field",
    "save_scene_ply", "__version__",
]
