"""Active branch scanning and 3D reconstruction toolkit."""

from .geometry import (
    CameraIntrinsics,
    CubicBezier,
    Pose,
    bezier_eval,
    bezier_fit_lsq,
    bezier_tangent,
    project,
    projection_matrix,
)
from .model3d import TreeModel, estimate_radius
from .simulator import SceneSpec, SimConfig, generate_scene, run_scan

__all__ = [
    "CameraIntrinsics",
    "CubicBezier",
    "Pose",
    "SceneSpec",
    "SimConfig",
    "TreeModel",
    "bezier_eval",
    "bezier_fit_lsq",
    "bezier_tangent",
    "estimate_radius",
    "generate_scene",
    "project",
    "projection_matrix",
    "run_scan",
]
