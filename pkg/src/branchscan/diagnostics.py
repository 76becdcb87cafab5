"""Diagnostic image export: mask/skeleton overlays and reconstruction
versus ground-truth projections."""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

from .geometry import CameraIntrinsics, Pose, project_many
from .model3d import TreeModel
from .simulator import SceneSpec, scene_polylines


def save_pgm(mask: np.ndarray, path) -> None:
    img = (np.asarray(mask, dtype=np.uint8)) * 255
    cv2.imwrite(str(path), img)


def _draw_curve(img, curve, color, thickness=1):
    pts = curve.sample(128)
    poly = np.rint(pts).astype(np.int32).reshape(-1, 1, 2)
    cv2.polylines(img, [poly], False, color, thickness)


def mask_overlay(mask: np.ndarray, primary=None, secondaries=()) -> np.ndarray:
    """Mask in white, primary curve in blue, secondaries in green (BGR)."""
    img = cv2.cvtColor((mask.astype(np.uint8)) * 255, cv2.COLOR_GRAY2BGR)
    if primary is not None:
        _draw_curve(img, primary.curve, (255, 0, 0), 2)
    for det in secondaries:
        _draw_curve(img, det.curve, (0, 255, 0), 2)
    return img


def save_mask_overlay(mask, primary, secondaries, path) -> None:
    cv2.imwrite(str(path), mask_overlay(mask, primary, secondaries))


def reconstruction_overlay(model: TreeModel, scene: SceneSpec,
                           intr: CameraIntrinsics, pose: Pose) -> np.ndarray:
    """Ground truth in gray, model result in red, projected into a view."""
    img = np.zeros((intr.height, intr.width, 3), dtype=np.uint8)

    def draw(points, color, thickness):
        pix, z = project_many(intr, pose, points)
        ok = (z > 0) & np.isfinite(pix).all(axis=1)
        pts = np.rint(pix[ok]).astype(np.int32)
        for p in pts:
            cv2.circle(img, tuple(p), thickness, color, -1)

    for _, pts, _r in scene_polylines(scene):
        draw(pts, (128, 128, 128), 1)
    if model.primary is not None:
        draw(model.primary.points, (0, 0, 255), 2)
    for sec in model.secondaries:
        draw(sec.branch.points, (0, 0, 255), 2)
    return img


def save_reconstruction_overlay(model, scene, intr, pose, path) -> None:
    cv2.imwrite(str(path), reconstruction_overlay(model, scene, intr, pose))
