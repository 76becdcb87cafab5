"""DLT triangulation of tracked pixels and reliability filtering.

A track holds one keypoint's pixel observations over M frames with known
camera poses. Stacking two rows per frame gives a 2Mx4 system whose
least-squares null direction (smallest singular vector) is the
homogeneous 3D point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, Pose, projection_matrix


class DegenerateGeometryError(ValueError):
    """All poses coincide; no baseline to triangulate from."""


class PointAtInfinityError(ValueError):
    """Homogeneous solution has (near-)zero w."""


@dataclass(frozen=True)
class TrackerConfig:
    window: int = 8             # M frames per track
    frame_spacing: float = 0.001  # meters of camera travel between frames
    pixel_noise: float = 0.0    # sigma (px), simulator only

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if self.frame_spacing <= 0:
            raise ValueError("frame spacing must be positive")
        if self.pixel_noise < 0:
            raise ValueError("pixel noise must be >= 0")


@dataclass
class PixelTrack:
    keypoint_id: int
    pixels: np.ndarray          # (M, 2)
    poses: list[Pose]           # one per frame, oldest first

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if len(self.pixels) != len(self.poses):
            raise ValueError("one pose per pixel observation required")


@dataclass
class TriangulatedPoint:
    position: np.ndarray        # (3,) world, meters
    reproj_error: float         # mean pixel error over the M frames
    max_reproj_error: float     # worst single frame
    depth: float                # camera-frame z at the most recent pose


def build_dlt(track: PixelTrack, intr: CameraIntrinsics) -> np.ndarray:
    """Assemble the 2Mx4 system D: rows u*p3 - p1 and v*p3 - p2 per frame."""
    rows = []
    for (u, v), pose in zip(track.pixels, track.poses):
        P = projection_matrix(intr, pose)
        rows.append(u * P[2] - P[0])
        rows.append(v * P[2] - P[1])
    return np.array(rows)


def triangulate(track: PixelTrack, intr: CameraIntrinsics) -> TriangulatedPoint:
    centers = np.array([p.camera_center() for p in track.poses])
    if np.linalg.norm(centers - centers[0], axis=1).max() < 1e-12:
        raise DegenerateGeometryError("all track poses coincide")
    D = build_dlt(track, intr)
    _, _, vt = np.linalg.svd(D)
    Xh = vt[-1]
    if abs(Xh[3]) < 1e-12:
        raise PointAtInfinityError("homogeneous w below 1e-12")
    X = Xh[:3] / Xh[3]

    errors = []
    for (u, v), pose in zip(track.pixels, track.poses):
        P = projection_matrix(intr, pose)
        p = P @ np.append(X, 1.0)
        if p[2] <= 0:
            errors.append(np.inf)
        else:
            errors.append(np.hypot(p[0] / p[2] - u, p[1] / p[2] - v))
    depth = float(track.poses[-1].transform(X)[2])
    return TriangulatedPoint(X, float(np.mean(errors)), float(np.max(errors)), depth)


def filter_point(pt: TriangulatedPoint, max_depth: float = 1.0,
                 max_reproj: float = 4.0, use_max_error: bool = False
                 ) -> str | None:
    """None if the point is kept, else the rejection reason."""
    if pt.depth > max_depth:
        return "depth"
    err = pt.max_reproj_error if use_max_error else pt.reproj_error
    if err > max_reproj:
        return "reprojection"
    return None
