"""Camera model, pose math, and cubic Bezier primitives.

Conventions: world frame is +Z up; image +Y points down, so "up" in the
image is -Y. A Pose stores the world-to-camera transform, i.e. a point X
in the world maps to R @ X + T in the camera frame (camera +Z forward,
+X right, +Y down).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class BehindCameraError(ValueError):
    """Point has non-positive depth in the camera frame."""


class InsufficientDataError(ValueError):
    """Not enough points for the requested fit."""


class DegenerateFitError(ValueError):
    """The fitting system is rank deficient (e.g. all points coincide)."""


def _frozen_array(a, shape, dtype=np.float64):
    arr = np.array(a, dtype=dtype)
    if arr.shape != shape:
        raise ValueError(f"expected shape {shape}, got {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def contains(self, pixel) -> bool:
        u, v = float(pixel[0]), float(pixel[1])
        return 0.0 <= u < self.width and 0.0 <= v < self.height

    def fov_length(self, z: float) -> float:
        """World-space height imaged across the full vertical FoV at depth z."""
        return self.height * z / self.fy

    def pixel_ray(self, pixel) -> np.ndarray:
        """Unit camera-frame direction through a pixel."""
        d = np.array(
            [(pixel[0] - self.cx) / self.fx, (pixel[1] - self.cy) / self.fy, 1.0]
        )
        return d / np.linalg.norm(d)


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform: x_cam = rotation @ x_world + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen_array(self.rotation, (3, 3)))
        object.__setattr__(
            self, "translation", _frozen_array(self.translation, (3,))
        )
        R = self.rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal")
        if not np.isclose(np.linalg.det(R), 1.0, atol=1e-9):
            raise ValueError("rotation determinant must be +1")

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def look_at(position, target, up=(0.0, 0.0, 1.0)) -> "Pose":
        """Camera at `position` with optical axis toward `target`.

        Camera +Y is chosen to point down in the world (image up = world up).
        """
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        n = np.linalg.norm(forward)
        if n < 1e-12:
            raise ValueError("look_at target coincides with position")
        forward = forward / n
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-9:  # looking straight along up
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        right = right / np.linalg.norm(right)
        down = np.cross(forward, right)
        R_cw = np.column_stack([right, down, forward])
        R = R_cw.T
        return Pose(R, -R @ position)

    def camera_center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def transform(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) to camera frame."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """Transform equal to applying `other` first, then self."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )


def projection_matrix(intr: CameraIntrinsics, pose: Pose) -> np.ndarray:
    """3x4 matrix P = K [R | T]."""
    return intr.matrix @ np.hstack([pose.rotation, pose.translation[:, None]])


def project(intr: CameraIntrinsics, pose: Pose, point) -> tuple[np.ndarray, float]:
    """Project a world point; returns (pixel (u, v), camera-frame depth)."""
    x, y, z = pose.transform(np.asarray(point, dtype=np.float64))
    if z <= 0:
        raise BehindCameraError(f"point has depth {z:.6g} <= 0")
    return np.array([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy]), z


def project_many(intr: CameraIntrinsics, pose: Pose, points: np.ndarray):
    """Vectorized projection; returns (pixels (N,2), depths (N,)).

    Points behind the camera get depth <= 0 and NaN pixels (no raise).
    """
    cam = pose.transform(np.asarray(points, dtype=np.float64))
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * cam[:, 0] / z + intr.cx
        v = intr.fy * cam[:, 1] / z + intr.cy
    pix = np.column_stack([u, v])
    pix[z <= 0] = np.nan
    return pix, z


# ---------------------------------------------------------------------------
# Cubic Bezier curves
# ---------------------------------------------------------------------------


def bernstein_matrix(ts: np.ndarray) -> np.ndarray:
    """(n, 4) cubic Bernstein basis evaluated at the given parameters."""
    t = np.asarray(ts, dtype=np.float64)
    s = 1.0 - t
    return np.stack([s**3, 3 * s**2 * t, 3 * s * t**2, t**3], axis=-1)


@dataclass(frozen=True)
class CubicBezier:
    """Cubic Bezier curve in 2 or 3 dimensions; control points shape (4, d)."""

    control_points: np.ndarray

    def __post_init__(self):
        cp = np.array(self.control_points, dtype=np.float64)
        if cp.shape[0] != 4 or cp.ndim != 2 or cp.shape[1] not in (2, 3):
            raise ValueError("control points must have shape (4, 2) or (4, 3)")
        cp.flags.writeable = False
        object.__setattr__(self, "control_points", cp)

    @property
    def dim(self) -> int:
        return self.control_points.shape[1]

    def point(self, t) -> np.ndarray:
        _check_domain(t)
        return bernstein_matrix(np.asarray(t)) @ self.control_points

    def tangent(self, t) -> np.ndarray:
        """Derivative dB/dt (never normalized)."""
        _check_domain(t)
        t = np.asarray(t, dtype=np.float64)
        s = 1.0 - t
        basis = np.stack([s**2, 2 * s * t, t**2], axis=-1)
        diffs = 3.0 * np.diff(self.control_points, axis=0)
        return basis @ diffs

    def sample(self, n: int = 256) -> np.ndarray:
        return self.point(np.linspace(0.0, 1.0, n))

    def arc_length(self, n: int = 512) -> float:
        pts = self.sample(n)
        return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


def _check_domain(t):
    t = np.asarray(t)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("curve parameter outside [0, 1]")


def bezier_eval(curve: CubicBezier, t) -> np.ndarray:
    return curve.point(t)


def bezier_tangent(curve: CubicBezier, t) -> np.ndarray:
    return curve.tangent(t)


def chord_length_params(points: np.ndarray) -> np.ndarray:
    """Cumulative chord-length parameterization normalized to [0, 1]."""
    pts = np.asarray(points, dtype=np.float64)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    if total <= 0.0:
        raise DegenerateFitError("zero total chord length")
    return s / total


def bezier_fit_lsq(points, weights=None, params=None) -> CubicBezier:
    """Least-squares cubic Bezier fit with chord-length parameterization.

    Endpoints are not constrained to the first/last data point.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) < 4:
        raise InsufficientDataError("at least 4 points are required")
    ts = chord_length_params(pts) if params is None else np.asarray(params)
    B = bernstein_matrix(ts)
    if weights is not None:
        w = np.sqrt(np.asarray(weights, dtype=np.float64))[:, None]
        B = B * w
        pts = pts * w
    if np.linalg.matrix_rank(B) < 4:
        raise DegenerateFitError("rank-deficient Bernstein system")
    ctrl, *_ = np.linalg.lstsq(B, pts, rcond=None)
    return CubicBezier(ctrl)


def arclength_spaced_params(curve: CubicBezier, spacing: float, n_dense: int = 512):
    """Parameters spaced `spacing` apart in arc length, last one at t=1."""
    ts = np.linspace(0.0, 1.0, n_dense)
    pts = curve.point(ts)
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    total = s[-1]
    targets = np.arange(0.0, total, spacing)
    if total - targets[-1] > 1e-9:
        targets = np.append(targets, total)
    return np.interp(targets, s, ts)


def _nearest_sample(samples: np.ndarray, pts: np.ndarray):
    """(distance, index) of the closest sample for each point."""
    # KD-tree wins once the pairwise matrix gets large
    if len(pts) * len(samples) > 20_000:
        from scipy.spatial import cKDTree
        return cKDTree(samples).query(pts)
    d = pts[:, None, :] - samples[None, :, :]
    d2 = (d * d).sum(axis=2)
    idx = d2.argmin(axis=1)
    return np.sqrt(d2[np.arange(len(pts)), idx]), idx


def curve_point_distances(curve: CubicBezier, points: np.ndarray, n_dense: int = 256):
    """Approximate distance from each point to the curve via dense sampling."""
    samples = curve.sample(n_dense)
    pts = np.asarray(points, dtype=np.float64)
    return _nearest_sample(samples, pts)[0]


def nearest_curve_params(curve: CubicBezier, points: np.ndarray, n_dense: int = 256):
    """Parameter of the closest dense sample for each point."""
    ts = np.linspace(0.0, 1.0, n_dense)
    samples = curve.point(ts)
    pts = np.asarray(points, dtype=np.float64)
    return ts[_nearest_sample(samples, pts)[1]]
