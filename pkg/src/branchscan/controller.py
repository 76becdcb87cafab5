"""Branch-following velocity controller with viewpoint rotation cycling.

The controller projects the primary centerline into the image, picks the
point closest to the vertical center row, and commands the branch tangent
plus proportional corrections along camera x (pixel centering) and camera
z (standoff distance), rescaled to a fixed speed. A separate rotation
state periodically cycles the viewing yaw through {center, +theta,
center, -theta} as the camera climbs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, Pose, project_many
from .model3d import TreeModel


@dataclass
class ControllerParams:
    k_u: float = 0.01            # per horizontal pixel of error
    k_z: float = 20.0            # per meter of standoff error
    z_target: float = 0.20       # meters
    speed: float = 0.02          # commanded magnitude, m/s
    lookat_angle: float = 0.0    # radians; rotation viewpoint offset
    rotation_frequency: float = 0.0  # cycles per vertical-FoV length; 0 disables
    max_angular_rate: float = 0.5    # rad/s orientation slew cap

    def __post_init__(self):
        if self.speed <= 0 or self.z_target <= 0:
            raise ValueError("speed and z_target must be positive")
        if self.rotation_frequency < 0:
            raise ValueError("rotation frequency must be >= 0")


@dataclass
class ControlCommand:
    velocity: np.ndarray         # (3,) camera-frame, m/s
    lost: bool
    tracked_point: np.ndarray | None = None   # world point being followed
    pixel: np.ndarray | None = None


def _tangents(points: np.ndarray) -> np.ndarray:
    """Central-difference tangents of the ordered centerline."""
    t = np.gradient(points, axis=0)
    n = np.linalg.norm(t, axis=1, keepdims=True)
    n[n < 1e-12] = 1.0
    return t / n


def compute_velocity(model: TreeModel, intr: CameraIntrinsics, pose: Pose,
                     params: ControllerParams) -> ControlCommand:
    primary = model.primary
    if primary is None or len(primary.points) < 2:
        return ControlCommand(np.zeros(3), lost=True)
    pix, z = project_many(intr, pose, primary.points)
    inside = (z > 0) & (pix[:, 0] >= 0) & (pix[:, 0] < intr.width) \
        & (pix[:, 1] >= 0) & (pix[:, 1] < intr.height)
    if not inside.any():
        return ControlCommand(np.zeros(3), lost=True)

    candidates = np.nonzero(inside)[0]
    best = candidates[np.argmin(np.abs(pix[candidates, 1] - intr.height / 2))]
    u = pix[best, 0]
    point = primary.points[best]
    depth = z[best]

    grad_world = _tangents(primary.points)[best]
    if grad_world[2] < 0:  # scan proceeds upward in the world
        grad_world = -grad_world
    grad_cam = pose.rotation @ grad_world

    v = grad_cam + np.array([
        params.k_u * (u - intr.width / 2),
        0.0,
        params.k_z * (depth - params.z_target),
    ])
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        return ControlCommand(np.zeros(3), lost=True)
    v = v / norm * params.speed
    return ControlCommand(v, lost=False, tracked_point=point,
                          pixel=pix[best].copy())


@dataclass
class RotationState:
    phase: int = 0               # index into the center/+/-/center cycle
    accumulated: float = 0.0     # world-z travel since the last switch

    _CYCLE = (0.0, 1.0, 0.0, -1.0)

    def current_offset(self, params: ControllerParams) -> float:
        return self._CYCLE[self.phase % 4] * params.lookat_angle


def rotation_target(state: RotationState, params: ControllerParams,
                    intr: CameraIntrinsics, moved_dz: float
                    ) -> tuple[float, RotationState]:
    """Accumulate vertical travel and advance the orientation cycle; returns
    the desired yaw offset (radians) about the tracked point."""
    if params.rotation_frequency <= 0:
        return 0.0, state
    interval = intr.fov_length(params.z_target) / params.rotation_frequency
    acc = state.accumulated + abs(moved_dz)
    phase = state.phase
    while acc >= interval:
        acc -= interval
        phase += 1
    new = RotationState(phase, acc)
    return new.current_offset(params), new


def switch_interval(params: ControllerParams, intr: CameraIntrinsics) -> float:
    """World-z distance between orientation switches."""
    if params.rotation_frequency <= 0:
        return float("inf")
    return intr.fov_length(params.z_target) / params.rotation_frequency
