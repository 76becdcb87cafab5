"""Desk-scale simulation: randomized ground-truth trees, tube-mask
rendering with a corruption model, a synthetic pixel tracker, and the
closed-loop scan driver with a free-flying camera."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, asdict

import cv2
import numpy as np

from .controller import (
    ControlCommand,
    ControllerParams,
    RotationState,
    compute_velocity,
    rotation_target,
)
from .geometry import CameraIntrinsics, CubicBezier, Pose, project_many
from .model3d import (
    ConsistencyTracker,
    ModelConfig,
    TreeModel,
    attach_secondary,
    estimate_radius,
    tree_to_dict,
    update_model,
)
from .skeleton2d import extract_curves
from .triangulate import PixelTrack, TrackerConfig, filter_point, triangulate


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------


@dataclass
class SideBranchSpec:
    attachment_z: float
    yaw: float                   # radians about world Z, 0 = +X
    elevation: float             # radians above horizontal
    length: float                # meters
    radius: float                # meters
    jitter1: tuple[float, float, float] = (0.0, 0.0, 0.0)
    jitter2: tuple[float, float, float] = (0.0, 0.0, 0.0)
    axis_aligned: bool = False   # planted to point along the camera axis

    def direction(self) -> np.ndarray:
        ce = math.cos(self.elevation)
        return np.array([ce * math.cos(self.yaw), ce * math.sin(self.yaw),
                         math.sin(self.elevation)])

    def curve(self, primary: CubicBezier) -> CubicBezier:
        p0 = primary.point(self.attachment_z)  # primary has z(t) = t
        d = self.direction() * self.length
        j1, j2 = np.array(self.jitter1), np.array(self.jitter2)
        return CubicBezier(np.array([
            p0, p0 + d / 3 + j1, p0 + 2 * d / 3 + j2, p0 + d,
        ]))


@dataclass
class ClutterSpec:
    control_points: list         # (4, 3) nested lists
    radius: float

    def curve(self) -> CubicBezier:
        return CubicBezier(np.array(self.control_points))


@dataclass
class SceneSpec:
    seed: int
    primary_control_points: list   # (4, 3); z components are 0, 1/3, 2/3, 1
    primary_radius: float
    branches: list[SideBranchSpec] = field(default_factory=list)
    clutter: list[ClutterSpec] = field(default_factory=list)

    def primary_curve(self) -> CubicBezier:
        return CubicBezier(np.array(self.primary_control_points))

    def branch_curves(self) -> list[CubicBezier]:
        prim = self.primary_curve()
        return [b.curve(prim) for b in self.branches]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "primary_control_points": self.primary_control_points,
            "primary_radius": self.primary_radius,
            "branches": [asdict(b) for b in self.branches],
            "clutter": [asdict(c) for c in self.clutter],
        }

    @staticmethod
    def from_dict(d: dict) -> "SceneSpec":
        return SceneSpec(
            seed=int(d["seed"]),
            primary_control_points=d["primary_control_points"],
            primary_radius=float(d["primary_radius"]),
            branches=[SideBranchSpec(**{**b, "jitter1": tuple(b["jitter1"]),
                                        "jitter2": tuple(b["jitter2"])})
                      for b in d["branches"]],
            clutter=[ClutterSpec(**c) for c in d["clutter"]],
        )


@dataclass
class SceneGenParams:
    n_branches_min: int = 4
    n_branches_max: int = 8
    attach_range: tuple[float, float] = (0.325, 0.75)
    elevation_range: tuple[float, float] = (math.radians(-15), math.radians(45))
    length_range: tuple[float, float] = (0.10, 0.16)
    radius_range: tuple[float, float] = (0.003, 0.006)
    primary_radius_range: tuple[float, float] = (0.006, 0.010)
    primary_jitter: float = 0.05
    branch_jitter: float = 0.02
    axis_aligned_branches: int = 0   # planted branches pointing at the camera
    clutter_count: int = 0
    clutter_offset: float = 1.2      # meters behind the primary (+X)


def generate_scene(seed: int, params: SceneGenParams = SceneGenParams()) -> SceneSpec:
    """Deterministic randomized scene: primary spanning z in [0, 1] plus
    side branches with random yaw and bounded elevation."""
    rng = np.random.default_rng(seed)
    j = params.primary_jitter
    cps = []
    for zc in (0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0):
        x, y = rng.uniform(-j, j, size=2)
        cps.append([float(x), float(y), zc])

    n = int(rng.integers(params.n_branches_min, params.n_branches_max + 1))
    branches = []
    for _ in range(n):
        branches.append(SideBranchSpec(
            attachment_z=float(rng.uniform(*params.attach_range)),
            yaw=float(rng.uniform(0.0, 2 * math.pi)),
            elevation=float(rng.uniform(*params.elevation_range)),
            length=float(rng.uniform(*params.length_range)),
            radius=float(rng.uniform(*params.radius_range)),
            jitter1=tuple(rng.uniform(-params.branch_jitter,
                                      params.branch_jitter, 3).tolist()),
            jitter2=tuple(rng.uniform(-params.branch_jitter,
                                      params.branch_jitter, 3).tolist()),
        ))
    for _ in range(params.axis_aligned_branches):
        # camera looks along +X, so yaw = pi points straight at it
        branches.append(SideBranchSpec(
            attachment_z=float(rng.uniform(*params.attach_range)),
            yaw=math.pi,
            elevation=0.0,
            length=float(rng.uniform(*params.length_range)),
            radius=float(rng.uniform(*params.radius_range)),
            axis_aligned=True,
        ))

    clutter = []
    for _ in range(params.clutter_count):
        x0 = cps[0][0] + params.clutter_offset
        y0 = float(rng.uniform(-0.2, 0.2))
        pts = [[x0, y0, 0.0], [x0, y0, 1 / 3], [x0, y0, 2 / 3], [x0, y0, 1.0]]
        clutter.append(ClutterSpec(pts, 0.012))

    return SceneSpec(
        seed=seed,
        primary_control_points=cps,
        primary_radius=float(rng.uniform(*params.primary_radius_range)),
        branches=branches,
        clutter=clutter,
    )


# ---------------------------------------------------------------------------
# Rendering and synthetic tracking
# ---------------------------------------------------------------------------


@dataclass
class MaskCorruption:
    dropout: float = 0.0         # per-pixel foreground dropout probability
    morph_radius: int = 0        # dilation/erosion structuring radius
    morph_random_sign: bool = True  # pick dilate vs erode per frame
    clutter: bool = False        # render background clutter as foreground

    def __post_init__(self):
        if self.dropout < 0 or self.morph_radius < 0:
            raise ValueError("corruption parameters must be >= 0")


def default_intrinsics() -> CameraIntrinsics:
    # fy chosen so the vertical FoV length at 0.20 m standoff is 0.218 m
    return CameraIntrinsics(fx=220.2, fy=220.2, cx=160.0, cy=120.0,
                            width=320, height=240)


_POLYLINE_STEP = 0.002


def scene_polylines(scene: SceneSpec, include_clutter: bool = False):
    """[(kind, points (N,3), radius)] densely sampled centerlines."""
    out = [("primary", scene.primary_curve().sample(512), scene.primary_radius)]
    for spec, curve in zip(scene.branches, scene.branch_curves()):
        n = max(int(spec.length / _POLYLINE_STEP), 8)
        out.append(("secondary", curve.sample(n), spec.radius))
    if include_clutter:
        for c in scene.clutter:
            out.append(("clutter", c.curve().sample(512), c.radius))
    return out


def render_mask(scene: SceneSpec, intr: CameraIntrinsics, pose: Pose,
                corruption: MaskCorruption = MaskCorruption(),
                rng: np.random.Generator | None = None) -> np.ndarray:
    """Rasterize each branch as a projected tube of per-sample disks, then
    apply the corruption model (clutter, morphology, dropout)."""
    rng = rng or np.random.default_rng(0)
    img = np.zeros((intr.height, intr.width), dtype=np.uint8)
    shift = 4
    scale = 1 << shift
    for kind, pts, radius in scene_polylines(scene, corruption.clutter):
        pix, z = project_many(intr, pose, pts)
        ok = z > 0.01
        r_px = np.zeros(len(z))
        r_px[ok] = radius * intr.fx / z[ok]
        margin = r_px + 2
        ok &= (pix[:, 0] > -margin) & (pix[:, 0] < intr.width + margin) \
            & (pix[:, 1] > -margin) & (pix[:, 1] < intr.height + margin)
        for (u, v), r in zip(pix[ok], r_px[ok]):
            # cv2.circle paints ~0.5 px beyond the nominal radius; shrink so
            # the rendered width matches the projected tube width
            r_draw = max(r - 0.5, 0.5)
            cv2.circle(img, (int(round(u * scale)), int(round(v * scale))),
                       int(round(r_draw * scale)), 255, -1,
                       lineType=cv2.LINE_8, shift=shift)
    if corruption.morph_radius > 0:
        k = 2 * corruption.morph_radius + 1
        kernel = cv2.getStructuringElement(cv2.MORPH_ELLIPSE, (k, k))
        dilate = True
        if corruption.morph_random_sign:
            dilate = bool(rng.integers(0, 2))
        img = cv2.dilate(img, kernel) if dilate else cv2.erode(img, kernel)
    mask = img > 0
    if corruption.dropout > 0:
        mask &= rng.random(mask.shape) >= corruption.dropout
    return mask


def ray_hit(scene: SceneSpec, pixel, intr: CameraIntrinsics, pose: Pose,
            include_clutter: bool = False, pixel_tol: float = 3.0,
            far_depth: float = 2.0) -> np.ndarray:
    """Ground-truth 3D centerline point seen through a pixel; falls back to
    a far-plane point when the ray hits nothing (background query)."""
    origin = pose.camera_center()
    direction = pose.rotation.T @ intr.pixel_ray(pixel)
    best = None  # (depth along ray, point)
    for kind, pts, radius in scene_polylines(scene, include_clutter):
        rel = pts - origin
        s = rel @ direction
        front = s > 0.01
        if not front.any():
            continue
        perp = np.linalg.norm(rel - s[:, None] * direction[None, :], axis=1)
        tol = radius + pixel_tol * s / intr.fx
        hit = front & (perp <= tol)
        if hit.any():
            i = np.nonzero(hit)[0][np.argmin(s[hit])]
            if best is None or s[i] < best[0]:
                best = (s[i], pts[i])
    if best is None:
        return origin + direction * far_depth
    return best[1]


def synth_track(scene: SceneSpec, pixels: np.ndarray, poses: list[Pose],
                intr: CameraIntrinsics, sigma: float = 0.0,
                rng: np.random.Generator | None = None,
                include_clutter: bool = False) -> list[PixelTrack]:
    """Stand-in point tracker: each query pixel of the newest frame gets the
    ground-truth point it sees reprojected into every prior pose, plus
    i.i.d. Gaussian pixel noise on the prior observations."""
    rng = rng or np.random.default_rng(0)
    newest = poses[-1]
    tracks = []
    for j, px in enumerate(np.atleast_2d(pixels)):
        if not intr.contains(px):
            continue
        gt = ray_hit(scene, px, intr, newest, include_clutter)
        obs = []
        ok = True
        for pose in poses:
            pix, z = project_many(intr, pose, gt[None, :])
            if z[0] <= 0 or not np.isfinite(pix[0]).all():
                ok = False
                break
            obs.append(pix[0])
        if not ok:
            continue
        # All observations are projections of the ground-truth point so the
        # track is self-consistent; noise goes on the prior frames only
        # (the query frame anchors the track).
        obs = np.array(obs)
        if sigma > 0:
            obs[:-1] += rng.normal(0.0, sigma, size=obs[:-1].shape)
        tracks.append(PixelTrack(j, obs, list(poses)))
    return tracks


# ---------------------------------------------------------------------------
# Camera integration
# ---------------------------------------------------------------------------


@dataclass
class CameraState:
    position: np.ndarray         # (3,) world
    rotation_cw: np.ndarray      # (3, 3) camera-to-world

    def pose(self) -> Pose:
        R = self.rotation_cw.T
        return Pose(R, -R @ self.position)


def _slew_rotation(R_cur: np.ndarray, R_des: np.ndarray, max_angle: float):
    """Rotate R_cur toward R_des by at most max_angle radians."""
    R_rel = R_des @ R_cur.T
    # rotation vector of the relative rotation
    cos_a = np.clip((np.trace(R_rel) - 1.0) / 2.0, -1.0, 1.0)
    angle = math.acos(cos_a)
    if angle < 1e-9 or angle <= max_angle:
        return R_des
    axis = np.array([
        R_rel[2, 1] - R_rel[1, 2],
        R_rel[0, 2] - R_rel[2, 0],
        R_rel[1, 0] - R_rel[0, 1],
    ])
    axis = axis / np.linalg.norm(axis)
    a = max_angle
    K = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    R_step = np.eye(3) + math.sin(a) * K + (1 - math.cos(a)) * (K @ K)
    return R_step @ R_cur


def step_camera(state: CameraState, velocity_world: np.ndarray, dt: float,
                lookat_target: np.ndarray | None = None,
                max_angular_rate: float = 0.5) -> CameraState:
    """Explicit-Euler translation plus rate-capped orientation slew toward
    the look-at target."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    pos = state.position + np.asarray(velocity_world, dtype=np.float64) * dt
    R_cw = state.rotation_cw
    if lookat_target is not None:
        desired = Pose.look_at(pos, lookat_target).rotation.T
        R_cw = _slew_rotation(R_cw, desired, max_angular_rate * dt)
    return CameraState(pos, R_cw)


# ---------------------------------------------------------------------------
# Closed-loop scan
# ---------------------------------------------------------------------------


@dataclass
class SimConfig:
    intrinsics: CameraIntrinsics = field(default_factory=default_intrinsics)
    start_z: float = 0.275
    finish_z: float = 0.75
    corruption: MaskCorruption = field(default_factory=MaskCorruption)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    iteration_travel: float = 0.010   # meters between model iterations
    dt: float = 0.01                  # control tick, seconds (100 Hz)
    max_lost_travel: float = 0.05     # commanded meters before abort
    bootstrap_travel: float = 0.06    # allowed travel before a model exists
    noise_seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.finish_z <= self.start_z:
            raise ValueError("finish_z must exceed start_z")


@dataclass
class ScanLog:
    status: str = "incomplete"        # completed | lost-branch | timeout
    failure_reason: str = ""
    frames: list = field(default_factory=list)        # per-mm pose records
    iterations: list = field(default_factory=list)    # per-iteration records
    model: TreeModel = field(default_factory=TreeModel)
    start_z: float = 0.0
    final_z: float = 0.0
    iteration_runtimes: list = field(default_factory=list)

    def frame_poses(self) -> list[Pose]:
        out = []
        for f in self.frames:
            R = np.array(f["rotation"]).reshape(3, 3)
            out.append(Pose(R, -R @ np.array(f["position"])))
        return out

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "failure_reason": self.failure_reason,
            "start_z": self.start_z,
            "final_z": self.final_z,
            "frames": self.frames,
            "iterations": self.iterations,
            "model": tree_to_dict(self.model),
        }


def _lift_detection(det, scene, cfg: SimConfig, poses, intr, rng):
    """Triangulate a detection's sample pixels into filtered 3D points."""
    tracks = synth_track(scene, det.samples, poses, intr,
                         cfg.tracker.pixel_noise, rng,
                         include_clutter=cfg.corruption.clutter)
    pts, radii = [], []
    for tr in tracks:
        try:
            tp = triangulate(tr, intr)
        except ValueError:
            continue
        if filter_point(tp) is not None:
            continue
        r_px = det.radii[tr.keypoint_id]
        if tp.depth <= 0 or r_px <= 0:
            continue
        pts.append(tp.position)
        radii.append(estimate_radius(tp.depth, r_px, intr.fx))
    if not pts:
        return np.empty((0, 3)), np.empty(0)
    return np.array(pts), np.array(radii)


def run_scan(scene: SceneSpec, cfg: SimConfig = SimConfig(),
             params: ControllerParams = ControllerParams()) -> ScanLog:
    """Drive the full loop: camera integration, frame accumulation every
    tracker spacing, model iteration every `iteration_travel` of commanded
    motion, until the camera reaches the finish height."""
    import time as _time

    rng = np.random.default_rng([scene.seed & 0x7FFFFFFF, cfg.noise_seed])
    intr = cfg.intrinsics
    prim = scene.primary_curve()
    base_dir = np.array([1.0, 0.0, 0.0])  # camera looks along +X
    start_pt = prim.point(cfg.start_z)
    cam = CameraState(start_pt - base_dir * params.z_target,
                      Pose.look_at(start_pt - base_dir * params.z_target,
                                   start_pt).rotation.T)

    tree = TreeModel()
    tracker = ConsistencyTracker()
    rot_state = RotationState()
    phi_cur = 0.0

    log = ScanLog(start_z=cfg.start_z)
    pose_history: deque[Pose] = deque(maxlen=max(cfg.tracker.window * 4, 32))
    since_frame = 0.0
    since_iter = 0.0
    traveled = 0.0
    lost_travel = 0.0
    t = 0.0
    max_time = (cfg.finish_z - cfg.start_z) / params.speed * 6.0 + 10.0

    pose_history.append(cam.pose())
    log.frames.append(_frame_record(t, cam, np.zeros(3), 0.0))

    while t < max_time:
        pose = cam.pose()
        cmd = compute_velocity(tree, intr, pose, params)
        bootstrap = tree.primary is None or len(tree.primary.points) < 2

        if bootstrap:
            v_world = np.array([0.0, 0.0, params.speed])
            tracked = None
        elif cmd.lost:
            v_world = np.zeros(3)
            lost_travel += params.speed * cfg.dt
            tracked = None
            if lost_travel > cfg.max_lost_travel:
                log.status = "lost-branch"
                log.failure_reason = "branch lost for too long"
                break
        else:
            lost_travel = 0.0
            v_world = cam.rotation_cw @ cmd.velocity
            tracked = cmd.tracked_point

        old_pos = cam.position.copy()
        new_pos = cam.position + v_world * cfg.dt

        # Viewpoint rotation: orbit about the vertical axis through the
        # tracked point at a capped angular rate.
        moved_dz = abs(new_pos[2] - old_pos[2])
        phi_des, rot_state = rotation_target(rot_state, params, intr, moved_dz)
        if tracked is not None and abs(phi_des - phi_cur) > 1e-12:
            dphi = np.clip(phi_des - phi_cur,
                           -params.max_angular_rate * cfg.dt,
                           params.max_angular_rate * cfg.dt)
            phi_cur += dphi
            c, s = math.cos(dphi), math.sin(dphi)
            rel = new_pos - tracked
            rel_xy = np.array([c * rel[0] - s * rel[1],
                               s * rel[0] + c * rel[1], rel[2]])
            new_pos = tracked + rel_xy

        # Viewing direction stays horizontal (aiming at the tracked point
        # would pin it to the image center and break the depth servo);
        # the orbit yaw rotates it about the vertical axis.
        fwd = np.array([math.cos(phi_cur), math.sin(phi_cur), 0.0])
        R_des = Pose.look_at(new_pos, new_pos + fwd * params.z_target).rotation.T
        cam = CameraState(new_pos,
                          _slew_rotation(cam.rotation_cw, R_des,
                                         params.max_angular_rate * cfg.dt))

        ds = float(np.linalg.norm(cam.position - old_pos))
        traveled += ds
        since_frame += ds
        since_iter += ds
        t += cfg.dt

        if since_frame >= cfg.tracker.frame_spacing:
            since_frame = 0.0
            pose_history.append(cam.pose())
            log.frames.append(_frame_record(t, cam, v_world, phi_cur))

        if since_iter >= cfg.iteration_travel \
                and len(pose_history) >= cfg.tracker.window:
            since_iter = 0.0
            t0 = _time.perf_counter()
            tree = _model_iteration(tree, tracker, scene, cfg, params, cam,
                                    pose_history, rng, log, t)
            log.iteration_runtimes.append(_time.perf_counter() - t0)

        if bootstrap and tree.primary is None \
                and traveled > cfg.bootstrap_travel:
            log.status = "lost-branch"
            log.failure_reason = "no primary model established"
            break

        if cam.position[2] >= cfg.finish_z:
            log.status = "completed"
            break
    else:
        log.status = "timeout"
        log.failure_reason = "scan exceeded time budget"

    log.model = tree
    log.final_z = float(cam.position[2])
    return log


def _frame_record(t, cam: CameraState, v_world, yaw_offset):
    return {
        "t": round(float(t), 6),
        "position": [float(x) for x in cam.position],
        "rotation": [float(x) for x in cam.pose().rotation.ravel()],
        "velocity": [float(x) for x in v_world],
        "yaw_offset": float(yaw_offset),
    }


def _model_iteration(tree, tracker, scene, cfg, params, cam, pose_history,
                     rng, log, t) -> TreeModel:
    intr = cfg.intrinsics
    pose = cam.pose()
    mask = render_mask(scene, intr, pose, cfg.corruption, rng)
    primary_det, secondary_dets, _ = extract_curves(mask)

    M = cfg.tracker.window
    poses = list(pose_history)[-(M - 1):] + [pose]

    if primary_det is not None:
        lifted, radii = _lift_detection(primary_det, scene, cfg, poses, intr, rng)
    else:
        lifted, radii = np.empty((0, 3)), np.empty(0)

    tree, outcome = update_model(tree, primary_det, lifted, radii, tracker,
                                 mask, intr, pose, rng, cfg.model)

    attach_records = []
    if outcome.verdict.value == "consistent":
        for det in secondary_dets:
            s_pts, s_radii = _lift_detection(det, scene, cfg, poses, intr, rng)
            tree, res = attach_secondary(tree, det, s_pts, s_radii, intr,
                                         pose, rng, cfg.model)
            attach_records.append({"status": res.status, "reason": res.reason,
                                   "ray_distance": res.ray_distance})

    log.iterations.append({
        "t": round(float(t), 6),
        "camera_z": float(cam.position[2]),
        "verdict": outcome.verdict.value,
        "fraction": round(outcome.fraction, 4),
        "inlier_fraction": round(outcome.inlier_fraction, 4),
        "n_lifted": int(len(lifted)),
        "n_secondary_detections": len(secondary_dets),
        "attachments": attach_records,
    })
    return tree
