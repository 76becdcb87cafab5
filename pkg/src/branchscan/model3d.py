"""Evolving 3D tree model: consistency state machine, point merging,
RANSAC curve fitting, radius lifting, and secondary branch attachment."""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    CameraIntrinsics,
    CubicBezier,
    DegenerateFitError,
    InsufficientDataError,
    Pose,
    bezier_fit_lsq,
    chord_length_params,
    curve_point_distances,
    nearest_curve_params,
    project_many,
)
from .skeleton2d import Detection2D


@dataclass
class ModelConfig:
    consistency_threshold: float = 0.6   # fraction of projected points that must agree
    proj_tol_px: float = 4.0             # 2D curve agreement tolerance
    ransac_threshold: float = 0.03       # meters
    ransac_iterations: int = 100
    min_inlier_fraction: float = 0.6     # below this the frame is demoted
    sample_spacing_px: float = 30.0
    attach_threshold: float = 0.03       # ray-to-centerline distance, meters
    dedup_distance: float = 0.02         # secondary attachment merge radius
    dedup_angle_deg: float = 30.0
    lift_gate: float = 0.01              # lateral gate for new primary points


def estimate_radius(z: float, r_px: float, f: float) -> float:
    """3D radius from depth, pixel radius and focal length: z * r_px / f."""
    if z <= 0:
        raise ValueError("depth must be positive")
    if f <= 0:
        raise ValueError("focal length must be positive")
    return z * r_px / f


# ---------------------------------------------------------------------------
# RANSAC cubic fit
# ---------------------------------------------------------------------------


def ransac_fit_bezier(points: np.ndarray, threshold: float = 0.03,
                      iterations: int = 100, rng: np.random.Generator | None = None):
    """Robust cubic Bezier fit: minimal 4-point hypotheses, inlier count,
    final least-squares refit on the best inlier set.

    Points must be roughly ordered along the branch (chord-length
    parameterization is taken from that ordering). Returns (curve, inlier
    mask).
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n < 4:
        raise InsufficientDataError("RANSAC needs at least 4 points")
    rng = rng or np.random.default_rng()

    if n == 4:
        curve = bezier_fit_lsq(pts)
        return curve, np.ones(4, dtype=bool)

    best_count = -1
    best_mask = None
    for _ in range(iterations):
        idx = np.sort(rng.choice(n, size=4, replace=False))
        sample = pts[idx]
        try:
            curve = bezier_fit_lsq(sample)
        except DegenerateFitError:
            continue
        d = curve_point_distances(curve, pts, n_dense=128)
        mask = d <= threshold
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
    if best_mask is None or best_count < 4:
        raise DegenerateFitError("RANSAC found no 4-inlier hypothesis")

    curve = bezier_fit_lsq(pts[best_mask])
    d = curve_point_distances(curve, pts, n_dense=128)
    mask = d <= threshold
    if mask.sum() < 4:
        mask = best_mask
    return curve, mask


# ---------------------------------------------------------------------------
# Model containers
# ---------------------------------------------------------------------------


@dataclass
class BranchModel:
    kind: str                        # "primary" | "secondary"
    points: np.ndarray               # (N, 3) ordered centerline, meters
    radii: np.ndarray                # (N,) meters
    curve: CubicBezier | None = None  # fit of the current visible portion

    def copy(self) -> "BranchModel":
        return BranchModel(self.kind, self.points.copy(), self.radii.copy(),
                           self.curve)


@dataclass
class SecondaryBranch:
    branch: BranchModel
    attachment_point: np.ndarray     # (3,) on the primary centerline
    attachment_t: float              # normalized arc position on the primary

    def copy(self) -> "SecondaryBranch":
        return SecondaryBranch(self.branch.copy(), self.attachment_point.copy(),
                               self.attachment_t)


@dataclass
class TreeModel:
    primary: BranchModel | None = None
    secondaries: list[SecondaryBranch] = field(default_factory=list)

    def snapshot(self) -> "TreeModel":
        return TreeModel(
            self.primary.copy() if self.primary else None,
            [s.copy() for s in self.secondaries],
        )


class Verdict(enum.Enum):
    CONSISTENT = "consistent"
    INCONSISTENT = "inconsistent"
    RESTART = "restart"


@dataclass
class UpdateOutcome:
    verdict: Verdict
    fraction: float = 0.0            # consistency-check fraction
    inlier_fraction: float = 1.0     # RANSAC inlier fraction
    points_added: int = 0
    points_removed: int = 0
    reason: str = ""


@dataclass
class ConsistencyTracker:
    misses: int = 0
    recent_poses: deque = field(default_factory=lambda: deque(maxlen=3))

    def record(self, pose: Pose):
        self.recent_poses.append(pose)


def advance_state(misses: int, frame_consistent: bool) -> tuple[int, Verdict]:
    """Pure consistency state machine: 3rd miss in a row triggers Restart."""
    if frame_consistent:
        return 0, Verdict.CONSISTENT
    misses += 1
    if misses >= 3:
        return 0, Verdict.RESTART
    return misses, Verdict.INCONSISTENT


# ---------------------------------------------------------------------------
# Consistency check and model update
# ---------------------------------------------------------------------------


def check_consistency(model: TreeModel, det: Detection2D, intr: CameraIntrinsics,
                      pose: Pose, mask: np.ndarray,
                      cfg: ModelConfig = ModelConfig()) -> tuple[float, bool]:
    """Fraction of in-image projected primary points that land in the
    foreground and within the pixel tolerance of the detected 2D curve."""
    primary = model.primary
    if primary is None or len(primary.points) == 0:
        return 0.0, False
    pix, z = project_many(intr, pose, primary.points)
    h, w = mask.shape
    inside = (z > 0) & (pix[:, 0] >= 0) & (pix[:, 0] < w) \
        & (pix[:, 1] >= 0) & (pix[:, 1] < h)
    if not inside.any():
        return 0.0, False
    pix_in = pix[inside]
    xi = np.rint(pix_in[:, 0]).astype(int).clip(0, w - 1)
    yi = np.rint(pix_in[:, 1]).astype(int).clip(0, h - 1)
    in_fg = mask[yi, xi]
    near = curve_point_distances(det.curve, pix_in) <= cfg.proj_tol_px
    fraction = float((in_fg & near).mean())
    return fraction, fraction >= cfg.consistency_threshold


def _extended_curve_distances(curve: CubicBezier, points: np.ndarray,
                              extension: float = 0.06) -> np.ndarray:
    """Distance to the curve's dense polyline extended tangentially past
    both endpoints, so points in freshly scanned territory measure their
    lateral error rather than the gap to the nearest endpoint."""
    dense = curve.sample(256)
    ext = []
    for t_end, sign in ((0.0, -1.0), (1.0, 1.0)):
        tan = curve.tangent(t_end)
        n = np.linalg.norm(tan)
        if n < 1e-12:
            continue
        steps = np.linspace(0.0, extension, 32)[1:, None]
        ext.append(curve.point(t_end) + sign * steps * (tan / n))
    poly = np.vstack([dense] + ext) if ext else dense
    from scipy.spatial import cKDTree
    return cKDTree(poly).query(np.asarray(points, dtype=np.float64))[0]


def _cluster_along_curve(curve: CubicBezier, points: np.ndarray,
                         radii: np.ndarray, spacing: float):
    """Average points into clusters spaced along the fitted curve."""
    ts = nearest_curve_params(curve, points)
    dense_t = np.linspace(0.0, 1.0, 256)
    dense = curve.point(dense_t)
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(dense, axis=0), axis=1))])
    s = np.interp(ts, dense_t, arc)
    order = np.argsort(s)
    out_p, out_r = [], []
    start = None
    members = []
    for i in order:
        if start is None or s[i] - start >= spacing:
            if members:
                out_p.append(points[members].mean(axis=0))
                out_r.append(np.median(radii[members]))
            start = s[i]
            members = [i]
        else:
            members.append(i)
    if members:
        out_p.append(points[members].mean(axis=0))
        out_r.append(np.median(radii[members]))
    return np.array(out_p), np.array(out_r)


def _split_by_visibility(branch: BranchModel, intr: CameraIntrinsics, pose: Pose,
                         det_curve: CubicBezier, tol_px: float):
    """(kept in-image, kept out-of-image, n dropped) per the 4 px rule."""
    pix, z = project_many(intr, pose, branch.points)
    inside = (z > 0) & (pix[:, 0] >= 0) & (pix[:, 0] < intr.width) \
        & (pix[:, 1] >= 0) & (pix[:, 1] < intr.height)
    near = np.zeros(len(branch.points), dtype=bool)
    if inside.any():
        near[inside] = curve_point_distances(det_curve, pix[inside]) <= tol_px
    keep_in = inside & near
    dropped = int((inside & ~near).sum())
    return keep_in, ~inside, dropped


def _refit_branch(kind, fit_points, fit_radii, frozen_points, frozen_radii,
                  spacing, rng, cfg) -> tuple[BranchModel | None, float]:
    """RANSAC fit + clustering of the visible point set; frozen points are
    kept as-is. Returns (branch, inlier fraction) or (None, frac) on failure."""
    order = np.argsort(fit_points[:, 2])  # branch runs along world +z
    fit_points = fit_points[order]
    fit_radii = fit_radii[order]
    try:
        curve, inliers = ransac_fit_bezier(
            fit_points, cfg.ransac_threshold, cfg.ransac_iterations, rng)
    except (InsufficientDataError, DegenerateFitError):
        return None, 0.0
    frac = float(inliers.mean())
    if frac < cfg.min_inlier_fraction:
        return None, frac
    pts, radii = _cluster_along_curve(curve, fit_points[inliers],
                                      fit_radii[inliers], spacing)
    all_pts = np.vstack([frozen_points, pts]) if len(frozen_points) else pts
    all_r = np.concatenate([frozen_radii, radii]) if len(frozen_points) else radii
    z_order = np.argsort(all_pts[:, 2])
    return BranchModel(kind, all_pts[z_order], all_r[z_order], curve), frac


def _projects_into_any(points: np.ndarray, intr: CameraIntrinsics,
                       poses) -> np.ndarray:
    hit = np.zeros(len(points), dtype=bool)
    for pose in poses:
        pix, z = project_many(intr, pose, points)
        hit |= (z > 0) & (pix[:, 0] >= 0) & (pix[:, 0] < intr.width) \
            & (pix[:, 1] >= 0) & (pix[:, 1] < intr.height)
    return hit


def update_model(tree: TreeModel, det: Detection2D | None,
                 lifted_points: np.ndarray, lifted_radii: np.ndarray,
                 tracker: ConsistencyTracker, mask: np.ndarray,
                 intr: CameraIntrinsics, pose: Pose,
                 rng: np.random.Generator,
                 cfg: ModelConfig = ModelConfig()) -> tuple[TreeModel, UpdateOutcome]:
    """One model iteration of the primary branch. Returns a new TreeModel
    snapshot plus the outcome of the consistency state machine."""
    tracker.record(pose)
    lifted_points = np.asarray(lifted_points, dtype=np.float64).reshape(-1, 3)
    lifted_radii = np.asarray(lifted_radii, dtype=np.float64)
    mean_depth = float(np.median(pose.transform(lifted_points)[:, 2])) \
        if len(lifted_points) else 0.2
    spacing = cfg.sample_spacing_px * mean_depth / intr.fx * 0.5

    # Initialization: no primary model yet.
    if tree.primary is None or len(tree.primary.points) == 0:
        if det is None or len(lifted_points) < 4:
            return tree.snapshot(), UpdateOutcome(
                Verdict.INCONSISTENT, reason="no-model")
        branch, frac = _refit_branch("primary", lifted_points, lifted_radii,
                                     np.empty((0, 3)), np.empty(0),
                                     spacing, rng, cfg)
        if branch is None:
            return tree.snapshot(), UpdateOutcome(
                Verdict.INCONSISTENT, inlier_fraction=frac, reason="init-fit-failed")
        new = tree.snapshot()
        new.primary = branch
        return new, UpdateOutcome(Verdict.CONSISTENT, fraction=1.0,
                                  inlier_fraction=frac,
                                  points_added=len(branch.points),
                                  reason="initialized")

    # Consistency gate.
    reason = ""
    candidate = None
    fraction = 0.0
    inlier_frac = 1.0
    if det is None:
        reason = "no-detection"
        frame_ok = False
    else:
        fraction, frame_ok = check_consistency(tree, det, intr, pose, mask, cfg)
        if not frame_ok:
            reason = "overlap"

    if frame_ok:
        # Gate new points laterally against the current fit (extended past
        # its ends so upward growth is not rejected); rays through pixels
        # where another branch crosses in front lift well off the centerline.
        if tree.primary.curve is not None and len(lifted_points):
            d = _extended_curve_distances(tree.primary.curve, lifted_points)
            ok = d <= cfg.lift_gate
            lifted_points, lifted_radii = lifted_points[ok], lifted_radii[ok]
        keep_in, keep_out, dropped = _split_by_visibility(
            tree.primary, intr, pose, det.curve, cfg.proj_tol_px)
        fit_pts = np.vstack([tree.primary.points[keep_in], lifted_points])
        fit_r = np.concatenate([tree.primary.radii[keep_in], lifted_radii])
        if len(fit_pts) >= 4:
            candidate, inlier_frac = _refit_branch(
                "primary", fit_pts, fit_r,
                tree.primary.points[keep_out], tree.primary.radii[keep_out],
                spacing, rng, cfg)
        if candidate is None:
            frame_ok = False
            reason = "ransac-inliers"

    misses, verdict = advance_state(tracker.misses, frame_ok)
    tracker.misses = misses
    new = tree.snapshot()

    if verdict is Verdict.CONSISTENT:
        removed = len(tree.primary.points) - int(
            _split_by_visibility(tree.primary, intr, pose, det.curve,
                                 cfg.proj_tol_px)[0].sum())
        new.primary = candidate
        return new, UpdateOutcome(Verdict.CONSISTENT, fraction, inlier_frac,
                                  points_added=len(lifted_points),
                                  points_removed=0)

    if verdict is Verdict.RESTART:
        visible = _projects_into_any(tree.primary.points, intr,
                                     tracker.recent_poses)
        survivors = tree.primary.points[~visible]
        surv_r = tree.primary.radii[~visible]
        removed = int(visible.sum())
        if len(lifted_points) >= 4:
            branch, frac = _refit_branch("primary", lifted_points, lifted_radii,
                                         survivors, surv_r, spacing, rng, cfg)
        else:
            branch, frac = None, 0.0
        if branch is None:
            branch = BranchModel("primary", survivors, surv_r, None)
        new.primary = branch
        return new, UpdateOutcome(Verdict.RESTART, fraction, frac,
                                  points_added=len(lifted_points),
                                  points_removed=removed, reason=reason)

    return new, UpdateOutcome(Verdict.INCONSISTENT, fraction, inlier_frac,
                              reason=reason)


# ---------------------------------------------------------------------------
# Secondary branches
# ---------------------------------------------------------------------------


def _densify_polyline(points: np.ndarray, step: float) -> np.ndarray:
    if len(points) < 2:
        return points
    pieces = [points[:1]]
    for a, b in zip(points[:-1], points[1:]):
        d = np.linalg.norm(b - a)
        n = max(int(d / step), 1)
        ts = np.linspace(0.0, 1.0, n + 1)[1:]
        pieces.append(a[None, :] + ts[:, None] * (b - a)[None, :])
    return np.vstack(pieces)


def ray_to_polyline_distance(origin: np.ndarray, direction: np.ndarray,
                             polyline: np.ndarray):
    """(min distance, index of closest polyline point) for a forward ray."""
    rel = polyline - origin
    s = np.clip(rel @ direction, 0.0, None)
    perp = rel - s[:, None] * direction[None, :]
    d = np.linalg.norm(perp, axis=1)
    i = int(d.argmin())
    return float(d[i]), i


def _branch_direction(points: np.ndarray) -> np.ndarray | None:
    if len(points) < 2:
        return None
    v = points[-1] - points[0]
    n = np.linalg.norm(v)
    return v / n if n > 1e-9 else None


@dataclass
class AttachResult:
    status: str                      # "attached" | "updated" | "rejected"
    reason: str = ""
    ray_distance: float = float("nan")
    index: int = -1                  # secondary index in the tree


def attach_secondary(tree: TreeModel, det: Detection2D,
                     lifted_points: np.ndarray, lifted_radii: np.ndarray,
                     intr: CameraIntrinsics, pose: Pose,
                     rng: np.random.Generator,
                     cfg: ModelConfig = ModelConfig()) -> tuple[TreeModel, AttachResult]:
    """Connectivity check (camera ray through the 2D curve start must pass
    within the attach threshold of the primary centerline), then create or
    update a secondary branch model."""
    if tree.primary is None or len(tree.primary.points) < 2:
        return tree.snapshot(), AttachResult("rejected", "no-primary")
    lifted_points = np.asarray(lifted_points, dtype=np.float64).reshape(-1, 3)
    lifted_radii = np.asarray(lifted_radii, dtype=np.float64)

    origin = pose.camera_center()
    direction = pose.rotation.T @ intr.pixel_ray(det.samples[0])
    centerline = _densify_polyline(tree.primary.points, 0.002)
    dist, idx = ray_to_polyline_distance(origin, direction, centerline)
    if dist > cfg.attach_threshold:
        return tree.snapshot(), AttachResult("rejected", "not-connected", dist)
    attach_point = centerline[idx]
    seg = np.linalg.norm(np.diff(centerline, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    attach_t = float(arc[idx] / arc[-1]) if arc[-1] > 0 else 0.0

    if len(lifted_points) == 0:
        return tree.snapshot(), AttachResult("rejected", "no-points", dist)

    mean_depth = float(np.median(pose.transform(lifted_points)[:, 2]))
    spacing = cfg.sample_spacing_px * mean_depth / intr.fx * 0.5
    new_dir = _branch_direction(lifted_points)

    new = tree.snapshot()
    # De-duplicate against existing secondaries.
    for i, sec in enumerate(new.secondaries):
        if np.linalg.norm(sec.attachment_point - attach_point) > cfg.dedup_distance:
            continue
        old_dir = _branch_direction(sec.branch.points)
        if new_dir is not None and old_dir is not None:
            cosang = np.clip(abs(np.dot(new_dir, old_dir)), -1.0, 1.0)
            if np.degrees(np.arccos(cosang)) >= cfg.dedup_angle_deg:
                continue
        merged = _merge_secondary(sec.branch, det, lifted_points, lifted_radii,
                                  intr, pose, spacing, rng, cfg)
        new.secondaries[i] = SecondaryBranch(merged, attach_point, attach_t)
        return new, AttachResult("updated", ray_distance=dist, index=i)

    branch = _fit_secondary(lifted_points, lifted_radii, spacing, rng, cfg)
    new.secondaries.append(SecondaryBranch(branch, attach_point, attach_t))
    return new, AttachResult("attached", ray_distance=dist,
                             index=len(new.secondaries) - 1)


def _order_from_attachment(points: np.ndarray, radii: np.ndarray):
    """Order by distance from the first point (points arrive attachment-first)."""
    d = np.linalg.norm(points - points[0], axis=1)
    order = np.argsort(d)
    return points[order], radii[order]


def _fit_secondary(points, radii, spacing, rng, cfg) -> BranchModel:
    points, radii = _order_from_attachment(points, radii)
    if len(points) >= 4:
        try:
            curve, inliers = ransac_fit_bezier(points, cfg.ransac_threshold,
                                               cfg.ransac_iterations, rng)
            pts, r = _cluster_along_curve(curve, points[inliers],
                                          radii[inliers], spacing)
            return BranchModel("secondary", pts, r, curve)
        except (InsufficientDataError, DegenerateFitError):
            pass
    return BranchModel("secondary", points, radii, None)


def _merge_secondary(branch: BranchModel, det, lifted_points, lifted_radii,
                     intr, pose, spacing, rng, cfg) -> BranchModel:
    keep_in, keep_out, _ = _split_by_visibility(branch, intr, pose, det.curve,
                                                cfg.proj_tol_px)
    keep = keep_in | keep_out
    pts = np.vstack([branch.points[keep], lifted_points])
    r = np.concatenate([branch.radii[keep], lifted_radii])
    return _fit_secondary(pts, r, spacing, rng, cfg)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

SCHEMA_VERSION = 1


def _branch_to_dict(b: BranchModel) -> dict:
    return {
        "kind": b.kind,
        "points": b.points.tolist(),
        "radii": b.radii.tolist(),
        "control_points": None if b.curve is None
        else b.curve.control_points.tolist(),
    }


def _branch_from_dict(d: dict) -> BranchModel:
    curve = None
    if d.get("control_points") is not None:
        curve = CubicBezier(np.array(d["control_points"]))
    return BranchModel(d["kind"], np.array(d["points"], dtype=np.float64).reshape(-1, 3),
                       np.array(d["radii"], dtype=np.float64), curve)


def tree_to_dict(tree: TreeModel) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "primary": None if tree.primary is None else _branch_to_dict(tree.primary),
        "secondaries": [
            {
                **_branch_to_dict(s.branch),
                "attachment_point": s.attachment_point.tolist(),
                "attachment_t": s.attachment_t,
            }
            for s in tree.secondaries
        ],
    }


def tree_from_dict(d: dict) -> TreeModel:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported model schema: {d.get('schema_version')}")
    primary = None if d["primary"] is None else _branch_from_dict(d["primary"])
    secondaries = [
        SecondaryBranch(_branch_from_dict(s),
                        np.array(s["attachment_point"], dtype=np.float64),
                        float(s["attachment_t"]))
        for s in d["secondaries"]
    ]
    return TreeModel(primary, secondaries)
