"""Ground-truth comparison: branch matching, centerline residuals, radius
RMSE, and Table-style aggregation across trials."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import CubicBezier, project_many
from .model3d import BranchModel, TreeModel
from .simulator import ScanLog, SceneSpec

MATCH_GATE = 0.05            # meters between attachment points
RESIDUAL_STEP = 0.001        # meters


def _densify(points: np.ndarray, step: float = RESIDUAL_STEP) -> np.ndarray:
    if len(points) < 2:
        return points
    pieces = [points[:1]]
    for a, b in zip(points[:-1], points[1:]):
        n = max(int(np.linalg.norm(b - a) / step), 1)
        ts = np.linspace(0.0, 1.0, n + 1)[1:]
        pieces.append(a[None, :] + ts[:, None] * (b - a)[None, :])
    return np.vstack(pieces)


@dataclass
class BranchMatch:
    model_index: int | None
    gt_index: int | None
    cost: float = float("nan")


def gt_attachment_points(scene: SceneSpec) -> np.ndarray:
    prim = scene.primary_curve()
    if not scene.branches:
        return np.empty((0, 3))
    return np.array([prim.point(b.attachment_z) for b in scene.branches])


def match_branches(model: TreeModel, gt: SceneSpec,
                   gate: float = MATCH_GATE) -> list[BranchMatch]:
    """Greedy minimum-cost injective assignment on attachment distance."""
    gt_pts = gt_attachment_points(gt)
    model_pts = np.array([s.attachment_point for s in model.secondaries]) \
        if model.secondaries else np.empty((0, 3))
    pairs = []
    for i in range(len(model_pts)):
        for j in range(len(gt_pts)):
            c = float(np.linalg.norm(model_pts[i] - gt_pts[j]))
            if c <= gate:
                pairs.append((c, i, j))
    pairs.sort()
    used_m, used_g = set(), set()
    matches = []
    for c, i, j in pairs:
        if i in used_m or j in used_g:
            continue
        used_m.add(i)
        used_g.add(j)
        matches.append(BranchMatch(i, j, c))
    for i in range(len(model_pts)):
        if i not in used_m:
            matches.append(BranchMatch(i, None))
    for j in range(len(gt_pts)):
        if j not in used_g:
            matches.append(BranchMatch(None, j))
    return matches


def frustum_visible_gt(scene: SceneSpec, log: ScanLog, intr) -> set[int]:
    """GT side branches whose attachment entered the camera frustum during
    the scan and lies within the scanned z range."""
    pts = gt_attachment_points(scene)
    if len(pts) == 0:
        return set()
    z_lo = min(log.start_z, log.final_z)
    z_hi = max(log.start_z, log.final_z)
    visible = set()
    poses = log.frame_poses()
    for pose in poses:
        pix, z = project_many(intr, pose, pts)
        inside = (z > 0) & (pix[:, 0] >= 0) & (pix[:, 0] < intr.width) \
            & (pix[:, 1] >= 0) & (pix[:, 1] < intr.height)
        visible.update(int(i) for i in np.nonzero(inside)[0])
    return {
        i for i in visible
        if z_lo - 0.02 <= scene.branches[i].attachment_z <= z_hi + 0.02
    }


def residual_mm(branch: BranchModel, gt_curve: CubicBezier,
                z_overlap: bool = False) -> float:
    """Mean distance (mm) from 1 mm model centerline samples to the nearest
    GT centerline point; one-directional by design."""
    model_pts = _densify(branch.points)
    gt_pts = _densify(gt_curve.sample(512))
    if z_overlap:
        lo = max(model_pts[:, 2].min(), gt_pts[:, 2].min())
        hi = min(model_pts[:, 2].max(), gt_pts[:, 2].max())
        sel = (model_pts[:, 2] >= lo) & (model_pts[:, 2] <= hi)
        if sel.any():
            model_pts = model_pts[sel]
    tree = cKDTree(gt_pts)
    d, _ = tree.query(model_pts)
    return float(d.mean() * 1000.0)


def radius_rmse_mm(branch: BranchModel, gt_curve: CubicBezier,
                   gt_radius: float) -> float:
    """RMSE (mm) between model per-point radii and the GT radius at the
    nearest centerline points (GT radius is constant per branch here)."""
    if len(branch.radii) == 0:
        return float("nan")
    err = branch.radii - gt_radius
    return float(np.sqrt(np.mean(err**2)) * 1000.0)


@dataclass
class TrialMetrics:
    pb_residual: float = float("nan")
    pb_radius_rmse: float = float("nan")
    sb_residual: float = float("nan")      # mean over matched secondaries
    sb_radius_rmse: float = float("nan")
    n_model_secondaries: int = 0
    n_spurious: int = 0
    n_gt_eligible: int = 0
    n_missed: int = 0
    completed: bool = False


def evaluate_trial(log: ScanLog, scene: SceneSpec, intr) -> TrialMetrics:
    m = TrialMetrics(completed=log.status == "completed")
    model = log.model
    prim_gt = scene.primary_curve()
    if model.primary is not None and len(model.primary.points) >= 2:
        m.pb_residual = residual_mm(model.primary, prim_gt, z_overlap=True)
        m.pb_radius_rmse = radius_rmse_mm(model.primary, prim_gt,
                                          scene.primary_radius)

    matches = match_branches(model, scene)
    eligible = frustum_visible_gt(scene, log, intr)
    gt_curves = scene.branch_curves()

    sb_res, sb_rad = [], []
    matched_gt = set()
    for match in matches:
        if match.model_index is None:
            continue
        if match.gt_index is None:
            m.n_spurious += 1
            continue
        matched_gt.add(match.gt_index)
        branch = model.secondaries[match.model_index].branch
        if len(branch.points) >= 2:
            sb_res.append(residual_mm(branch, gt_curves[match.gt_index]))
            sb_rad.append(radius_rmse_mm(branch, gt_curves[match.gt_index],
                                         scene.branches[match.gt_index].radius))
    m.n_model_secondaries = len(model.secondaries)
    m.n_gt_eligible = len(eligible)
    m.n_missed = len(eligible - matched_gt)
    if sb_res:
        m.sb_residual = float(np.mean(sb_res))
        m.sb_radius_rmse = float(np.mean(sb_rad))
    return m


@dataclass
class MetricsReport:
    label: str
    trials: int
    pb_residual_mean: float
    pb_residual_std: float
    pb_radius_mean: float
    pb_radius_std: float
    sb_residual_mean: float
    sb_residual_std: float
    sb_radius_mean: float
    sb_radius_std: float
    spurious_fraction: float
    missed_fraction: float

    def row(self) -> dict:
        return {
            "label": self.label,
            "trials": self.trials,
            "pb_resid_mm": f"{self.pb_residual_mean:.2f}",
            "pb_resid_std": f"{self.pb_residual_std:.2f}",
            "pb_rad_mm": f"{self.pb_radius_mean:.2f}",
            "pb_rad_std": f"{self.pb_radius_std:.2f}",
            "sb_resid_mm": f"{self.sb_residual_mean:.2f}",
            "sb_resid_std": f"{self.sb_residual_std:.2f}",
            "sb_rad_mm": f"{self.sb_radius_mean:.2f}",
            "sb_rad_std": f"{self.sb_radius_std:.2f}",
            "spurious_pct": f"{100 * self.spurious_fraction:.1f}",
            "missed_pct": f"{100 * self.missed_fraction:.1f}",
        }


def _mean_std(values):
    vals = np.array([v for v in values if np.isfinite(v)])
    if len(vals) == 0:
        return float("nan"), float("nan")
    return float(vals.mean()), float(vals.std())  # population std

def aggregate(trials: list[TrialMetrics], label: str = "") -> MetricsReport:
    if not trials:
        raise ValueError("at least one trial required")
    pb_m, pb_s = _mean_std([t.pb_residual for t in trials])
    pr_m, pr_s = _mean_std([t.pb_radius_rmse for t in trials])
    sb_m, sb_s = _mean_std([t.sb_residual for t in trials])
    sr_m, sr_s = _mean_std([t.sb_radius_rmse for t in trials])
    n_model = sum(t.n_model_secondaries for t in trials)
    n_spur = sum(t.n_spurious for t in trials)
    n_elig = sum(t.n_gt_eligible for t in trials)
    n_miss = sum(t.n_missed for t in trials)
    return MetricsReport(
        label=label,
        trials=len(trials),
        pb_residual_mean=pb_m, pb_residual_std=pb_s,
        pb_radius_mean=pr_m, pb_radius_std=pr_s,
        sb_residual_mean=sb_m, sb_residual_std=sb_s,
        sb_radius_mean=sr_m, sb_radius_std=sr_s,
        spurious_fraction=n_spur / n_model if n_model else 0.0,
        missed_fraction=n_miss / n_elig if n_elig else 0.0,
    )


def reports_to_csv(reports: list[MetricsReport]) -> str:
    buf = io.StringIO()
    fields = list(reports[0].row().keys())
    writer = csv.DictWriter(buf, fieldnames=fields)
    writer.writeheader()
    for r in reports:
        writer.writerow(r.row())
    return buf.getvalue()
