import numpy as np
import pytest

from branchscan.geometry import CameraIntrinsics, Pose, project
from branchscan.triangulate import (
    DegenerateGeometryError,
    PixelTrack,
    TrackerConfig,
    build_dlt,
    filter_point,
    triangulate,
    TriangulatedPoint,
)


INTR = CameraIntrinsics(fx=220.2, fy=220.2, cx=160.0, cy=120.0,
                        width=320, height=240)
IDENT_INTR = CameraIntrinsics(fx=1.0, fy=1.0, cx=0.0, cy=0.0,
                              width=320, height=240)


def make_track(point, poses, intr=INTR, noise=0.0, rng=None):
    pixels = []
    for pose in poses:
        pix, _ = project(intr, pose, point)
        pixels.append(pix)
    pixels = np.array(pixels)
    if noise > 0:
        pixels += rng.normal(scale=noise, size=pixels.shape)
    return PixelTrack(keypoint_id=0, pixels=pixels, poses=poses)


def lateral_poses(n, spacing=0.001):
    return [Pose(np.eye(3), [-i * spacing, 0.0, 0.0]) for i in range(n)]


class TestTrackerConfig:
    def test_defaults(self):
        cfg = TrackerConfig()
        assert cfg.window == 8
        assert cfg.frame_spacing == pytest.approx(0.001)

    def test_invalid(self):
        with pytest.raises(ValueError):
            TrackerConfig(window=1)
        with pytest.raises(ValueError):
            TrackerConfig(frame_spacing=0.0)
        with pytest.raises(ValueError):
            TrackerConfig(pixel_noise=-1.0)


class TestPixelTrack:
    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            PixelTrack(0, np.zeros((3, 2)), [Pose.identity()] * 2)


class TestBuildDlt:
    def test_shape(self):
        track = make_track(np.array([0.0, 0.0, 0.4]), lateral_poses(8))
        assert build_dlt(track, INTR).shape == (16, 4)

    def test_exact_point_annihilates(self):
        X = np.array([0.05, 0.02, 0.4])
        track = make_track(X, lateral_poses(8))
        D = build_dlt(track, INTR)
        assert np.linalg.norm(D @ np.append(X, 1.0)) < 1e-9

    def test_rank_and_nullspace_minimal_case(self):
        # M=2, identity intrinsics: rank 3, nullspace along the true point
        X = np.array([0.03, -0.01, 0.5])
        poses = [Pose(np.eye(3), [0.0, 0.0, 0.0]),
                 Pose(np.eye(3), [0.01, 0.0, 0.0])]
        track = make_track(X, poses, intr=IDENT_INTR)
        D = build_dlt(track, IDENT_INTR)
        s = np.linalg.svd(D, compute_uv=False)
        assert np.sum(s > 1e-9) == 3
        assert np.linalg.norm(D @ np.append(X, 1.0)) < 1e-12

    def test_row_structure(self):
        from branchscan.geometry import projection_matrix
        X = np.array([0.0, 0.0, 0.4])
        poses = lateral_poses(2)
        track = make_track(X, poses)
        D = build_dlt(track, INTR)
        for i, pose in enumerate(poses):
            P = projection_matrix(INTR, pose)
            u, v = track.pixels[i]
            assert np.allclose(D[2 * i], u * P[2] - P[0])
            assert np.allclose(D[2 * i + 1], v * P[2] - P[1])


class TestTriangulate:
    def test_noiseless_roundtrip(self):
        X = np.array([0.05, 0.02, 0.4])
        track = make_track(X, lateral_poses(8))
        pt = triangulate(track, INTR)
        assert np.linalg.norm(pt.position - X) < 1e-6
        assert pt.reproj_error < 1e-6
        assert pt.max_reproj_error < 1e-6

    def test_depth_at_latest_pose(self):
        X = np.array([0.0, 0.0, 0.4])
        poses = [Pose(np.eye(3), [0.0, 0.0, 0.0]),
                 Pose(np.eye(3), [0.0, 0.0, 0.1])]
        track = make_track(X, poses)
        pt = triangulate(track, INTR)
        assert pt.depth == pytest.approx(0.5, abs=1e-9)

    def test_identical_poses_degenerate(self):
        poses = [Pose.identity()] * 8
        track = PixelTrack(0, np.full((8, 2), 160.0), poses)
        with pytest.raises(DegenerateGeometryError):
            triangulate(track, INTR)

    def test_rigid_invariance(self):
        # same camera-point geometry in a rotated/translated world frame
        from scipy.spatial.transform import Rotation
        rng = np.random.default_rng(7)
        X = np.array([0.05, 0.02, 0.4])
        poses = lateral_poses(8)
        base = triangulate(make_track(X, poses), INTR)

        R = Rotation.random(random_state=rng).as_matrix()
        t = rng.normal(size=3)
        world = Pose(R, t)  # maps new world coords into old
        moved_poses = [p.compose(world) for p in poses]
        X_new = R.T @ (X - t)
        moved = triangulate(make_track(X_new, moved_poses), INTR)
        back = R @ moved.position + t
        assert np.allclose(back, base.position, atol=1e-9)
        assert moved.depth == pytest.approx(base.depth, abs=1e-9)

    def test_noise_monte_carlo_median_error(self):
        # sigma 0.5 px, depth 0.2 m, 7 mm total baseline over 8 frames
        rng = np.random.default_rng(11)
        X = np.array([0.0, 0.0, 0.2])
        poses = lateral_poses(8, spacing=0.001)
        errs = []
        for _ in range(1000):
            track = make_track(X, poses, noise=0.5, rng=rng)
            pt = triangulate(track, INTR)
            errs.append(np.linalg.norm(pt.position - X))
        assert np.median(errs) < 0.015

    def test_wider_baseline_not_worse(self):
        rng = np.random.default_rng(13)
        X = np.array([0.0, 0.0, 0.2])

        def median_err(spacing):
            poses = lateral_poses(8, spacing=spacing)
            errs = []
            for _ in range(1000):
                track = make_track(X, poses, noise=0.5, rng=rng)
                errs.append(np.linalg.norm(
                    triangulate(track, INTR).position - X))
            return np.median(errs)

        assert median_err(0.002) <= median_err(0.001)


class TestFilterPoint:
    def test_keep(self):
        pt = TriangulatedPoint(np.zeros(3), 1.0, 1.0, 0.3)
        assert filter_point(pt) is None

    def test_reject_depth(self):
        pt = TriangulatedPoint(np.zeros(3), 1.0, 1.0, 1.2)
        assert filter_point(pt) == "depth"

    def test_reject_reprojection(self):
        pt = TriangulatedPoint(np.zeros(3), 5.0, 5.0, 0.3)
        assert filter_point(pt) == "reprojection"

    def test_max_error_mode(self):
        pt = TriangulatedPoint(np.zeros(3), 2.0, 6.0, 0.3)
        assert filter_point(pt) is None
        assert filter_point(pt, use_max_error=True) == "reprojection"
