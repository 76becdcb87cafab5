import numpy as np
import pytest
from hypothesis import given, strategies as st

from branchscan.geometry import (
    BehindCameraError,
    CameraIntrinsics,
    CubicBezier,
    DegenerateFitError,
    InsufficientDataError,
    Pose,
    arclength_spaced_params,
    bezier_eval,
    bezier_fit_lsq,
    bezier_tangent,
    chord_length_params,
    project,
    project_many,
    projection_matrix,
)


INTR = CameraIntrinsics(fx=100.0, fy=100.0, cx=160.0, cy=120.0,
                        width=320, height=240)


def random_pose(rng):
    from scipy.spatial.transform import Rotation
    R = Rotation.random(random_state=rng).as_matrix()
    return Pose(R, rng.normal(size=3))


class TestIntrinsics:
    def test_invalid_focal(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(-1, 100, 160, 120, 320, 240)

    def test_principal_point_bounds(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(100, 100, 400, 120, 320, 240)

    def test_fov_length(self):
        # fy tuned so the vertical FoV length at 0.20 m is 0.218 m
        intr = CameraIntrinsics(220.2, 240 * 0.20 / 0.218, 160, 120, 320, 240)
        assert intr.fov_length(0.20) == pytest.approx(0.218)


class TestPose:
    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            Pose(np.eye(3) * 2.0, np.zeros(3))

    def test_rejects_reflection(self):
        R = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            Pose(R, np.zeros(3))

    def test_camera_center_roundtrip(self):
        rng = np.random.default_rng(0)
        pose = random_pose(rng)
        c = pose.camera_center()
        assert np.allclose(pose.transform(c), 0.0, atol=1e-12)

    def test_look_at_keeps_target_on_axis(self):
        pose = Pose.look_at([0.0, -0.3, 0.5], [0.0, 0.0, 0.5])
        cam = pose.transform(np.array([0.0, 0.0, 0.5]))
        assert cam[0] == pytest.approx(0.0, abs=1e-12)
        assert cam[1] == pytest.approx(0.0, abs=1e-12)
        assert cam[2] == pytest.approx(0.3)

    def test_look_at_world_up_is_image_up(self):
        # a point above the target should land above the principal point
        pose = Pose.look_at([-0.3, 0.0, 0.5], [0.0, 0.0, 0.5])
        pix, _ = project(INTR, pose, [0.0, 0.0, 0.6])
        assert pix[1] < INTR.cy


class TestProject:
    def test_optical_axis(self):
        pix, depth = project(INTR, Pose.identity(), [0.0, 0.0, 0.5])
        assert np.allclose(pix, [160.0, 120.0])
        assert depth == pytest.approx(0.5)

    def test_lateral_offset(self):
        pix, depth = project(INTR, Pose.identity(), [0.1, 0.0, 0.5])
        assert np.allclose(pix, [180.0, 120.0])  # 100 * 0.1 / 0.5 = 20 px
        assert depth == pytest.approx(0.5)

    def test_behind_camera(self):
        with pytest.raises(BehindCameraError):
            project(INTR, Pose.identity(), [0.0, 0.0, -0.1])

    def test_composition_consistency(self):
        # projecting after composing poses == projecting in the composed frame
        rng = np.random.default_rng(1)
        a, b = random_pose(rng), random_pose(rng)
        composed = a.compose(b)
        for _ in range(20):
            p = rng.normal(size=3)
            cam = composed.transform(p)
            if cam[2] <= 0.01:
                continue
            pix1, _ = project(INTR, composed, p)
            pix2, _ = project(INTR, a, b.transform(p))
            assert np.allclose(pix1, pix2, atol=1e-9)


class TestProjectionMatrix:
    def test_identity_pose(self):
        P = projection_matrix(INTR, Pose.identity())
        assert np.allclose(P, np.hstack([INTR.matrix, np.zeros((3, 1))]))

    def test_pure_translation_column(self):
        pose = Pose(np.eye(3), [0.0, 0.0, 1.0])
        P = projection_matrix(INTR, pose)
        assert np.allclose(P[:, 3], INTR.matrix @ [0.0, 0.0, 1.0])

    def test_agrees_with_project(self):
        rng = np.random.default_rng(2)
        pose = random_pose(rng)
        P = projection_matrix(INTR, pose)
        n_checked = 0
        while n_checked < 100:
            p = rng.normal(size=3)
            if pose.transform(p)[2] <= 0.01:
                continue
            n_checked += 1
            pix, _ = project(INTR, pose, p)
            hom = P @ np.append(p, 1.0)
            assert np.allclose(hom[:2] / hom[2], pix, atol=1e-9)

    def test_reconstruction_from_parts(self):
        rng = np.random.default_rng(3)
        pose = random_pose(rng)
        P = projection_matrix(INTR, pose)
        rebuilt = INTR.matrix @ np.hstack(
            [pose.rotation, pose.translation[:, None]])
        assert np.allclose(P, rebuilt, atol=1e-12)


class TestBezierEval:
    def test_constant_curve(self):
        c = CubicBezier(np.full((4, 2), 5.0))
        assert np.allclose(bezier_eval(c, 0.7), [5.0, 5.0])

    def test_collinear_reduces_to_linear(self):
        c = CubicBezier([[0, 0], [0, 1], [0, 2], [0, 3]])
        assert np.allclose(bezier_eval(c, 0.5), [0.0, 1.5])

    def test_symmetric_square(self):
        # direct Bernstein sum: (0.75, 0.5) at t = 0.5
        c = CubicBezier([[0, 0], [1, 0], [1, 1], [0, 1]])
        assert np.allclose(bezier_eval(c, 0.5), [0.75, 0.5])

    def test_endpoints(self):
        rng = np.random.default_rng(4)
        cp = rng.normal(size=(4, 3))
        c = CubicBezier(cp)
        assert np.allclose(bezier_eval(c, 0.0), cp[0])
        assert np.allclose(bezier_eval(c, 1.0), cp[3])

    def test_domain_error(self):
        c = CubicBezier(np.zeros((4, 2)))
        with pytest.raises(ValueError):
            bezier_eval(c, 1.2)
        with pytest.raises(ValueError):
            bezier_eval(c, -0.1)


class TestBezierTangent:
    def test_collinear_constant_derivative(self):
        c = CubicBezier([[0, 0], [0, 1], [0, 2], [0, 3]])
        for t in (0.0, 0.3, 1.0):
            assert np.allclose(bezier_tangent(c, t), [0.0, 3.0])

    def test_constant_curve_zero(self):
        c = CubicBezier(np.full((4, 2), 2.0))
        assert np.allclose(bezier_tangent(c, 0.4), 0.0)

    @given(st.floats(0.01, 0.99))
    def test_matches_finite_differences(self, t):
        cp = np.array([[0.0, 0.0], [0.3, 1.0], [1.2, 0.4], [2.0, 2.0]])
        c = CubicBezier(cp)
        eps = 1e-5
        fd = (c.point(t + eps) - c.point(t - eps)) / (2 * eps)
        assert np.allclose(bezier_tangent(c, t), fd, atol=1e-6)


class TestBezierFit:
    def test_roundtrip_from_samples(self):
        c = CubicBezier([[0.0, 0.0], [10.0, 40.0], [50.0, 60.0], [100.0, 10.0]])
        ts = np.linspace(0, 1, 50)
        pts = c.point(ts)
        fit = bezier_fit_lsq(pts, params=chord_length_params(pts))
        assert np.abs(fit.point(chord_length_params(pts)) - pts).max() < 1e-6

    def test_four_points_interpolate(self):
        pts = np.array([[0.0, 0.0], [1.0, 2.0], [3.0, 1.0], [5.0, 4.0]])
        fit = bezier_fit_lsq(pts)
        residual = np.linalg.norm(fit.point(chord_length_params(pts)) - pts)
        assert residual < 1e-9

    def test_collinear_points_stay_on_axis(self):
        pts = np.column_stack([np.zeros(100), np.linspace(0, 50, 100)])
        fit = bezier_fit_lsq(pts)
        assert np.abs(fit.sample(200)[:, 0]).max() < 1e-9

    def test_too_few_points(self):
        with pytest.raises(InsufficientDataError):
            bezier_fit_lsq(np.zeros((3, 2)))

    def test_degenerate_identical_points(self):
        with pytest.raises(DegenerateFitError):
            bezier_fit_lsq(np.ones((10, 2)))

    def test_residual_nonincreasing_with_on_curve_point(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(20, 2)).cumsum(axis=0)
        fit = bezier_fit_lsq(pts)

        def residual(points):
            f = bezier_fit_lsq(points)
            ts = chord_length_params(points)
            return float(np.sum((f.point(ts) - points) ** 2))

        base = residual(pts)
        extra = fit.point(1.0)[None, :]
        assert residual(np.vstack([pts, extra])) <= base + 1e-9


class TestArclengthSampling:
    def test_spacing(self):
        c = CubicBezier([[0.0, 0.0], [30.0, 80.0], [90.0, 20.0], [150.0, 90.0]])
        ts = arclength_spaced_params(c, 30.0)
        pts = c.point(ts)
        gaps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        assert np.all(gaps[:-1] > 28.0) and np.all(gaps[:-1] < 32.0)
