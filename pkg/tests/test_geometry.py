"""Unit tests for the plane/motion homography algebra."""

import numpy as np
import pytest

from sfdeblur.errors import (
    BehindCameraError,
    GeometryError,
    PointAtInfinityError,
    SingularHomographyError,
)
from sfdeblur.geometry import (
    CameraRig,
    Homography,
    Plane,
    RigidMotion,
    disparity_from_plane,
    flow_from_homography,
    homography_from_plane_motion,
    plane_disparity_values,
    plane_from_disparity_samples,
    transform_plane,
    warp_homographies,
)

RIG = CameraRig(fx=100.0, fy=100.0, cx=0.0, cy=0.0, baseline=0.5)


def _rot_y(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])


class TestTypes:
    def test_rig_rejects_nonpositive_focal(self):
        with pytest.raises(GeometryError):
            CameraRig(fx=0.0, fy=1.0, cx=0.0, cy=0.0, baseline=0.5)
        with pytest.raises(GeometryError):
            CameraRig(fx=1.0, fy=1.0, cx=0.0, cy=0.0, baseline=-0.1)

    def test_plane_requires_finite(self):
        with pytest.raises(GeometryError):
            Plane(np.array([0.0, np.nan, 0.1]))

    def test_motion_requires_rotation(self):
        bad = np.eye(3) * 1.5
        with pytest.raises(GeometryError):
            RigidMotion(bad, np.zeros(3))
        refl = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(GeometryError):
            RigidMotion(refl, np.zeros(3))

    def test_homography_requires_invertible(self):
        with pytest.raises(SingularHomographyError):
            Homography(np.zeros((3, 3)))

    def test_motion_inverse_composes_to_identity(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            m = RigidMotion(_rot_y(rng.uniform(-0.3, 0.3)), rng.normal(size=3))
            comp = m.compose(m.inverse())
            assert np.allclose(comp.rotation, np.eye(3), atol=1e-12)
            assert np.allclose(comp.translation, 0.0, atol=1e-12)


class TestHomographyFromPlaneMotion:
    def test_identity_motion_any_plane(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            n = rng.uniform(-0.002, 0.002, size=3)
            n[2] = rng.uniform(0.05, 0.5)
            hom = homography_from_plane_motion(
                RIG, RigidMotion.identity(), Plane(n)
            )
            assert np.allclose(hom.matrix, np.eye(3), atol=1e-12)

    def test_translation_x_fronto_parallel(self):
        motion = RigidMotion(np.eye(3), np.array([0.1, 0.0, 0.0]))
        plane = Plane(np.array([0.0, 0.0, 0.1]))
        hom = homography_from_plane_motion(RIG, motion, plane)
        expect = np.eye(3)
        expect[0, 2] = -1.0
        assert np.allclose(hom.matrix, expect, atol=1e-12)
        flow = flow_from_homography(hom, np.array([50.0, 50.0]))
        assert np.allclose(flow, [-1.0, 0.0], atol=1e-12)

    def test_small_rotation_about_y(self):
        motion = RigidMotion(_rot_y(0.01), np.zeros(3))
        plane = Plane(np.array([0.0, 0.0, 0.1]))
        hom = homography_from_plane_motion(RIG, motion, plane)
        kmat = RIG.intrinsics()
        expect = kmat @ motion.rotation @ np.linalg.inv(kmat)
        assert np.allclose(hom.matrix, expect, atol=1e-12)
        flow = flow_from_homography(hom, np.array([0.0, 0.0]))
        assert abs(flow[0] - (-1.0)) < 1e-3
        assert abs(flow[1]) < 1e-12

    def test_constant_flow_for_pure_x_translation(self):
        motion = RigidMotion(np.eye(3), np.array([0.25, 0.0, 0.0]))
        plane = Plane(np.array([0.0, 0.0, 0.2]))
        hom = homography_from_plane_motion(RIG, motion, plane)
        xs = np.linspace(-60.0, 60.0, 9)
        flows = np.array([
            flow_from_homography(hom, np.array([x, y]))
            for x in xs for y in xs
        ])
        assert np.ptp(flows[:, 0]) < 1e-9
        assert np.ptp(flows[:, 1]) < 1e-9


class TestFlowFromHomography:
    def test_identity(self):
        flow = flow_from_homography(Homography(np.eye(3)), np.array([37.0, 12.0]))
        assert np.allclose(flow, 0.0)

    def test_pure_translation_matrix(self):
        mat = np.eye(3)
        mat[0, 2] = 3.0
        mat[1, 2] = -2.0
        for xy in ([0.0, 0.0], [11.0, 40.0], [-5.0, 2.5]):
            flow = flow_from_homography(Homography(mat), np.array(xy))
            assert np.allclose(flow, [3.0, -2.0], atol=1e-12)

    def test_round_trip_matches_homogeneous_action(self):
        rng = np.random.default_rng(11)
        mat = np.eye(3) + 0.001 * rng.normal(size=(3, 3))
        hom = Homography(mat)
        for _ in range(50):
            x = rng.uniform(-80.0, 80.0, size=2)
            u = flow_from_homography(hom, x)
            tgt = mat @ np.array([x[0], x[1], 1.0])
            assert np.allclose(x + u, tgt[:2] / tgt[2], atol=1e-10)

    def test_point_at_infinity(self):
        mat = np.eye(3)
        mat[2] = np.array([0.01, 0.0, 1.0])
        with pytest.raises(PointAtInfinityError):
            flow_from_homography(Homography(mat), np.array([-100.0, 0.0]))


class TestDisparity:
    def test_fronto_parallel_depth_10(self):
        plane = Plane(np.array([0.0, 0.0, 0.1]))
        for xy in ([0.0, 0.0], [40.0, -12.0], [3.0, 99.0]):
            assert abs(disparity_from_plane(RIG, plane, np.array(xy)) - 5.0) < 1e-12

    def test_scaling_plane_doubles_disparity(self):
        plane = Plane(np.array([0.0, 0.0, 0.2]))
        assert abs(disparity_from_plane(RIG, plane, np.array([7.0, 7.0])) - 10.0) < 1e-12

    def test_slanted_plane_on_principal_column(self):
        plane = Plane(np.array([0.01, 0.0, 0.1]))
        for y in (-20.0, 0.0, 35.0):
            d = disparity_from_plane(RIG, plane, np.array([0.0, y]))
            assert abs(d - 5.0) < 1e-12

    def test_linear_in_pixel_coordinates(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            n = np.array([
                rng.uniform(-0.001, 0.001),
                rng.uniform(-0.001, 0.001),
                rng.uniform(0.05, 0.3),
            ])
            plane = Plane(n)
            xy = rng.uniform(-50.0, 50.0, size=(40, 2))
            d, ok = plane_disparity_values(RIG, plane, xy)
            assert ok.all()
            ones = np.ones((len(xy), 1))
            basis = np.hstack([xy, ones])
            coef, *_ = np.linalg.lstsq(basis, d, rcond=None)
            assert np.abs(basis @ coef - d).max() < 1e-10

    def test_behind_camera(self):
        plane = Plane(np.array([0.0, 0.0, -0.1]))
        with pytest.raises(BehindCameraError):
            disparity_from_plane(RIG, plane, np.array([0.0, 0.0]))


class TestWarpDirections:
    def test_identity_motion_forward_flow(self):
        plane = Plane(np.array([0.0, 0.0, 0.1]))
        ws = warp_homographies(RIG, plane, RigidMotion.identity())
        assert np.allclose(ws["flow_f"].matrix, np.eye(3), atol=1e-12)

    def test_stereo_shift_equals_negative_disparity(self):
        plane = Plane(np.array([0.0, 0.0, 0.1]))
        ws = warp_homographies(RIG, plane, RigidMotion.identity())
        for xy in ([20.0, 5.0], [-11.0, 30.0]):
            flow = flow_from_homography(ws["stereo"], np.array(xy))
            d = disparity_from_plane(RIG, plane, np.array(xy))
            assert np.allclose(flow, [-d, 0.0], atol=1e-10)

    def test_cross_forward_with_identity_motion_is_stereo(self):
        plane = Plane(np.array([0.0002, -0.0001, 0.12]))
        ws = warp_homographies(RIG, plane, RigidMotion.identity())
        assert np.allclose(ws["cross_f"].matrix, ws["stereo"].matrix, atol=1e-12)

    def test_forward_backward_composition_is_identity(self):
        # the inverse-motion homography undoes the forward one when built
        # on the plane carried to the next frame
        rng = np.random.default_rng(23)
        for _ in range(10):
            plane = Plane(np.array([
                rng.uniform(-1e-3, 1e-3),
                rng.uniform(-1e-3, 1e-3),
                rng.uniform(0.05, 0.3),
            ]))
            motion = RigidMotion(
                _rot_y(rng.uniform(-0.05, 0.05)),
                rng.uniform(-0.2, 0.2, size=3),
            )
            h_f = homography_from_plane_motion(RIG, motion, plane)
            moved = transform_plane(plane, motion.rotation, -motion.translation)
            h_b = homography_from_plane_motion(RIG, motion.inverse(), moved)
            prod = h_b.matrix @ h_f.matrix
            prod = prod / prod[2, 2]
            assert np.abs(prod - np.eye(3)).max() < 1e-8


class TestPlaneFitting:
    def test_recovers_plane_from_its_own_disparities(self):
        rng = np.random.default_rng(17)
        for _ in range(10):
            n = np.array([
                rng.uniform(-0.001, 0.001),
                rng.uniform(-0.001, 0.001),
                rng.uniform(0.05, 0.3),
            ])
            xy = rng.uniform(-60.0, 60.0, size=(80, 2))
            d, _ = plane_disparity_values(RIG, Plane(n), xy)
            fit = plane_from_disparity_samples(RIG, xy, d)
            assert np.allclose(fit.n, n, atol=1e-10)
