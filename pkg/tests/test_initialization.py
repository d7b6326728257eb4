"""Bootstrap estimators: census SGM disparity, sparse matching, RANSAC
motions, robust plane fits."""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from sfdeblur.errors import InitializationError
from sfdeblur.geometry import CameraRig, Plane, RigidMotion, pixel_rays
from sfdeblur.initialization import (
    Correspondences,
    MatchSet,
    compute_disparity,
    fit_planes,
    match_features,
    ransac_motion_hypotheses,
)
from sfdeblur.segmentation import from_labels, segment
from sfdeblur.window import DisparityMap, StereoWindow, TWO_FRAME_VIEWS, View

RIG = CameraRig(fx=100.0, fy=100.0, cx=32.0, cy=24.0, baseline=0.5)


def _texture(h, w, seed=0, blur_passes=1):
    rng = np.random.default_rng(seed)
    img = rng.random((h, w))
    for _ in range(blur_passes):  # soften so parabolic refinement behaves
        img = (
            img
            + np.roll(img, 1, axis=0) + np.roll(img, -1, axis=0)
            + np.roll(img, 1, axis=1) + np.roll(img, -1, axis=1)
        ) / 5.0
    return img[:, :, None]


class TestComputeDisparity:
    def test_recovers_constant_shift(self):
        h, w, d_true = 48, 96, 4
        left = _texture(h, w, seed=1)
        right = np.empty_like(left)
        right[:, : w - d_true] = left[:, d_true:]
        right[:, w - d_true:] = left[:, w - d_true:]
        disp = compute_disparity(left, right, max_disparity=16)
        vals = disp.values[disp.valid]
        assert disp.valid.mean() > 0.5
        frac_good = np.mean(np.abs(vals - d_true) <= 1.0)
        assert frac_good >= 0.95

    def test_identical_pair_zero_shift(self):
        left = _texture(32, 64, seed=2)
        disp = compute_disparity(left, left, max_disparity=16)
        # zero disparity is outside the valid range, so valid pixels are few
        # and every one that survives must sit near zero
        if disp.valid.any():
            assert np.abs(disp.values[disp.valid]).max() <= 1.0

    def test_textureless_input_mostly_invalid(self):
        flat = np.full((32, 64, 1), 0.5)
        disp = compute_disparity(flat, flat, max_disparity=16)
        assert disp.valid.mean() < 0.5

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InitializationError):
            compute_disparity(np.zeros((8, 8, 1)), np.zeros((8, 9, 1)), 4)


def _window_with_forward_shift(h, w, dx, dy=0, seed=3):
    """two_frame window whose left-next view is the reference translated."""
    base = _texture(h, w, seed=seed)
    shifted = np.roll(np.roll(base, dy, axis=0), dx, axis=1)
    views = {
        View("left", 0): base,
        View("right", 0): base,
        View("left", 1): shifted,
        View("right", 1): shifted,
    }
    return StereoWindow(views)


class TestMatchFeatures:
    def test_translation_recovered(self):
        win = _window_with_forward_shift(64, 96, dx=5)
        matches = match_features(win, directions=("flow_f",))
        ms = matches["flow_f"]
        assert len(ms) >= 50
        flow = ms.x_tgt - ms.x_ref
        med = np.median(flow, axis=0)
        assert abs(med[0] - 5.0) <= 0.5
        assert abs(med[1] - 0.0) <= 0.5

    def test_self_match_zero_displacement(self):
        win = _window_with_forward_shift(64, 96, dx=0)
        matches = match_features(win, directions=("flow_f",))
        ms = matches["flow_f"]
        assert len(ms) >= 50
        med = np.median(np.abs(ms.x_tgt - ms.x_ref), axis=0)
        assert med.max() <= 0.1

    def test_constant_image_yields_nearly_nothing(self):
        flat = np.full((48, 64, 1), 0.3)
        win = StereoWindow({v: flat for v in TWO_FRAME_VIEWS})
        matches = match_features(win, directions=("flow_f", "stereo"))
        assert matches.total() <= 5

    def test_at_most_one_match_per_ref_pixel(self):
        win = _window_with_forward_shift(64, 96, dx=3)
        matches = match_features(win, directions=("flow_f",))
        ms = matches["flow_f"]
        keys = {tuple(np.round(p, 3)) for p in ms.x_ref}
        assert len(keys) == len(ms)


def _synthetic_matches(rig, motion, depth, shape=(48, 64), n=60, seed=0,
                       cross_fraction=0.0):
    """Feature set + disparity consistent with one rigid motion at fixed depth."""
    h, w = shape
    rng = np.random.default_rng(seed)
    x = rng.uniform(8, w - 8, size=n)
    y = rng.uniform(8, h - 8, size=n)
    refs = np.stack([x, y], axis=1)
    pts = pixel_rays(rig, refs) * depth
    moved = pts @ motion.rotation.T - motion.translation
    n_cross = int(round(cross_fraction * n))
    cross = np.zeros(n, dtype=bool)
    cross[:n_cross] = True
    moved = moved.copy()
    moved[cross, 0] -= rig.baseline
    tgts = np.stack(
        [
            rig.fx * moved[:, 0] / moved[:, 2] + rig.cx,
            rig.fy * moved[:, 1] / moved[:, 2] + rig.cy,
        ],
        axis=1,
    )
    flow = MatchSet(refs[~cross], tgts[~cross], np.ones((~cross).sum()))
    crossm = MatchSet(refs[cross], tgts[cross], np.ones(cross.sum()))
    by_dir = {"flow_f": flow}
    if n_cross:
        by_dir["cross_f"] = crossm
    matches = Correspondences(by_dir)
    disparity = DisparityMap(
        np.full(shape, rig.fx * rig.baseline / depth), np.ones(shape, dtype=bool)
    )
    return matches, disparity


def _angle(rot):
    return float(np.linalg.norm(Rotation.from_matrix(rot).as_rotvec()))


class TestRansacMotions:
    def test_single_translation_recovered(self):
        truth = RigidMotion(np.eye(3), np.array([0.1, 0.0, 0.0]))
        matches, disparity = _synthetic_matches(RIG, truth, depth=10.0)
        hyps = ransac_motion_hypotheses(
            matches, disparity, RIG, np.random.default_rng(0)
        )
        best = hyps[0]
        assert np.linalg.norm(best.translation - truth.translation) <= 0.01
        assert _angle(best.rotation) <= 0.005

    def test_static_scene_recovers_identity(self):
        truth = RigidMotion.identity()
        matches, disparity = _synthetic_matches(RIG, truth, depth=8.0)
        hyps = ransac_motion_hypotheses(
            matches, disparity, RIG, np.random.default_rng(1)
        )
        assert np.linalg.norm(hyps[0].translation) <= 0.01
        assert _angle(hyps[0].rotation) <= 0.005

    def test_identity_always_appended(self):
        truth = RigidMotion(np.eye(3), np.array([0.1, 0.0, 0.0]))
        matches, disparity = _synthetic_matches(RIG, truth, depth=10.0)
        hyps = ransac_motion_hypotheses(
            matches, disparity, RIG, np.random.default_rng(2)
        )
        last = hyps[-1]
        assert np.allclose(last.rotation, np.eye(3))
        assert np.allclose(last.translation, 0.0)

    def test_too_few_matches_identity_only(self):
        matches = Correspondences(
            {"flow_f": MatchSet(np.zeros((2, 2)), np.zeros((2, 2)), np.ones(2))}
        )
        disparity = DisparityMap(np.full((8, 8), 2.0))
        hyps = ransac_motion_hypotheses(
            matches, disparity, RIG, np.random.default_rng(3)
        )
        assert len(hyps) == 1
        assert np.allclose(hyps[0].rotation, np.eye(3))
        assert np.allclose(hyps[0].translation, 0.0)

    def test_two_rigid_clusters_both_recovered(self):
        m1 = RigidMotion(np.eye(3), np.array([0.1, 0.0, 0.0]))
        rot2 = Rotation.from_rotvec([0.0, 0.02, 0.0]).as_matrix()
        m2 = RigidMotion(rot2, np.array([0.0, 0.15, 0.05]))
        a, disparity_a = _synthetic_matches(RIG, m1, depth=10.0, n=60, seed=4)
        b, _ = _synthetic_matches(RIG, m2, depth=5.0, n=60, seed=5)
        merged = Correspondences(
            {
                "flow_f": MatchSet(
                    np.concatenate([a["flow_f"].x_ref, b["flow_f"].x_ref]),
                    np.concatenate([a["flow_f"].x_tgt, b["flow_f"].x_tgt]),
                    np.concatenate([a["flow_f"].score, b["flow_f"].score]),
                )
            }
        )
        # disparity must reflect the true depth of each cluster's features
        disp = np.full(disparity_a.shape, RIG.fx * RIG.baseline / 10.0)
        vals_b = RIG.fx * RIG.baseline / 5.0
        for (x, y) in b["flow_f"].x_ref:
            disp[int(round(y)), int(round(x))] = vals_b
        disparity = DisparityMap(disp)
        hyps = ransac_motion_hypotheses(
            merged, disparity, RIG, np.random.default_rng(6)
        )
        non_identity = hyps[:-1]
        assert len(non_identity) >= 2
        for truth in (m1, m2):
            hit = any(
                np.linalg.norm(h.translation - truth.translation) <= 0.01
                and _angle(h.rotation @ truth.rotation.T) <= 0.005
                for h in non_identity
            )
            assert hit, f"no hypothesis matches translation {truth.translation}"


def _segmentation(h, w, n=24, seed=0):
    rng = np.random.default_rng(seed)
    img = np.repeat(rng.random((h, w))[:, :, None], 3, axis=2)
    return segment(img, None, n)


class TestFitPlanes:
    def test_constant_disparity_fronto_parallel(self):
        h, w = 40, 64
        seg = _segmentation(h, w)
        disp = DisparityMap(np.full((h, w), 5.0))
        planes = fit_planes(seg, disp, RIG)
        expect = np.array([0.0, 0.0, 5.0 / (RIG.fx * RIG.baseline)])
        for p in planes:
            assert np.linalg.norm(p.n - expect) <= 1e-6

    def test_linear_ramp_reproduced_exactly(self):
        h, w = 40, 64
        seg = _segmentation(h, w, seed=1)
        ys, xs = np.mgrid[0:h, 0:w]
        ramp = 2.0 + 0.05 * xs + 0.02 * ys
        disp = DisparityMap(ramp)
        planes = fit_planes(seg, disp, RIG)
        rays = pixel_rays(RIG, np.stack([xs.ravel(), ys.ravel()], axis=1))
        labels = seg.labels.ravel()
        for i, p in enumerate(planes):
            sel = labels == i
            pred = RIG.fx * RIG.baseline * (rays[sel] @ p.n)
            assert np.abs(pred - ramp.ravel()[sel]).max() < 1e-8

    def test_outliers_rejected_by_reweighting(self):
        h, w = 40, 64
        seg = _segmentation(h, w, seed=2)
        rng = np.random.default_rng(3)
        disp = np.full((h, w), 5.0)
        mask = rng.random((h, w)) < 0.2
        salt = rng.random((h, w)) < 0.5
        disp[mask & salt] = 15.0
        disp[mask & ~salt] = 1.0
        planes = fit_planes(seg, DisparityMap(disp), RIG)
        expect = np.array([0.0, 0.0, 5.0 / (RIG.fx * RIG.baseline)])
        for p in planes:
            assert np.linalg.norm(p.n - expect) <= 1e-3

    def test_sparse_regions_inherit_neighbor_plane(self):
        h, w = 40, 64
        seg = _segmentation(h, w, seed=4)
        disp = np.full((h, w), 4.0)
        valid = np.ones((h, w), dtype=bool)
        starve = 0  # invalidate one whole superpixel
        r = seg.regions[starve]
        valid[r[:, 0], r[:, 1]] = False
        planes = fit_planes(seg, DisparityMap(disp, valid), RIG)
        neighbor_keys = {tuple(planes[j].n) for j in seg.adjacency[starve]}
        assert tuple(planes[starve].n) in neighbor_keys

    def test_no_valid_disparity_raises(self):
        h, w = 24, 32
        seg = _segmentation(h, w, seed=5)
        disp = DisparityMap(np.full((h, w), 3.0), np.zeros((h, w), dtype=bool))
        with pytest.raises(InitializationError):
            fit_planes(seg, disp, RIG)
