"""Unit tests for bidirectional blur kernels and the blur operator."""

import numpy as np
import pytest

from sfdeblur.blurkernel import (
    BlurKernelField,
    PixelKernel,
    apply_blur,
    apply_blur_adjoint,
    blur_values_over_region,
    build_kernel_field,
    pixel_kernel_taps,
)
from sfdeblur.errors import DataError


def _kernel_dict(kernel):
    return {
        (int(ox), int(oy)): float(w)
        for (ox, oy), w in zip(kernel.offsets, kernel.weights)
        if w > 0
    }


def _segment_oracle(end_f, end_b, samples=200_000):
    """Dense line-integral rasterization of the two uniform half-segments."""
    end_f = np.asarray(end_f, dtype=np.float64)
    end_b = np.asarray(end_b, dtype=np.float64)
    len_f = np.linalg.norm(end_f)
    len_b = np.linalg.norm(end_b)
    total = len_f + len_b
    out = {}
    if total <= 1e-12:
        return {(0, 0): 1.0}
    for end, mass in ((end_f, len_f / total), (end_b, len_b / total)):
        if np.linalg.norm(end) <= 1e-12:
            continue
        ts = (np.arange(samples) + 0.5) / samples
        pts = ts[:, None] * end[None, :]
        w = mass / samples
        x0 = np.floor(pts[:, 0]).astype(int)
        y0 = np.floor(pts[:, 1]).astype(int)
        fx = pts[:, 0] - x0
        fy = pts[:, 1] - y0
        for dx, dy, ww in (
            (0, 0, (1 - fx) * (1 - fy)),
            (1, 0, fx * (1 - fy)),
            (0, 1, (1 - fx) * fy),
            (1, 1, fx * fy),
        ):
            for xx, yy, www in zip(x0 + dx, y0 + dy, ww):
                if www > 0:
                    out[(int(xx), int(yy))] = out.get((int(xx), int(yy)), 0.0) + www * w
    return out


def _l1_between(a, b):
    keys = set(a) | set(b)
    return sum(abs(a.get(k, 0.0) - b.get(k, 0.0)) for k in keys)


class TestPixelKernel:
    def test_static_pixel_single_tap(self):
        k = pixel_kernel_taps((0.0, 0.0), (0.0, 0.0), 1.0)
        assert _kernel_dict(k) == {(0, 0): 1.0}

    def test_taps_must_be_distinct(self):
        with pytest.raises(ValueError):
            PixelKernel(np.array([[0, 0], [0, 0]]), np.array([0.5, 0.5]))

    def test_weights_nonnegative(self):
        with pytest.raises(ValueError):
            PixelKernel(np.array([[0, 0]]), np.array([-0.1]))

    def test_symmetric_horizontal_segment(self):
        k = pixel_kernel_taps((4.0, 0.0), (-4.0, 0.0), 1.0)
        d = _kernel_dict(k)
        assert abs(sum(d.values()) - 1.0) < 1e-6
        xs = np.array([o[0] for o in d])
        assert xs.min() >= -2 and xs.max() <= 2
        com = sum(x * w for (x, _), w in d.items())
        assert abs(com) < 1e-6
        oracle = _segment_oracle((2.0, 0.0), (-2.0, 0.0))
        assert _l1_between(d, oracle) <= 1e-3

    def test_duty_cycle_scaling_identity(self):
        k_half = pixel_kernel_taps((4.0, 0.0), (-4.0, 0.0), 0.5)
        k_full = pixel_kernel_taps((2.0, 0.0), (-2.0, 0.0), 1.0)
        assert _kernel_dict(k_half) == pytest.approx(_kernel_dict(k_full))

    def test_diagonal_kernel_against_oracle(self):
        k = pixel_kernel_taps((3.0, 2.0), (-1.0, -4.0), 0.8)
        d = _kernel_dict(k)
        assert abs(sum(d.values()) - 1.0) < 1e-6
        oracle = _segment_oracle((1.2, 0.8), (-0.4, -1.6))
        assert _l1_between(d, oracle) <= 1e-3

    def test_support_length_tracks_flow(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            uf = rng.uniform(-6, 6, size=2)
            while np.linalg.norm(uf) < 1.0:
                uf = rng.uniform(-6, 6, size=2)
            ub = -rng.uniform(0.3, 1.5) * uf
            tau = rng.uniform(0.3, 1.0)
            k = pixel_kernel_taps(tuple(uf), tuple(ub), tau)
            d = _kernel_dict(k)
            pts = np.array(list(d), dtype=np.float64)
            axis = uf / np.linalg.norm(uf)
            expect = (tau / 2) * (np.linalg.norm(uf) + np.linalg.norm(ub))
            # every tap sits within one pixel of the ideal segment, and the
            # taps span at least the segment length minus the splat halo
            a = (tau / 2) * ub
            b = (tau / 2) * uf
            seg = b - a
            ts = np.linspace(0.0, 1.0, 4000)
            seg_pts = a[None, :] + ts[:, None] * seg[None, :]
            cheb = np.abs(pts[:, None, :] - seg_pts[None, :, :]).max(axis=2)
            assert cheb.min(axis=1).max() <= 1.0 + 5e-3
            assert np.ptp(pts @ axis) >= expect - 1.0 - 1e-9

    def test_nan_flow_rejected(self):
        with pytest.raises(DataError):
            pixel_kernel_taps((np.nan, 0.0), (0.0, 0.0), 1.0)


class TestKernelField:
    def test_zero_flow_identity_operator(self):
        z = np.zeros((6, 9, 2))
        field = build_kernel_field(z, z, 0.8)
        img = np.random.default_rng(0).uniform(size=(6, 9, 3))
        assert np.array_equal(apply_blur(field, img), img)

    def test_constant_flow_uniform_kernels(self):
        fwd = np.full((5, 7, 2), 0.0)
        fwd[:, :, 0] = 4.0
        bwd = -fwd
        field = build_kernel_field(fwd, bwd, 1.0)
        ref = _kernel_dict(field.kernel_at(3, 2))
        for y in range(5):
            for x in range(7):
                assert _kernel_dict(field.kernel_at(x, y)) == pytest.approx(ref)

    def test_kernel_masses_sum_to_one(self):
        rng = np.random.default_rng(8)
        fwd = rng.uniform(-5, 5, size=(8, 8, 2))
        bwd = rng.uniform(-5, 5, size=(8, 8, 2))
        field = build_kernel_field(fwd, bwd, 0.8)
        assert np.abs(field.kernel_masses() - 1.0).max() < 1e-6

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            build_kernel_field(np.zeros((4, 4, 2)), np.zeros((5, 4, 2)), 0.8)

    def test_tau_out_of_range(self):
        z = np.zeros((2, 2, 2))
        for tau in (0.0, -0.2, 1.5):
            with pytest.raises(ValueError):
                build_kernel_field(z, z, tau)


class TestBlurOperator:
    def test_constant_image_preserved(self):
        rng = np.random.default_rng(3)
        fwd = rng.uniform(-4, 4, size=(10, 12, 2))
        bwd = rng.uniform(-4, 4, size=(10, 12, 2))
        field = build_kernel_field(fwd, bwd, 0.8)
        img = np.full((10, 12, 3), 0.42)
        out = apply_blur(field, img)
        assert np.abs(out - 0.42).max() < 1e-6

    def test_delta_image_streak(self):
        kernel = PixelKernel(
            np.array([[-2, 0], [-1, 0], [0, 0], [1, 0], [2, 0]]),
            np.full(5, 0.2),
        )
        field = BlurKernelField.from_uniform(32, 32, kernel)
        img = np.zeros((32, 32, 1))
        img[10, 10] = 1.0
        out = apply_blur(field, img)
        expect = np.zeros((32, 32, 1))
        expect[10, 8:13] = 0.2
        assert np.allclose(out, expect, atol=1e-12)

    def test_linearity(self):
        rng = np.random.default_rng(5)
        fwd = rng.uniform(-3, 3, size=(9, 9, 2))
        bwd = rng.uniform(-3, 3, size=(9, 9, 2))
        field = build_kernel_field(fwd, bwd, 0.7)
        x = rng.normal(size=(9, 9, 3))
        y = rng.normal(size=(9, 9, 3))
        lhs = apply_blur(field, 0.3 * x + 1.7 * y)
        rhs = 0.3 * apply_blur(field, x) + 1.7 * apply_blur(field, y)
        assert np.abs(lhs - rhs).max() < 1e-10

    def test_adjoint_identity_random_triples(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(100):
            fwd = rng.uniform(-4, 4, size=(16, 16, 2))
            bwd = rng.uniform(-4, 4, size=(16, 16, 2))
            field = build_kernel_field(fwd, bwd, 0.8)
            x = rng.normal(size=(16, 16, 3))
            y = rng.normal(size=(16, 16, 3))
            lhs = float((apply_blur(field, x) * y).sum())
            rhs = float((x * apply_blur_adjoint(field, y)).sum())
            worst = max(worst, abs(lhs - rhs) / max(abs(lhs), 1e-12))
        assert worst <= 1e-8

    def test_adjoint_of_streak_is_reversed(self):
        kernel = PixelKernel(np.array([[1, 0], [2, 0]]), np.array([0.5, 0.5]))
        field = BlurKernelField.from_uniform(16, 16, kernel)
        img = np.zeros((16, 16, 1))
        img[8, 8] = 1.0
        fwd_img = apply_blur(field, img)
        assert fwd_img[8, 9] == 0.0 and fwd_img[8, 6] == 0.5 and fwd_img[8, 7] == 0.5
        back = apply_blur_adjoint(field, img)
        assert back[8, 9] == 0.5 and back[8, 10] == 0.5 and back[8, 7] == 0.0


class TestRegionBlurValues:
    def test_matches_full_operator_on_interior_and_border(self):
        rng = np.random.default_rng(21)
        h, w = 14, 18
        img = rng.uniform(size=(h, w, 3))
        fwd = rng.uniform(-3, 3, size=(h, w, 2))
        bwd = rng.uniform(-3, 3, size=(h, w, 2))
        field = build_kernel_field(fwd, bwd, 0.8)
        full = apply_blur(field, img)
        for (y0, y1, x0, x1) in ((0, h, 0, w), (3, 9, 2, 11), (0, 5, 10, 18)):
            got = blur_values_over_region(
                fwd[y0:y1, x0:x1], bwd[y0:y1, x0:x1], 0.8, img, (x0, y0)
            )
            assert np.abs(got - full[y0:y1, x0:x1]).max() < 1e-12

    def test_static_region(self):
        img = np.random.default_rng(1).uniform(size=(6, 6, 3))
        z = np.zeros((6, 6, 2))
        got = blur_values_over_region(z, z, 1.0, img, (0, 0))
        assert np.array_equal(got, img)
