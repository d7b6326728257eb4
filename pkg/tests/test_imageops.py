"""Unit tests for sampling, gradients and image-quality scalars."""

import numpy as np
import pytest

from sfdeblur.errors import UndefinedMetricError
from sfdeblur.imageops import (
    bilinear_sample,
    bilinear_splat,
    grad_x,
    grad_x_adjoint,
    grad_y,
    grad_y_adjoint,
    psnr,
    ssim,
    total_variation,
)


def _ramp(h, w, c=3):
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.stack([gx, gy, gx + gy], axis=-1)[:, :, :c]
    return img


class TestBilinearSample:
    def test_exact_on_grid_points(self):
        img = _ramp(12, 17)
        xy = np.array([[3.0, 4.0], [0.0, 0.0], [16.0, 11.0]])
        vals, inside = bilinear_sample(img, xy)
        assert inside.all()
        assert np.allclose(vals[0], img[4, 3])
        assert np.allclose(vals[2], img[11, 16])

    def test_linear_function_reproduced_at_subpixel(self):
        img = _ramp(20, 20)
        rng = np.random.default_rng(2)
        xy = rng.uniform(0.5, 18.5, size=(200, 2))
        vals, inside = bilinear_sample(img, xy)
        assert inside.all()
        expect = np.stack([xy[:, 0], xy[:, 1], xy[:, 0] + xy[:, 1]], axis=-1)
        assert np.abs(vals - expect).max() < 1e-12

    def test_outside_flagged(self):
        img = _ramp(8, 8)
        vals, inside = bilinear_sample(img, np.array([[-1.0, 2.0], [7.5, 3.0]]))
        assert not inside[0]
        assert not inside[1]

    def test_splat_is_adjoint_of_sample(self):
        rng = np.random.default_rng(9)
        img = rng.normal(size=(10, 14, 1))
        xy = np.stack([
            rng.uniform(0.0, 13.0, size=60),
            rng.uniform(0.0, 9.0, size=60),
        ], axis=-1)
        vals, inside = bilinear_sample(img, xy)
        assert inside.all()
        y = rng.normal(size=len(xy))
        splat = bilinear_splat(img.shape[:2], xy, y)
        lhs = float((vals[:, 0] * y).sum())
        rhs = float((img[:, :, 0] * splat).sum())
        assert abs(lhs - rhs) < 1e-10


class TestGradients:
    def test_forward_difference_values(self):
        a = _ramp(6, 7)
        gx = grad_x(a)
        gy = grad_y(a)
        assert np.allclose(gx[:, :-1, 0], 1.0)
        assert np.allclose(gx[:, -1], 0.0)
        assert np.allclose(gy[:-1, :, 1], 1.0)
        assert np.allclose(gy[-1, :], 0.0)

    def test_gradient_adjoints(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            a = rng.normal(size=(9, 11, 3))
            p = rng.normal(size=(9, 11, 3))
            assert abs(
                (grad_x(a) * p).sum() - (a * grad_x_adjoint(p)).sum()
            ) < 1e-10
            assert abs(
                (grad_y(a) * p).sum() - (a * grad_y_adjoint(p)).sum()
            ) < 1e-10

    def test_total_variation_of_constant_is_zero(self):
        assert total_variation(np.full((8, 8, 3), 0.37)) == 0.0

    def test_total_variation_of_step(self):
        img = np.zeros((4, 4, 1))
        img[:, 2:] = 1.0
        # one unit jump per row at one column, isotropic norm
        assert abs(total_variation(img) - 4.0) < 1e-12


class TestQualityScalars:
    def test_psnr_known_value(self):
        a = np.zeros((16, 16, 3))
        b = np.full((16, 16, 3), 0.1)
        # mse = 0.01 -> 10*log10(1/0.01) = 20 dB
        assert abs(psnr(a, b) - 20.0) < 1e-9

    def test_psnr_identical_capped(self):
        a = np.random.default_rng(0).uniform(size=(8, 8, 3))
        assert psnr(a, a) == 99.0

    def test_psnr_shape_mismatch(self):
        with pytest.raises(UndefinedMetricError):
            psnr(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)))

    def test_ssim_identical_is_one(self):
        img = np.random.default_rng(1).uniform(size=(32, 32, 3))
        assert abs(ssim(img, img) - 1.0) < 1e-12

    def test_ssim_checkerboard_against_inverse(self):
        gy, gx = np.mgrid[0:32, 0:32]
        a = ((gx + gy) % 2).astype(np.float64)[:, :, None]
        b = 1.0 - a
        # same mean and variance per window, covariance = -variance:
        # ssim = (2*mu^2+c1)(c2-2*var)/((2*mu^2+c1)(2*var+c2)) with
        # mu=0.5, var=0.25, c1=(0.01)^2, c2=(0.03)^2
        c2 = 0.03 ** 2
        expect = (c2 - 0.5) / (0.5 + c2)
        assert abs(ssim(a, b) - expect) < 1e-9

    def test_ssim_decreases_with_noise(self):
        rng = np.random.default_rng(6)
        img = rng.uniform(size=(40, 40, 3))
        noisy1 = np.clip(img + rng.normal(0, 0.05, img.shape), 0, 1)
        noisy2 = np.clip(img + rng.normal(0, 0.20, img.shape), 0, 1)
        assert ssim(img, noisy2) < ssim(img, noisy1) < 1.0
