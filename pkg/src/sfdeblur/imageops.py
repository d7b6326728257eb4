"""Low-level raster helpers shared across the package.

Images are float64 arrays of shape (H, W, C) with values nominally in [0, 1].
Pixel coordinates are (x, y) with x along the width axis; the sample point
(0, 0) is the center of the top-left pixel.
"""

import numpy as np

from .errors import UndefinedMetricError


def ensure_image(arr):
    """Return arr as float64 (H, W, C), adding a channel axis if needed."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ValueError(f"expected 2D or 3D array, got shape {a.shape}")
    return a


def to_gray(img):
    """Channel mean as a single-channel (H, W) array."""
    a = ensure_image(img)
    return a.mean(axis=2)


def bilinear_sample(img, xy):
    """Sample img at float positions xy (N, 2).

    Returns (values (N, C), valid (N,)). Positions outside
    [0, W-1] x [0, H-1] are flagged invalid; their values are computed from
    clipped coordinates and should be ignored by the caller.
    """
    a = ensure_image(img)
    h, w = a.shape[:2]
    xy = np.asarray(xy, dtype=np.float64)
    x = xy[..., 0]
    y = xy[..., 1]
    valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(xc).astype(np.intp), w - 2) if w > 1 else np.zeros_like(xc, dtype=np.intp)
    y0 = np.minimum(np.floor(yc).astype(np.intp), h - 2) if h > 1 else np.zeros_like(yc, dtype=np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xc - x0)[..., None]
    fy = (yc - y0)[..., None]
    v00 = a[y0, x0]
    v01 = a[y0, x1]
    v10 = a[y1, x0]
    v11 = a[y1, x1]
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bot * fy, valid


def bilinear_splat(shape, xy, values, out=None):
    """Scatter values at float positions xy into an (H, W) accumulator.

    The adjoint of bilinear sampling: each value is distributed over the four
    surrounding integer pixels with bilinear weights. Out-of-range positions
    are dropped. Returns the accumulator.
    """
    h, w = shape
    if out is None:
        out = np.zeros((h, w), dtype=np.float64)
    xy = np.asarray(xy, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    x = xy[:, 0]
    y = xy[:, 1]
    keep = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    if not keep.all():
        x = x[keep]
        y = y[keep]
        values = values[keep]
    x0 = np.minimum(np.floor(x).astype(np.intp), w - 2) if w > 1 else np.zeros_like(x, dtype=np.intp)
    y0 = np.minimum(np.floor(y).astype(np.intp), h - 2) if h > 1 else np.zeros_like(y, dtype=np.intp)
    fx = x - x0
    fy = y - y0
    flat = out.ravel()
    base = y0 * w + x0
    np.add.at(flat, base, values * (1 - fx) * (1 - fy))
    np.add.at(flat, base + 1, values * fx * (1 - fy))
    np.add.at(flat, base + w, values * (1 - fx) * fy)
    np.add.at(flat, base + w + 1, values * fx * fy)
    return out


def grad_x(a):
    """Forward difference along width; last column is zero."""
    g = np.zeros_like(a)
    g[:, :-1] = a[:, 1:] - a[:, :-1]
    return g


def grad_y(a):
    """Forward difference along height; last row is zero."""
    g = np.zeros_like(a)
    g[:-1] = a[1:] - a[:-1]
    return g


def grad_x_adjoint(p):
    """Exact adjoint of grad_x: <grad_x a, p> == <a, grad_x_adjoint p>."""
    g = np.zeros_like(p)
    g[:, 0] = -p[:, 0]
    g[:, 1:-1] = p[:, :-2] - p[:, 1:-1]
    g[:, -1] = p[:, -2]
    return g


def grad_y_adjoint(p):
    g = np.zeros_like(p)
    g[0] = -p[0]
    g[1:-1] = p[:-2] - p[1:-1]
    g[-1] = p[-2]
    return g


def total_variation(img):
    """Anisotropic TV: sum of |forward differences| over both axes, all channels."""
    a = ensure_image(img)
    return float(np.abs(np.diff(a, axis=0)).sum() + np.abs(np.diff(a, axis=1)).sum())


def psnr(estimate, reference, cap=99.0):
    """Peak signal-to-noise ratio in dB for unit-range images, capped."""
    a = ensure_image(estimate)
    b = ensure_image(reference)
    if a.shape != b.shape:
        raise UndefinedMetricError("image dimensions differ")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


def ssim(estimate, reference, window=8):
    """Mean SSIM over non-overlapping windows with uniform weighting.

    Single-scale, C1 = 0.01^2, C2 = 0.03^2, computed on the luminance
    channel (channel mean) over full window x window blocks and averaged.
    """
    a = ensure_image(estimate)
    b = ensure_image(reference)
    if a.shape != b.shape:
        raise UndefinedMetricError("image dimensions differ")
    ga = to_gray(a)
    gb = to_gray(b)
    h, w = ga.shape
    ny = h // window
    nx = w // window
    if ny == 0 or nx == 0:
        raise UndefinedMetricError("image smaller than SSIM window")
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    ab = ga[: ny * window, : nx * window].reshape(ny, window, nx, window)
    bb = gb[: ny * window, : nx * window].reshape(ny, window, nx, window)
    mu_a = ab.mean(axis=(1, 3))
    mu_b = bb.mean(axis=(1, 3))
    var_a = (ab ** 2).mean(axis=(1, 3)) - mu_a ** 2
    var_b = (bb ** 2).mean(axis=(1, 3)) - mu_b ** 2
    cov = (ab * bb).mean(axis=(1, 3)) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    )
    return float(s.mean())
