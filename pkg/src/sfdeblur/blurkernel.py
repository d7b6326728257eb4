"""Pixel-wise bidirectional motion-blur kernels and the induced linear operator.

Each pixel's kernel is the union of two directed half-segments
[0, (tau/2) u_fwd] and [0, (tau/2) u_bwd] traced from the pixel center, with
uniform density along each segment and total mass 1 split between the halves
in proportion to their lengths. Segments are discretized with 32 midpoint
samples per pixel of length and splatted bilinearly onto integer tap offsets.

The blur operator applies every pixel's kernel to a latent image with
replicate boundary handling (out-of-image taps read the nearest edge pixel).
It is materialized as a scipy.sparse CSR matrix, so the adjoint is the exact
matrix transpose.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DataError
from .imageops import ensure_image

SAMPLES_PER_PIXEL = 32
_EPS_LEN = 1e-12


@dataclass(frozen=True)
class PixelKernel:
    """One pixel's blur kernel: integer tap offsets (K, 2) and weights (K,)."""

    offsets: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        off = np.asarray(self.offsets, dtype=np.int64).reshape(-1, 2)
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if len(off) != len(w):
            raise ValueError("offsets/weights length mismatch")
        if len(off) == 0:
            raise ValueError("kernel must have at least one tap")
        if np.any(w < 0):
            raise ValueError("kernel weights must be non-negative")
        keys = off[:, 0] * (1 << 32) + off[:, 1]
        if len(np.unique(keys)) != len(keys):
            raise ValueError("kernel taps must be distinct")
        object.__setattr__(self, "offsets", off)
        object.__setattr__(self, "weights", w)

    @property
    def mass(self):
        return float(self.weights.sum())


def _half_segment_samples(end_xy, mass, samples_per_pixel):
    """Midpoint sample positions and weights for segments [0, end] per pixel.

    end_xy: (N, 2) segment endpoints, mass: (N,) total mass per segment.
    Returns (pixel_index, sample_xy, sample_weight) flat arrays.
    """
    lengths = np.linalg.norm(end_xy, axis=1)
    active = (lengths > _EPS_LEN) & (mass > 0)
    idx = np.flatnonzero(active)
    if len(idx) == 0:
        return (
            np.zeros(0, dtype=np.int64),
            np.zeros((0, 2)),
            np.zeros(0),
        )
    n_samples = np.ceil(samples_per_pixel * lengths[idx]).astype(np.int64)
    np.maximum(n_samples, 1, out=n_samples)
    pix = np.repeat(idx, n_samples)
    # Per-sample index j within its segment: 0 .. n_i - 1.
    starts = np.concatenate([[0], np.cumsum(n_samples)[:-1]])
    j = np.arange(len(pix), dtype=np.int64) - np.repeat(starts, n_samples)
    n_per = np.repeat(n_samples, n_samples)
    s = (j + 0.5) / n_per
    xy = end_xy[pix] * s[:, None]
    w = np.repeat(mass[idx] / n_samples, n_samples)
    return pix, xy, w


def _splat_offsets(pix, xy, w):
    """Bilinear splat of samples onto integer offsets: (pixel, ox, oy, weight)."""
    x0 = np.floor(xy[:, 0]).astype(np.int64)
    y0 = np.floor(xy[:, 1]).astype(np.int64)
    fx = xy[:, 0] - x0
    fy = xy[:, 1] - y0
    pix4 = np.concatenate([pix, pix, pix, pix])
    ox = np.concatenate([x0, x0 + 1, x0, x0 + 1])
    oy = np.concatenate([y0, y0, y0 + 1, y0 + 1])
    ww = np.concatenate(
        [w * (1 - fx) * (1 - fy), w * fx * (1 - fy), w * (1 - fx) * fy, w * fx * fy]
    )
    return pix4, ox, oy, ww


class BlurKernelField:
    """Per-pixel blur kernels over an (H, W) grid plus the sparse blur operator."""

    def __init__(self, width, height, tap_pixel, tap_ox, tap_oy, tap_weight):
        self.width = int(width)
        self.height = int(height)
        order = np.lexsort((tap_oy, tap_ox, tap_pixel))
        self.tap_pixel = np.asarray(tap_pixel, dtype=np.int64)[order]
        self.tap_ox = np.asarray(tap_ox, dtype=np.int64)[order]
        self.tap_oy = np.asarray(tap_oy, dtype=np.int64)[order]
        self.tap_weight = np.asarray(tap_weight, dtype=np.float64)[order]
        n = self.width * self.height
        counts = np.bincount(self.tap_pixel, minlength=n)
        if np.any(counts == 0):
            raise ValueError("every pixel needs at least one kernel tap")
        self._row_start = np.concatenate([[0], np.cumsum(counts)])
        # Absolute tap coordinates with replicate clipping at the borders.
        px = self.tap_pixel % self.width
        py = self.tap_pixel // self.width
        ax = np.clip(px + self.tap_ox, 0, self.width - 1)
        ay = np.clip(py + self.tap_oy, 0, self.height - 1)
        self._matrix = sp.csr_matrix(
            (self.tap_weight, (self.tap_pixel, ay * self.width + ax)), shape=(n, n)
        )
        self._matrix_t = None

    @property
    def matrix(self):
        return self._matrix

    @property
    def matrix_adjoint(self):
        if self._matrix_t is None:
            self._matrix_t = self._matrix.T.tocsr()
        return self._matrix_t

    def kernel_at(self, x, y):
        p = int(y) * self.width + int(x)
        lo, hi = self._row_start[p], self._row_start[p + 1]
        return PixelKernel(
            np.stack([self.tap_ox[lo:hi], self.tap_oy[lo:hi]], axis=1),
            self.tap_weight[lo:hi].copy(),
        )

    def kernel_masses(self):
        """Total kernel mass per pixel as an (H, W) array."""
        n = self.width * self.height
        m = np.bincount(self.tap_pixel, weights=self.tap_weight, minlength=n)
        return m.reshape(self.height, self.width)

    def max_radius(self):
        """Largest absolute tap offset component over the whole field."""
        if len(self.tap_ox) == 0:
            return 0
        return int(max(np.abs(self.tap_ox).max(), np.abs(self.tap_oy).max()))

    def visualize_kernel(self, x, y):
        """Small grayscale raster of one pixel's kernel, peak-normalized."""
        k = self.kernel_at(x, y)
        r = int(np.abs(k.offsets).max()) + 1
        img = np.zeros((2 * r + 1, 2 * r + 1))
        img[k.offsets[:, 1] + r, k.offsets[:, 0] + r] = k.weights
        peak = img.max()
        return img / peak if peak > 0 else img

    @classmethod
    def from_kernel_lists(cls, width, height, kernels):
        """Build from an explicit kernel per pixel (row-major list of PixelKernel)."""
        if len(kernels) != width * height:
            raise ValueError("need one kernel per pixel")
        pix = np.concatenate(
            [np.full(len(k.weights), i, dtype=np.int64) for i, k in enumerate(kernels)]
        )
        ox = np.concatenate([k.offsets[:, 0] for k in kernels])
        oy = np.concatenate([k.offsets[:, 1] for k in kernels])
        w = np.concatenate([k.weights for k in kernels])
        return cls(width, height, pix, ox, oy, w)

    @classmethod
    def from_uniform(cls, width, height, kernel):
        """Same explicit kernel at every pixel."""
        n = width * height
        k = len(kernel.weights)
        pix = np.repeat(np.arange(n, dtype=np.int64), k)
        ox = np.tile(kernel.offsets[:, 0], n)
        oy = np.tile(kernel.offsets[:, 1], n)
        w = np.tile(kernel.weights, n)
        return cls(width, height, pix, ox, oy, w)


def pixel_kernel_taps(u_fwd, u_bwd, tau, samples_per_pixel=SAMPLES_PER_PIXEL):
    """Aggregated taps of a single pixel's kernel (thin wrapper over the field path)."""
    field = build_kernel_field(
        np.asarray(u_fwd, dtype=np.float64).reshape(1, 1, 2),
        np.asarray(u_bwd, dtype=np.float64).reshape(1, 1, 2),
        tau,
        samples_per_pixel=samples_per_pixel,
    )
    return field.kernel_at(0, 0)


def blur_values_at(flow_fwd, flow_bwd, tau, image, xy,
                   samples_per_pixel=SAMPLES_PER_PIXEL):
    """Blurred values at scattered pixels without building a kernel field.

    flow_fwd/flow_bwd are (N, 2) per-pixel flows, xy the (N, 2) integer
    absolute (x, y) positions of those pixels inside `image`.  Accumulates
    the same segment samples build_kernel_field would aggregate, gathering
    sources clipped to the image bounds.  Returns the (N, C) blurred values.
    """
    if not 0 < tau <= 1:
        raise ValueError("tau must lie in (0, 1]")
    fwd = np.asarray(flow_fwd, dtype=np.float64)
    bwd = np.asarray(flow_bwd, dtype=np.float64)
    if fwd.shape != bwd.shape or fwd.ndim != 2 or fwd.shape[1] != 2:
        raise ValueError("flows must both be (N, 2)")
    if not (np.isfinite(fwd).all() and np.isfinite(bwd).all()):
        raise DataError("blur flows must be finite")
    img = np.asarray(image, dtype=np.float64)
    height, width = img.shape[:2]
    pos = np.asarray(xy, dtype=np.int64)
    n = len(fwd)
    end_f = (tau / 2.0) * fwd
    end_b = (tau / 2.0) * bwd
    len_f = np.linalg.norm(end_f, axis=1)
    len_b = np.linalg.norm(end_b, axis=1)
    total = len_f + len_b
    static = total <= _EPS_LEN
    safe_total = np.where(static, 1.0, total)
    mass_f = np.where(static, 0.0, len_f / safe_total)
    mass_b = np.where(static, 0.0, len_b / safe_total)

    c = img.shape[2]
    out = np.zeros((n, c))
    parts = []
    for end, mass in ((end_f, mass_f), (end_b, mass_b)):
        pix, sxy, wt = _half_segment_samples(end, mass, samples_per_pixel)
        if len(pix) == 0:
            continue
        pix4, ox, oy, ww = _splat_offsets(pix, sxy, wt)
        ax = np.clip(pos[pix4, 0] + ox, 0, width - 1)
        ay = np.clip(pos[pix4, 1] + oy, 0, height - 1)
        parts.append((pix4, ay * width + ax, ww))
    if parts:
        pix4 = np.concatenate([p[0] for p in parts])
        flat = np.concatenate([p[1] for p in parts])
        ww = np.concatenate([p[2] for p in parts])
        vals = img.reshape(-1, c)[flat]
        for ch in range(c):
            out[:, ch] += np.bincount(pix4, weights=vals[:, ch] * ww, minlength=n)
    st = np.flatnonzero(static)
    if len(st):
        ax = np.clip(pos[st, 0], 0, width - 1)
        ay = np.clip(pos[st, 1], 0, height - 1)
        out[st] += img[ay, ax, :]
    return out


def blur_values_over_region(flow_fwd, flow_bwd, tau, image, origin,
                            samples_per_pixel=SAMPLES_PER_PIXEL):
    """Blurred values over a sub-window without building a kernel field.

    `origin` is the (x0, y0) of the window inside the image.  Returns the
    (h, w, C) blurred window.
    """
    fwd = np.asarray(flow_fwd, dtype=np.float64)
    bwd = np.asarray(flow_bwd, dtype=np.float64)
    if fwd.shape != bwd.shape or fwd.ndim != 3 or fwd.shape[2] != 2:
        raise ValueError("flows must both be (H, W, 2)")
    rh, rw = fwd.shape[:2]
    x0, y0 = origin
    xs = x0 + np.tile(np.arange(rw, dtype=np.int64), rh)
    ys = y0 + np.repeat(np.arange(rh, dtype=np.int64), rw)
    out = blur_values_at(
        fwd.reshape(-1, 2), bwd.reshape(-1, 2), tau, image,
        np.stack([xs, ys], axis=1), samples_per_pixel=samples_per_pixel,
    )
    return out.reshape(rh, rw, out.shape[1])


def build_kernel_field(flow_fwd, flow_bwd, tau, samples_per_pixel=SAMPLES_PER_PIXEL):
    """Kernel field from dense forward/backward flows (H, W, 2) and duty cycle tau."""
    if not 0 < tau <= 1:
        raise ValueError("tau must lie in (0, 1]")
    fwd = np.asarray(flow_fwd, dtype=np.float64)
    bwd = np.asarray(flow_bwd, dtype=np.float64)
    if fwd.shape != bwd.shape or fwd.ndim != 3 or fwd.shape[2] != 2:
        raise ValueError("flows must both be (H, W, 2)")
    if not (np.isfinite(fwd).all() and np.isfinite(bwd).all()):
        raise DataError("blur flows must be finite")
    h, w = fwd.shape[:2]
    end_f = (tau / 2.0) * fwd.reshape(-1, 2)
    end_b = (tau / 2.0) * bwd.reshape(-1, 2)
    len_f = np.linalg.norm(end_f, axis=1)
    len_b = np.linalg.norm(end_b, axis=1)
    total = len_f + len_b
    static = total <= _EPS_LEN
    safe_total = np.where(static, 1.0, total)
    mass_f = np.where(static, 0.0, len_f / safe_total)
    mass_b = np.where(static, 0.0, len_b / safe_total)

    parts = []
    for end, mass in ((end_f, mass_f), (end_b, mass_b)):
        pix, xy, wt = _half_segment_samples(end, mass, samples_per_pixel)
        if len(pix):
            parts.append(_splat_offsets(pix, xy, wt))
    st = np.flatnonzero(static)
    if len(st):
        parts.append(
            (st, np.zeros(len(st), dtype=np.int64), np.zeros(len(st), dtype=np.int64),
             np.ones(len(st)))
        )
    pix = np.concatenate([p[0] for p in parts])
    ox = np.concatenate([p[1] for p in parts])
    oy = np.concatenate([p[2] for p in parts])
    wt = np.concatenate([p[3] for p in parts])

    # Aggregate duplicate (pixel, offset) taps and drop zero-weight ones.
    radius = int(max(np.abs(ox).max(), np.abs(oy).max())) + 1
    span = 2 * radius + 1
    key = (pix * span + (ox + radius)) * span + (oy + radius)
    uniq, inverse = np.unique(key, return_inverse=True)
    agg = np.bincount(inverse, weights=wt, minlength=len(uniq))
    keep = agg > 0
    uniq = uniq[keep]
    agg = agg[keep]
    u_oy = uniq % span - radius
    u_ox = (uniq // span) % span - radius
    u_pix = uniq // (span * span)
    return BlurKernelField(w, h, u_pix, u_ox, u_oy, agg)


def apply_blur(field, image):
    """B = A L: apply the kernel field to an (H, W, C) image."""
    a = ensure_image(image)
    h, w, c = a.shape
    if (h, w) != (field.height, field.width):
        raise ValueError("image shape does not match kernel field")
    flat = a.reshape(-1, c)
    return (field.matrix @ flat).reshape(h, w, c)


def apply_blur_adjoint(field, image):
    """A^T applied to an (H, W, C) image; exact transpose of apply_blur."""
    a = ensure_image(image)
    h, w, c = a.shape
    if (h, w) != (field.height, field.width):
        raise ValueError("image shape does not match kernel field")
    flat = a.reshape(-1, c)
    return (field.matrix_adjoint @ flat).reshape(h, w, c)
