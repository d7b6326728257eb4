"""Superpixel segmentation of the reference view.

SLIC-style local k-means over (x, y, color, disparity) features with grid
seeding, followed by connectivity enforcement. The result is a static
partition: region pixel lists, the adjacency graph and per-edge boundary
pixel sets used by the pairwise energy terms.

Boundary pixels of an adjacent pair (i, j) are the pixels of either region
with a 4-neighbor in the other; both sides are included so disparity
differences are evaluated on the full two-pixel-wide seam.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError
from .imageops import ensure_image, to_gray


@dataclass
class Superpixelization:
    """Partition of the reference grid into 4-connected superpixels."""

    labels: np.ndarray
    regions: list = field(default=None)
    adjacency: dict = field(default=None)
    boundaries: dict = field(default=None)

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise DataError("labels must be (H, W)")
        if lab.min() < 0:
            raise DataError("labels must be non-negative")
        self.labels = lab.astype(np.int32)
        self.count = int(lab.max()) + 1
        present = np.unique(lab)
        if len(present) != self.count:
            raise DataError("label ids must be contiguous from 0")
        if self.regions is None:
            self._build_regions()
        if self.adjacency is None or self.boundaries is None:
            self._build_graph()

    def _build_regions(self):
        h, w = self.labels.shape
        order = np.argsort(self.labels.ravel(), kind="stable")
        counts = np.bincount(self.labels.ravel(), minlength=self.count)
        splits = np.cumsum(counts)[:-1]
        flat = np.arange(h * w, dtype=np.int64)[order]
        self.regions = [
            np.stack([chunk // w, chunk % w], axis=1) for chunk in np.split(flat, splits)
        ]

    def _build_graph(self):
        lab = self.labels
        h, w = lab.shape
        pairs = []
        pix_a = []
        pix_b = []
        # Horizontal and vertical 4-neighbor label changes.
        for (sl_a, sl_b, off) in (
            ((slice(None), slice(None, -1)), (slice(None), slice(1, None)), (0, 1)),
            ((slice(None, -1), slice(None)), (slice(1, None), slice(None)), (1, 0)),
        ):
            la = lab[sl_a]
            lb = lab[sl_b]
            dy, dx = np.nonzero(la != lb)
            if off == (0, 1):
                ya, xa = dy, dx
                yb, xb = dy, dx + 1
            else:
                ya, xa = dy, dx
                yb, xb = dy + 1, dx
            pairs.append(np.stack([la[dy, dx], lb[dy, dx]], axis=1))
            pix_a.append(np.stack([ya, xa], axis=1))
            pix_b.append(np.stack([yb, xb], axis=1))
        self.adjacency = {i: set() for i in range(self.count)}
        bnd = {}
        if pairs:
            pr = np.concatenate(pairs)
            pa = np.concatenate(pix_a)
            pb = np.concatenate(pix_b)
            lo = np.minimum(pr[:, 0], pr[:, 1])
            hi = np.maximum(pr[:, 0], pr[:, 1])
            for i, j, a, b in zip(lo, hi, pa, pb):
                key = (int(i), int(j))
                bnd.setdefault(key, []).append((a, b))
            self.boundaries = {}
            for (i, j), lst in bnd.items():
                self.adjacency[i].add(j)
                self.adjacency[j].add(i)
                pts = np.concatenate([np.stack(p) for p in lst])
                # Dedupe (a pixel can border the pair through several seams),
                # keep row-major order.
                keys = pts[:, 0] * self.labels.shape[1] + pts[:, 1]
                uniq = np.unique(keys)
                self.boundaries[(i, j)] = np.stack(
                    [uniq // self.labels.shape[1], uniq % self.labels.shape[1]], axis=1
                )
        else:
            self.boundaries = {}

    def boundary(self, i, j):
        key = (min(i, j), max(i, j))
        return self.boundaries[key]

    def region_xy(self, i):
        """Region pixel centers as float (N, 2) in (x, y) order."""
        r = self.regions[i]
        return np.stack([r[:, 1], r[:, 0]], axis=1).astype(np.float64)

    def region_bbox(self, i):
        r = self.regions[i]
        return int(r[:, 0].min()), int(r[:, 0].max()), int(r[:, 1].min()), int(r[:, 1].max())


def from_labels(labels, check_connectivity=False):
    """Superpixelization from an explicit label raster (used by tests and synth)."""
    seg = Superpixelization(labels)
    if check_connectivity:
        for i in range(seg.count):
            mask = seg.labels == i
            _, num = ndimage.label(mask)
            if num != 1:
                raise DataError(f"region {i} is not 4-connected")
    return seg


def segment(image, disparity, target_count, compactness=10.0, disparity_weight=2.0,
            iterations=10):
    """SLIC-style superpixels on (x, y, color, disparity) features.

    disparity is a DisparityMap or None; invalid pixels take the mean valid
    disparity so the feature stays finite. Deterministic for fixed inputs.
    """
    img = ensure_image(image)
    h, w, c = img.shape
    if target_count < 1 or target_count > h * w:
        raise ConfigError(f"superpixel target {target_count} out of range")
    if disparity is None:
        disp = np.zeros((h, w))
        dvalid = np.zeros((h, w), dtype=bool)
    else:
        disp = disparity.values
        dvalid = disparity.valid
    fill = float(disp[dvalid].mean()) if dvalid.any() else 0.0
    dfeat = np.where(dvalid, disp, fill)

    step = max(int(np.sqrt(h * w / target_count)), 2)
    gy, gx = np.mgrid[step // 2:h:step, step // 2:w:step]
    seeds = np.stack([gy.ravel(), gx.ravel()], axis=1)
    # Nudge each seed to the lowest-gradient pixel in its 3x3 neighborhood.
    gray = to_gray(img)
    gmag = np.hypot(*np.gradient(gray))
    nudged = []
    for sy, sx in seeds:
        y0, y1 = max(sy - 1, 0), min(sy + 2, h)
        x0, x1 = max(sx - 1, 0), min(sx + 2, w)
        patch = gmag[y0:y1, x0:x1]
        k = np.argmin(patch)
        nudged.append((y0 + k // patch.shape[1], x0 + k % patch.shape[1]))
    seeds = np.array(nudged)

    n = len(seeds)
    centers_pos = seeds.astype(np.float64)
    centers_col = img[seeds[:, 0], seeds[:, 1]]
    centers_disp = dfeat[seeds[:, 0], seeds[:, 1]]
    spatial_scale = compactness / step
    ys, xs = np.mgrid[0:h, 0:w]

    labels = np.zeros((h, w), dtype=np.int64)
    dist = np.full((h, w), np.inf)
    for _ in range(iterations):
        dist.fill(np.inf)
        for i in range(n):
            cy, cx = centers_pos[i]
            y0, y1 = max(int(cy) - step, 0), min(int(cy) + step + 1, h)
            x0, x1 = max(int(cx) - step, 0), min(int(cx) + step + 1, w)
            if y0 >= y1 or x0 >= x1:
                continue
            dc = ((img[y0:y1, x0:x1] - centers_col[i]) ** 2).sum(axis=2)
            dd = (dfeat[y0:y1, x0:x1] - centers_disp[i]) ** 2
            ds = (ys[y0:y1, x0:x1] - cy) ** 2 + (xs[y0:y1, x0:x1] - cx) ** 2
            d = dc + disparity_weight * dd + (spatial_scale ** 2) * ds
            win = d < dist[y0:y1, x0:x1]
            dist[y0:y1, x0:x1][win] = d[win]
            labels[y0:y1, x0:x1][win] = i
        flat = labels.ravel()
        cnt = np.bincount(flat, minlength=n).astype(np.float64)
        cnt[cnt == 0] = 1
        centers_pos = np.stack(
            [np.bincount(flat, ys.ravel(), n), np.bincount(flat, xs.ravel(), n)], axis=1
        ) / cnt[:, None]
        centers_col = np.stack(
            [np.bincount(flat, img[:, :, ch].ravel(), n) for ch in range(c)], axis=1
        ) / cnt[:, None]
        centers_disp = np.bincount(flat, dfeat.ravel(), n) / cnt

    labels = _enforce_connectivity(labels, min_size=max(step * step // 4, 4))
    return Superpixelization(labels)


def _enforce_connectivity(labels, min_size):
    """Split disconnected label components; absorb tiny ones into neighbors."""
    h, w = labels.shape
    comp = np.full((h, w), -1, dtype=np.int64)
    next_id = 0
    for i in np.unique(labels):
        mask = labels == i
        cc, num = ndimage.label(mask)
        for k in range(1, num + 1):
            comp[cc == k] = next_id
            next_id += 1
    sizes = np.bincount(comp.ravel())
    # Absorb small components into the largest 4-neighbor component, by
    # increasing size so chains of tiny fragments collapse deterministically.
    order = np.argsort(sizes, kind="stable")
    for cid in order:
        if sizes[cid] >= min_size:
            continue
        mask = comp == cid
        dil = ndimage.binary_dilation(mask, structure=np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]]))
        neigh = np.unique(comp[dil & ~mask])
        neigh = neigh[neigh != cid]
        if len(neigh) == 0:
            continue
        target = neigh[np.argmax(sizes[neigh])]
        comp[mask] = target
        sizes[target] += sizes[cid]
        sizes[cid] = 0
    # Compact ids to 0..K-1 in first-appearance (row-major) order.
    uniq, inv = np.unique(comp.ravel(), return_inverse=True)
    first = np.full(len(uniq), comp.size, dtype=np.int64)
    np.minimum.at(first, inv, np.arange(comp.size))
    rank = np.argsort(np.argsort(first, kind="stable"), kind="stable")
    return rank[inv].reshape(h, w).astype(np.int32)
