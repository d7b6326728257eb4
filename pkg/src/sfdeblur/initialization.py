"""Bootstrap estimators: disparity, sparse matches, motion hypotheses, planes.

The pipeline seeds its variational stage from classical components: census
semi-global matching for a dense-ish disparity map, Harris-corner patches
matched by normalized cross-correlation for sparse correspondences, greedy
RANSAC with three-point Gauss-Newton pose fits for rigid motion hypotheses,
and robust per-superpixel plane fits to the matched disparities.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InitializationError
from .geometry import pixel_rays, plane_from_disparity_samples, Plane, RigidMotion
from .imageops import to_gray
from .window import DisparityMap

SGM_P1 = 8.0
SGM_P2 = 32.0
_BIG = 1e9


# ---------------------------------------------------------------------------
# Census SGM disparity


def census_transform(gray, radius=2):
    """Per-pixel census bitfield over the (2r+1)^2 - 1 neighborhood."""
    h, w = gray.shape
    padded = np.pad(gray, radius, mode="edge")
    bits = np.zeros((h, w), dtype=np.uint32)
    bit = np.uint32(1)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx == 0:
                continue
            neigh = padded[radius + dy : radius + dy + h, radius + dx : radius + dx + w]
            bits |= np.where(neigh > gray, bit, np.uint32(0))
            bit = np.uint32(bit << np.uint32(1))
    return bits


def _sgm_combine(lp, p1, p2):
    """Path-cost update: min over same/near/far disparity moves, normalized."""
    m = lp.min(axis=-1, keepdims=True)
    up = np.full_like(lp, _BIG)
    dn = np.full_like(lp, _BIG)
    up[..., 1:] = lp[..., :-1] + p1
    dn[..., :-1] = lp[..., 1:] + p1
    cand = np.minimum(np.minimum(lp, up), np.minimum(dn, m + p2))
    return cand - m


def _aggregate_direction(cost, p1, p2, dy, dx):
    h, w, _ = cost.shape
    out = cost.copy()
    if dx != 0:
        xs = range(1, w) if dx > 0 else range(w - 2, -1, -1)
        for x in xs:
            lp = out[:, x - dx, :]
            if dy != 0:
                shifted = np.full_like(lp, _BIG)
                if dy > 0:
                    shifted[dy:, :] = lp[:-dy, :]
                else:
                    shifted[:dy, :] = lp[-dy:, :]
                lp = shifted
            out[:, x, :] = cost[:, x, :] + _sgm_combine(lp, p1, p2)
    else:
        ys = range(1, h) if dy > 0 else range(h - 2, -1, -1)
        for y in ys:
            out[y] = cost[y] + _sgm_combine(out[y - dy], p1, p2)
    return out


_SGM_DIRECTIONS = ((0, 1), (0, -1), (1, 0), (-1, 0), (1, 1), (1, -1), (-1, 1), (-1, -1))


def compute_disparity(left, right, max_disparity=32, p1=SGM_P1, p2=SGM_P2):
    """Census SGM between a rectified pair; returns a DisparityMap.

    Eight aggregation paths, winner-take-all with parabolic subpixel
    refinement, left-right consistency within 1 px.
    """
    gl = to_gray(left)
    gr = to_gray(right)
    if gl.shape != gr.shape:
        raise InitializationError("stereo pair shape mismatch")
    h, w = gl.shape
    nd = int(max_disparity) + 1
    cl = census_transform(gl)
    cr = census_transform(gr)
    cost = np.full((h, w, nd), 24.0)
    for d in range(nd):
        if d == 0:
            ham = np.bitwise_count(cl ^ cr)
            cost[:, :, 0] = ham
        else:
            ham = np.bitwise_count(cl[:, d:] ^ cr[:, :-d])
            cost[:, d:, d] = ham

    agg = np.zeros_like(cost)
    for dy, dx in _SGM_DIRECTIONS:
        agg += _aggregate_direction(cost, p1, p2, dy, dx)

    d_left = np.argmin(agg, axis=2)
    # Right-image volume by gathering along the epipolar line: the cost of
    # right pixel x at disparity d lives at left pixel x + d.
    xs = np.arange(w)
    cols = xs[None, :, None] + np.arange(nd)[None, None, :]
    np.clip(cols, 0, w - 1, out=cols)
    agg_right = np.take_along_axis(agg, cols.repeat(h, axis=0).reshape(h, w, nd), axis=1)
    oob = (xs[None, :, None] + np.arange(nd)[None, None, :]) > (w - 1)
    agg_right = np.where(oob, _BIG, agg_right)
    d_right = np.argmin(agg_right, axis=2)

    ys = np.arange(h)[:, None]
    x_match = np.clip(xs[None, :] - d_left, 0, w - 1)
    lr_ok = np.abs(d_left - d_right[ys, x_match]) <= 1
    in_range = (xs[None, :] - d_left) >= 0

    # Parabolic subpixel interpolation on the aggregated costs.
    d_idx = np.clip(d_left, 1, nd - 2)
    c0 = np.take_along_axis(agg, (d_idx - 1)[:, :, None], axis=2)[:, :, 0]
    c1 = np.take_along_axis(agg, d_idx[:, :, None], axis=2)[:, :, 0]
    c2 = np.take_along_axis(agg, (d_idx + 1)[:, :, None], axis=2)[:, :, 0]
    denom = c0 + c2 - 2 * c1
    offset = np.where(denom > 1e-9, 0.5 * (c0 - c2) / np.maximum(denom, 1e-9), 0.0)
    offset = np.clip(offset, -0.5, 0.5)
    interior = (d_left >= 1) & (d_left <= nd - 2)
    d_sub = np.where(interior, d_idx + offset, d_left.astype(np.float64))

    valid = lr_ok & in_range & (d_sub > 0)
    return DisparityMap(d_sub, valid)


# ---------------------------------------------------------------------------
# Sparse feature matches


@dataclass
class MatchSet:
    """Matches of one warp direction: ref pixels, target pixels, NCC scores."""

    x_ref: np.ndarray
    x_tgt: np.ndarray
    score: np.ndarray

    def __len__(self):
        return len(self.score)


@dataclass
class Correspondences:
    """Sparse matches keyed by warp direction; at most one match per ref pixel."""

    by_direction: dict

    def directions(self):
        return tuple(self.by_direction)

    def __getitem__(self, direction):
        return self.by_direction[direction]

    def total(self):
        return sum(len(m) for m in self.by_direction.values())


def harris_corners(gray, max_corners=300, nms_radius=4, quality=0.01, border=8):
    """Corner pixel positions (N, 2) as (x, y), strongest first."""
    gx, gy = np.gradient(gray)
    ixx = gx * gx
    iyy = gy * gy
    ixy = gx * gy
    k = np.ones((3, 3)) / 9.0
    from scipy.ndimage import convolve

    sxx = convolve(ixx, k, mode="nearest")
    syy = convolve(iyy, k, mode="nearest")
    sxy = convolve(ixy, k, mode="nearest")
    det = sxx * syy - sxy * sxy
    tr = sxx + syy
    resp = det - 0.04 * tr * tr
    h, w = gray.shape
    resp[:border] = resp[-border:] = 0
    resp[:, :border] = 0
    resp[:, -border:] = 0
    from scipy.ndimage import maximum_filter

    peaks = (resp == maximum_filter(resp, size=2 * nms_radius + 1)) & (
        resp > quality * max(resp.max(), 1e-12)
    )
    ys, xs = np.nonzero(peaks)
    if len(xs) == 0:
        return np.zeros((0, 2))
    order = np.argsort(resp[ys, xs], kind="stable")[::-1][:max_corners]
    return np.stack([xs[order], ys[order]], axis=1).astype(np.float64)


def _patch_descriptors(gray, corners, patch=8):
    """Normalized patch vectors around integer corner positions."""
    r0 = patch // 2
    h, w = gray.shape
    keep = []
    desc = []
    for i, (x, y) in enumerate(corners.astype(int)):
        y0, x0 = y - r0, x - r0
        if y0 < 0 or x0 < 0 or y0 + patch > h or x0 + patch > w:
            continue
        p = gray[y0 : y0 + patch, x0 : x0 + patch].ravel()
        p = p - p.mean()
        nrm = np.linalg.norm(p)
        if nrm < 1e-8:
            continue
        keep.append(i)
        desc.append(p / nrm)
    if not keep:
        return np.zeros(0, dtype=int), np.zeros((0, patch * patch))
    return np.array(keep), np.stack(desc)


def _ncc_at(gray, desc, x, y, patch=8):
    """NCC of one descriptor against the patch at integer (x, y), or -inf."""
    r0 = patch // 2
    h, w = gray.shape
    y0, x0 = y - r0, x - r0
    if y0 < 0 or x0 < 0 or y0 + patch > h or x0 + patch > w:
        return -np.inf
    p = gray[y0 : y0 + patch, x0 : x0 + patch].ravel()
    p = p - p.mean()
    nrm = np.linalg.norm(p)
    if nrm < 1e-8:
        return -np.inf
    return float(desc @ (p / nrm))


def match_features(window, directions=("stereo", "flow_f", "cross_f"), max_corners=300,
                   ncc_threshold=0.7, patch=8):
    """Mutual-nearest NCC matches from the reference view along each direction.

    Only the frame-(m, m+1) targets are matched so both window modes see the
    same correspondence set. Target positions get parabolic subpixel
    refinement from the NCC response at one-pixel shifts.
    """
    from .window import direction_target, REFERENCE_VIEW

    gray_ref = to_gray(window.reference)
    corners_ref = harris_corners(gray_ref, max_corners=max_corners)
    idx_ref, desc_ref = _patch_descriptors(gray_ref, corners_ref, patch)
    corners_ref = corners_ref[idx_ref]
    out = {}
    for direction in directions:
        tgt_view = direction_target(REFERENCE_VIEW, direction)
        if tgt_view is None or tgt_view not in window:
            continue
        gray_tgt = to_gray(window[tgt_view])
        corners_tgt = harris_corners(gray_tgt, max_corners=max_corners)
        idx_t, desc_tgt = _patch_descriptors(gray_tgt, corners_tgt, patch)
        corners_tgt = corners_tgt[idx_t]
        if len(corners_ref) == 0 or len(corners_tgt) == 0:
            out[direction] = MatchSet(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))
            continue
        sim = desc_ref @ desc_tgt.T
        best_t = np.argmax(sim, axis=1)
        best_r = np.argmax(sim, axis=0)
        ref_ids = np.arange(len(corners_ref))
        mutual = best_r[best_t] == ref_ids
        score = sim[ref_ids, best_t]
        keep = mutual & (score >= ncc_threshold)
        xr = corners_ref[keep]
        xt = corners_tgt[best_t[keep]].copy()
        sc = score[keep]
        # Subpixel: fit a parabola to the NCC response at +/-1 px shifts.
        for n in range(len(xt)):
            d = desc_ref[keep][n]
            cx, cy = int(xt[n, 0]), int(xt[n, 1])
            c = sc[n]
            lx = _ncc_at(gray_tgt, d, cx - 1, cy, patch)
            rx = _ncc_at(gray_tgt, d, cx + 1, cy, patch)
            if np.isfinite(lx) and np.isfinite(rx):
                den = lx + rx - 2 * c
                if den < -1e-12:
                    xt[n, 0] = cx + np.clip(0.5 * (lx - rx) / den, -0.5, 0.5)
            uy = _ncc_at(gray_tgt, d, cx, cy - 1, patch)
            dy = _ncc_at(gray_tgt, d, cx, cy + 1, patch)
            if np.isfinite(uy) and np.isfinite(dy):
                den = uy + dy - 2 * c
                if den < -1e-12:
                    xt[n, 1] = cy + np.clip(0.5 * (uy - dy) / den, -0.5, 0.5)
        out[direction] = MatchSet(xr, xt, sc)
    return Correspondences(out)


# ---------------------------------------------------------------------------
# RANSAC rigid-motion hypotheses


def _project(rig, pts):
    """Pinhole projection of camera points (..., 3) -> pixels (..., 2)."""
    z = pts[..., 2]
    return np.stack(
        [rig.fx * pts[..., 0] / z + rig.cx, rig.fy * pts[..., 1] / z + rig.cy], axis=-1
    )


def _motion_residuals(rig, rot, trans, pts, targets, cross):
    """Reprojection residuals for stacked points under (rot, trans).

    cross is a bool array marking matches whose target is the right camera
    (adds the baseline shift). Points behind the camera get huge residuals.
    """
    moved = pts @ rot.T - trans
    moved = moved.copy()
    moved[cross, 0] -= rig.baseline
    z = moved[..., 2]
    bad = z <= 1e-6
    zsafe = np.where(bad, 1.0, z)
    proj = np.stack(
        [rig.fx * moved[..., 0] / zsafe + rig.cx, rig.fy * moved[..., 1] / zsafe + rig.cy],
        axis=-1,
    )
    r = proj - targets
    r[bad] = 1e6
    return r


def _fit_motion_gn(rig, pts, targets, cross, rot0, trans0, iters=10, damping=1e-6):
    """Gauss-Newton pose fit minimizing reprojection error over all rows."""
    rot = rot0.copy()
    trans = trans0.copy()
    for _ in range(iters):
        y = pts @ rot.T  # rotated points before translation
        moved = y - trans
        moved[cross, 0] -= rig.baseline
        z = moved[:, 2]
        if np.any(z <= 1e-6):
            break
        fx_z = rig.fx / z
        fy_z = rig.fy / z
        # d(proj)/d(moved)
        jp = np.zeros((len(pts), 2, 3))
        jp[:, 0, 0] = fx_z
        jp[:, 0, 2] = -rig.fx * moved[:, 0] / z ** 2
        jp[:, 1, 1] = fy_z
        jp[:, 1, 2] = -rig.fy * moved[:, 1] / z ** 2
        # d(moved)/d(omega) = -[y]_x (written out), d(moved)/d(t) = -I
        jy = np.zeros((len(pts), 3, 6))
        jy[:, 0, 1] = y[:, 2]
        jy[:, 0, 2] = -y[:, 1]
        jy[:, 1, 0] = -y[:, 2]
        jy[:, 1, 2] = y[:, 0]
        jy[:, 2, 0] = y[:, 1]
        jy[:, 2, 1] = -y[:, 0]
        jy[:, :, 3:] = -np.eye(3)
        jac = np.einsum("nij,njk->nik", jp, jy).reshape(-1, 6)
        res = _motion_residuals(rig, rot, trans, pts, targets, cross).reshape(-1)
        a = jac.T @ jac + damping * np.eye(6)
        try:
            step = np.linalg.solve(a, -jac.T @ res)
        except np.linalg.LinAlgError:
            break
        rot = Rotation.from_rotvec(step[:3]).as_matrix() @ rot
        trans = trans + step[3:]
        if np.linalg.norm(step) < 1e-12:
            break
    return rot, trans


def ransac_motion_hypotheses(matches, disparity, rig, rng, count=4, iterations=500,
                             inlier_threshold=2.0, min_inliers=10):
    """Greedy multi-hypothesis rigid motion extraction from temporal matches.

    Back-projects reference corners through the disparity map, runs RANSAC
    with three-point Gauss-Newton pose fits, keeps the best hypothesis,
    removes its inliers and repeats up to `count` times. The identity motion
    is always appended last.
    """
    pts = []
    tgts = []
    cross = []
    for direction in ("flow_f", "cross_f"):
        if direction not in matches.by_direction:
            continue
        ms = matches[direction]
        for (xr, yr), xt in zip(ms.x_ref, ms.x_tgt):
            xi, yi = int(round(xr)), int(round(yr))
            if not (0 <= yi < disparity.shape[0] and 0 <= xi < disparity.shape[1]):
                continue
            if not disparity.valid[yi, xi]:
                continue
            d = disparity.values[yi, xi]
            z = rig.fx * rig.baseline / d
            ray = pixel_rays(rig, np.array([xr, yr]))
            pts.append(ray * z)
            tgts.append(xt)
            cross.append(direction == "cross_f")
    hypotheses = []
    if len(pts) >= 3:
        pts = np.asarray(pts)
        tgts = np.asarray(tgts)
        cross = np.asarray(cross, dtype=bool)
        alive = np.ones(len(pts), dtype=bool)
        for _ in range(count):
            idx_alive = np.flatnonzero(alive)
            if len(idx_alive) < max(3, min_inliers):
                break
            best = None
            for _ in range(iterations):
                tri = rng.choice(idx_alive, size=3, replace=False)
                rot, trans = _fit_motion_gn(
                    rig, pts[tri], tgts[tri], cross[tri], np.eye(3), np.zeros(3), iters=8
                )
                r = _motion_residuals(rig, rot, trans, pts[idx_alive], tgts[idx_alive],
                                      cross[idx_alive])
                inl = np.linalg.norm(r, axis=1) <= inlier_threshold
                if best is None or inl.sum() > best[0]:
                    best = (int(inl.sum()), rot, trans)
            if best is None or best[0] < min_inliers:
                break
            _, rot, trans = best
            sel = idx_alive
            for _ in range(2):
                r = _motion_residuals(rig, rot, trans, pts[sel], tgts[sel], cross[sel])
                inl_mask = np.linalg.norm(r, axis=1) <= inlier_threshold
                inl = sel[inl_mask]
                if len(inl) < 3:
                    break
                rot, trans = _fit_motion_gn(rig, pts[inl], tgts[inl], cross[inl], rot, trans)
            r = _motion_residuals(rig, rot, trans, pts[idx_alive], tgts[idx_alive],
                                  cross[idx_alive])
            inl_mask = np.linalg.norm(r, axis=1) <= inlier_threshold
            if inl_mask.sum() < min_inliers:
                break
            try:
                hypotheses.append(RigidMotion(rot, trans))
            except ValueError:
                break
            alive[idx_alive[inl_mask]] = False
    hypotheses.append(RigidMotion.identity())
    return hypotheses


# ---------------------------------------------------------------------------
# Robust plane fitting


def fit_planes(seg, disparity, rig, huber_width=1.0, iterations=3):
    """Per-superpixel plane fits to the disparity map.

    Iteratively reweighted least squares with Huber weights. Regions with
    too few valid disparities inherit the nearest fitted neighbor's plane
    (breadth-first over the adjacency graph); degenerate fits fall back to a
    fronto-parallel plane at the region's median disparity. Raises
    InitializationError when nothing can be fitted at all.
    """
    planes = [None] * seg.count
    for i in range(seg.count):
        r = seg.regions[i]
        ok = disparity.valid[r[:, 0], r[:, 1]]
        if ok.sum() < 3:
            continue
        xy = seg.region_xy(i)[ok]
        d = disparity.values[r[:, 0], r[:, 1]][ok]
        plane = plane_from_disparity_samples(rig, xy, d)
        med = float(np.median(d))
        for _ in range(iterations):
            if plane is None:
                break
            pred, pos = _plane_disp(rig, plane, xy)
            if not pos.all():
                plane = None
                break
            res = np.abs(pred - d)
            wts = np.sqrt(np.minimum(1.0, huber_width / np.maximum(res, 1e-9)))
            plane = plane_from_disparity_samples(rig, xy, d, wts)
        if plane is None:
            if med <= 0:
                continue
            plane = Plane(np.array([0.0, 0.0, med / (rig.fx * rig.baseline)]))
        else:
            pred, pos = _plane_disp(rig, plane, seg.region_xy(i))
            if not pos.all():
                plane = Plane(np.array([0.0, 0.0, med / (rig.fx * rig.baseline)]))
        planes[i] = plane

    fitted = [i for i, p in enumerate(planes) if p is not None]
    if not fitted:
        raise InitializationError("no superpixel had enough valid disparities")
    missing = [i for i, p in enumerate(planes) if p is None]
    if missing:
        frontier = list(fitted)
        seen = set(fitted)
        while frontier:
            nxt = []
            for i in frontier:
                for j in sorted(seg.adjacency[i]):
                    if j not in seen:
                        planes[j] = planes[i]
                        seen.add(j)
                        nxt.append(j)
            frontier = nxt
        for i in missing:  # disconnected leftovers copy the first fit
            if planes[i] is None:
                planes[i] = planes[fitted[0]]
    return planes


def _plane_disp(rig, plane, xy):
    inv_depth = pixel_rays(rig, xy) @ plane.n
    return rig.fx * rig.baseline * inv_depth, inv_depth > 0
