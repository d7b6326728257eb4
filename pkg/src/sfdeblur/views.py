"""Projection of a scene flow state into every image of the window.

Given the reference-frame segmentation and a SceneFlowState, these routines
answer, for any view: which superpixel's surface does each pixel see
(inverse-warp z-buffer), what are its forward/backward inter-frame flows
(used by the blur kernels), and where does a pixel warp to in another view.

Label resolution rule (shared by full and windowed recomputation, so local
energy deltas are exact): a superpixel is a candidate at a view pixel if the
pixel lies inside the superpixel's warped bounding window and its surface
depth there is positive. Candidates whose inverse-warped point rounds into
the superpixel's own reference region outrank all others; among equals the
smaller depth wins, then the smaller index. Pixels with no candidate keep
the reference label at the same coordinates.
"""

from dataclasses import dataclass

import numpy as np

from .geometry import (
    Homography,
    homography_from_transform,
    pixel_rays,
    transform_motion,
    transform_plane,
)
from .window import View

_NOT_CLAIMED = 1e6
_W_EPS = 1e-9


def view_transform_rt(rig, motion, view):
    """Reference-to-view transform (R_T, c_T) under an object's motion."""
    b = np.array([rig.baseline, 0.0, 0.0])
    r = motion.rotation
    t = motion.translation
    if view.frame == 0:
        rt, ct = np.eye(3), np.zeros(3)
    elif view.frame == 1:
        rt, ct = r, -t
    else:
        rt, ct = r.T, r.T @ t
    if view.side == "right":
        ct = ct - b
    return rt, ct


def ref_to_view_homography(rig, plane, motion, view):
    rt, ct = view_transform_rt(rig, motion, view)
    return homography_from_transform(rig, rt, ct, plane)


def plane_motion_in_view(rig, plane, motion, view):
    """The surface plane and the object's motion expressed in a view's frame."""
    rt, ct = view_transform_rt(rig, motion, view)
    return transform_plane(plane, rt, ct), transform_motion(motion, rt, ct)


def blur_flow_homographies_rt(rig, plane, motion, rt, ct):
    """Forward/backward one-frame-step warps for a generic view transform."""
    plane_v = transform_plane(plane, rt, ct)
    motion_v = transform_motion(motion, rt, ct)
    h_fwd = homography_from_transform(
        rig, motion_v.rotation, -motion_v.translation, plane_v
    )
    inv = motion_v.inverse()
    h_bwd = homography_from_transform(rig, inv.rotation, -inv.translation, plane_v)
    return h_fwd, h_bwd


def blur_flow_homographies(rig, plane, motion, view):
    """Forward/backward one-frame-step warps of a surface inside a view.

    Constant velocity: the same per-frame motion applies at the window's edge
    frames, conjugated into the view's coordinate frame.
    """
    rt, ct = view_transform_rt(rig, motion, view)
    return blur_flow_homographies_rt(rig, plane, motion, rt, ct)


def apply_homography_masked(matrix, pts):
    """Apply a 3x3 homography to (N, 2) points; returns (out, finite_mask)."""
    hom = np.empty((len(pts), 3))
    hom[:, :2] = pts
    hom[:, 2] = 1.0
    mapped = hom @ matrix.T
    w = mapped[:, 2]
    ok = np.abs(w) > _W_EPS
    safe = np.where(ok, w, 1.0)
    return mapped[:, :2] / safe[:, None], ok


@dataclass
class ViewProjection:
    """Per-view resolution of the scene state."""

    view: View
    labels: np.ndarray          # (H, W) superpixel id seen at each pixel
    depth: np.ndarray           # (H, W) surface depth in the view's frame
    windows: np.ndarray         # (N, 4) per-superpixel (y0, y1, x0, x1), end-exclusive
    homs: list                  # per-superpixel reference->view Homography


def _warp_window(hom_matrix, bbox, width, height, pad=2):
    """Bounding window of a warped reference bbox, clipped to the image."""
    y0, y1, x0, x1 = bbox
    corners = np.array(
        [[x0, y0], [x1, y0], [x0, y1], [x1, y1]], dtype=np.float64
    )
    mapped, ok = apply_homography_masked(hom_matrix, corners)
    if not ok.all():
        return 0, height, 0, width
    wy0 = int(np.floor(mapped[:, 1].min())) - pad
    wy1 = int(np.ceil(mapped[:, 1].max())) + pad + 1
    wx0 = int(np.floor(mapped[:, 0].min())) - pad
    wx1 = int(np.ceil(mapped[:, 0].max())) + pad + 1
    return max(wy0, 0), min(wy1, height), max(wx0, 0), min(wx1, width)


def superpixel_view_geometry(state, seg, rig, view):
    """Per-superpixel homographies and warped windows for one view."""
    h, w = seg.labels.shape
    homs = []
    windows = np.zeros((seg.count, 4), dtype=np.int64)
    for i in range(seg.count):
        hom = ref_to_view_homography(rig, state.planes[i], state.motion_of(i), view)
        homs.append(hom)
        y0, y1, x0, x1 = seg.region_bbox(i)
        windows[i] = _warp_window(hom.matrix, (y0, y1 + 1, x0, x1 + 1), w, h)
    return homs, windows


def resolve_labels(state, seg, rig, view, homs, windows, region=None,
                   override=None):
    """Z-buffered label/depth rasters for `region` ((y0, y1, x0, x1), end-exclusive).

    `override`, when given, maps superpixel index -> (hom, window, plane,
    motion), replacing those superpixels' geometry; used for exact local
    energy deltas.
    """
    h, w = seg.labels.shape
    if region is None:
        region = (0, h, 0, w)
    ry0, ry1, rx0, rx1 = region
    rh, rw = ry1 - ry0, rx1 - rx0
    labels = np.full((rh, rw), -1, dtype=np.int32)
    score = np.full((rh, rw), np.inf)
    depth = np.full((rh, rw), np.inf)
    gy, gx = np.mgrid[ry0:ry1, rx0:rx1]
    grid = np.stack([gx, gy], axis=-1).astype(np.float64)
    inv_rays = pixel_rays(rig, grid.reshape(-1, 2)).reshape(rh, rw, 3)
    # Candidate prefilter: superpixels whose warped window meets the region.
    wins = windows
    if override:
        wins = windows.copy()
        for i, (_, win_i, _, _) in override.items():
            wins[i] = win_i
    hit = (
        (wins[:, 0] < ry1) & (wins[:, 1] > ry0) & (wins[:, 2] < rx1) & (wins[:, 3] > rx0)
    )
    for i in np.flatnonzero(hit):
        i = int(i)
        if override is not None and i in override:
            hom, win, plane = override[i][0], override[i][1], override[i][2]
        else:
            hom, win, plane = homs[i], windows[i], state.planes[i]
        y0 = max(int(win[0]), ry0)
        y1 = min(int(win[1]), ry1)
        x0 = max(int(win[2]), rx0)
        x1 = min(int(win[3]), rx1)
        if y0 >= y1 or x0 >= x1:
            continue
        sl = (slice(y0 - ry0, y1 - ry0), slice(x0 - rx0, x1 - rx0))
        pts = grid[sl].reshape(-1, 2)
        plane_v = _plane_in_view(rig, state, i, view, override)
        inv_depth = inv_rays[sl].reshape(-1, 3) @ plane_v.n
        pos = inv_depth > 1e-12
        d = 1.0 / np.maximum(inv_depth, 1e-12)
        back, ok = apply_homography_masked(np.linalg.inv(hom.matrix), pts)
        bx = np.rint(back[:, 0]).astype(np.int64)
        by = np.rint(back[:, 1]).astype(np.int64)
        inside = ok & (bx >= 0) & (bx < w) & (by >= 0) & (by < h)
        claimed = np.zeros(len(pts), dtype=bool)
        claimed[inside] = seg.labels[by[inside], bx[inside]] == i
        cand_score = np.where(claimed, d, d + _NOT_CLAIMED)
        cand_score = np.where(pos & ok, cand_score, np.inf)
        cand_score = cand_score.reshape(y1 - y0, x1 - x0)
        dd = d.reshape(y1 - y0, x1 - x0)
        win_mask = cand_score < score[sl]
        score[sl][win_mask] = cand_score[win_mask]
        labels[sl][win_mask] = i
        depth[sl][win_mask] = dd[win_mask]
    fallback = labels < 0
    if fallback.any():
        ref = seg.labels[ry0:ry1, rx0:rx1]
        labels[fallback] = ref[fallback]
        for i in np.unique(labels[fallback]):
            plane_v = _plane_in_view(rig, state, int(i), view, override)
            m = fallback & (labels == i)
            dd = inv_rays[m] @ plane_v.n
            depth[m] = np.where(dd > 1e-12, 1.0 / np.maximum(dd, 1e-12), np.inf)
    return labels, depth


def _plane_in_view(rig, state, i, view, override):
    if override is not None and i in override:
        plane, motion = override[i][2], override[i][3]
    else:
        plane, motion = state.planes[i], state.motion_of(i)
    rt, ct = view_transform_rt(rig, motion, view)
    return transform_plane(plane, rt, ct)


def flow_rasters(state, seg, rig, view, labels, region=None, reflect_backward=False,
                 override=None, hom_cache=None):
    """Forward/backward blur flows on a view region from its label raster.

    When `region` is given, `labels` must be the region-sized raster from
    resolve_labels over the same region.  `hom_cache` optionally maps label
    ids to their (forward, backward) blur homographies; entries are reused
    for labels not in `override` and filled in when absent.
    """
    if region is None:
        region = (0, labels.shape[0], 0, labels.shape[1])
    ry0, ry1, rx0, rx1 = region
    h, w = ry1 - ry0, rx1 - rx0
    fwd = np.zeros((h, w, 2))
    bwd = np.zeros((h, w, 2))
    gy, gx = np.mgrid[ry0:ry1, rx0:rx1]
    pts_all = np.stack([gx, gy], axis=-1).astype(np.float64)
    for i in np.unique(labels):
        i = int(i)
        overridden = override is not None and i in override
        if overridden:
            plane, motion = override[i][2], override[i][3]
        else:
            plane, motion = state.planes[i], state.motion_of(i)
        mask = labels == i
        pts = pts_all[mask]
        if not overridden and hom_cache is not None and i in hom_cache:
            h_fwd, h_bwd = hom_cache[i]
        else:
            h_fwd, h_bwd = blur_flow_homographies(rig, plane, motion, view)
            if not overridden and hom_cache is not None:
                hom_cache[i] = (h_fwd, h_bwd)
        out_f, ok_f = apply_homography_masked(h_fwd.matrix, pts)
        uf = np.where(ok_f[:, None], out_f - pts, 0.0)
        fwd[mask] = uf
        if reflect_backward:
            bwd[mask] = -uf
        else:
            out_b, ok_b = apply_homography_masked(h_bwd.matrix, pts)
            bwd[mask] = np.where(ok_b[:, None], out_b - pts, 0.0)
    return fwd, bwd


def project_state(state, seg, rig, view):
    """Full-view ViewProjection for one view."""
    homs, windows = superpixel_view_geometry(state, seg, rig, view)
    labels, depth = resolve_labels(state, seg, rig, view, homs, windows)
    return ViewProjection(view, labels, depth, windows, homs)


def warp_map(state, seg, rig, src_view, dst_view, src_labels):
    """Dense map of src-view pixels into dst-view coordinates.

    Each pixel moves with the surface it sees in the source view:
    x_dst = H_ref->dst (H_ref->src)^-1 x_src. Returns (coords (H, W, 2),
    finite-mask (H, W)).
    """
    h, w = src_labels.shape
    gy, gx = np.mgrid[0:h, 0:w]
    pts_all = np.stack([gx, gy], axis=-1).astype(np.float64)
    coords = np.zeros((h, w, 2))
    ok_all = np.zeros((h, w), dtype=bool)
    for i in np.unique(src_labels):
        plane = state.planes[i]
        motion = state.motion_of(int(i))
        h_src = ref_to_view_homography(rig, plane, motion, src_view)
        h_dst = ref_to_view_homography(rig, plane, motion, dst_view)
        mat = h_dst.matrix @ np.linalg.inv(h_src.matrix)
        mask = src_labels == i
        out, ok = apply_homography_masked(mat, pts_all[mask])
        coords[mask] = out
        ok_all[mask] = ok
    return coords, ok_all
