"""Piecewise-rigid scene flow energy and its discrete-continuous minimizer.

The energy over a superpixelized reference view couples, per superpixel,
a plane hypothesis and an object motion label:

  E(state) = brightness + features + blur-fidelity        (data terms)
           + depth + orientation + motion-boundary         (smoothness terms)

Brightness compares the reference latent against every warped latent view
under the per-superpixel homographies; features penalize truncated
reprojection error of sparse matches; blur fidelity compares image
derivatives of the re-blurred latents against the observed blurry inputs.
Smoothness acts on the superpixel adjacency graph.

Minimization alternates a discrete pass (iterated conditional modes over a
plane-proposal set crossed with the object labels, scored by exact energy
deltas) and a continuous pass (damped Gauss-Newton refinement of planes and
motions on a squared-residual surrogate, accepted only when the exact energy
decreases).  The optimizer never returns a state with higher energy than its
input; EnergyModel maintains incremental caches so a candidate's exact
energy delta only touches the image windows the candidate can affect.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .blurkernel import (
    apply_blur,
    blur_values_at,
    build_kernel_field,
)
from .errors import GeometryError
from .geometry import (
    Plane,
    RigidMotion,
    direction_transform,
    homography_from_transform,
    pixel_rays,
    plane_disparity_values,
)
from .imageops import bilinear_sample, grad_x, grad_y
from .views import (
    _warp_window,
    apply_homography_masked,
    flow_rasters,
    project_state,
    ref_to_view_homography,
    resolve_labels,
)
from .window import REFERENCE_VIEW, direction_target


@dataclass
class EnergyParams:
    """Weights, thresholds and iteration counts of the joint energy.

    theta1..theta6 weight brightness, features, blur fidelity, depth
    smoothness, orientation smoothness and the motion-boundary term.
    alpha1..alpha3 are the truncation thresholds of the robust penalties,
    lam the decay rate of the motion-boundary term, tau the shutter duty
    cycle, gamma/eta the primal-dual step sizes and tv_weight the latent
    total-variation weight used by the deblurring stage.
    """

    theta1: float = 1.0
    theta2: float = 0.5
    theta3: float = 10.0
    theta4: float = 0.2
    theta5: float = 0.1
    theta6: float = 0.1
    alpha1: float = 3.0
    alpha2: float = 3.0
    alpha3: float = 0.5
    lam: float = 0.1
    tau: float = 0.8
    gamma: float = 1.0 / math.sqrt(8.0)
    eta: float = 1.0 / math.sqrt(8.0)
    tv_weight: float = 0.05
    outer_iters: int = 5
    pd_iters: int = 50
    cg_iters: int = 12
    icm_sweeps: int = 10
    refine_steps: int = 3
    icm_exact_top: int = 1

    def __post_init__(self):
        for name in ("theta1", "theta2", "theta3", "theta4", "theta5", "theta6"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        for name in ("alpha1", "alpha2", "alpha3", "lam", "gamma", "eta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.tv_weight < 0:
            raise ValueError("tv_weight must be nonnegative")
        for name in ("outer_iters", "pd_iters", "cg_iters", "icm_sweeps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.refine_steps < 0 or self.icm_exact_top < 1:
            raise ValueError("refine_steps must be >= 0 and icm_exact_top >= 1")


def truncated_l1(values, alpha):
    """Robust penalty min(|x|, alpha), elementwise."""
    return np.minimum(np.abs(values), alpha)


def _direction_homography(rig, plane, motion, direction):
    r_t, c_t = direction_transform(rig, motion, direction)
    return homography_from_transform(rig, r_t, c_t, plane)


def _brightness_region(pts, ref_vals, plane, motion, latents, rig, directions, params):
    """theta1-weighted L1 brightness cost of one superpixel region."""
    total = 0.0
    for direction in directions:
        target = direction_target(REFERENCE_VIEW, direction)
        img = latents.images[target]
        hom = _direction_homography(rig, plane, motion, direction)
        out, ok = apply_homography_masked(hom.matrix, pts)
        if not ok.any():
            continue
        vals, inside = bilinear_sample(img, out[ok])
        good = inside
        mask = latents.mask(target)
        if mask is not None:
            mvals, minside = bilinear_sample(mask[:, :, None].astype(np.float64), out[ok])
            good = good & minside & (mvals[:, 0] > 0.999)
        if not good.any():
            continue
        diff = vals[good] - ref_vals[ok][good]
        total += np.abs(diff).sum()
    return params.theta1 * total


def _feature_group(x_ref, x_tgt, plane, motion, rig, direction, params):
    """theta2-weighted truncated reprojection cost of one match group."""
    if len(x_ref) == 0:
        return 0.0
    hom = _direction_homography(rig, plane, motion, direction)
    out, ok = apply_homography_masked(hom.matrix, x_ref)
    err = np.linalg.norm(out - x_tgt, axis=1)
    err = np.where(ok, err, params.alpha1)
    return params.theta2 * truncated_l1(err, params.alpha1).sum()


def _group_matches(seg, matches, directions):
    """Per (direction, superpixel) index arrays into the match sets."""
    h, w = seg.labels.shape
    groups = {}
    for direction, ms in matches.by_direction.items():
        if direction not in directions or len(ms.x_ref) == 0:
            continue
        ix = np.clip(np.rint(ms.x_ref[:, 0]).astype(np.int64), 0, w - 1)
        iy = np.clip(np.rint(ms.x_ref[:, 1]).astype(np.int64), 0, h - 1)
        labels = seg.labels[iy, ix]
        for i in np.unique(labels):
            groups[(direction, int(i))] = np.flatnonzero(labels == i)
    return groups


def _edge_energy(plane_i, plane_j, same_object, pts_xy, rig, params):
    """Sum of the three pairwise smoothness terms for one adjacent pair."""
    n_i, n_j = plane_i.n, plane_j.n
    norm_i = np.linalg.norm(n_i)
    norm_j = np.linalg.norm(n_j)
    if norm_i <= 0 or norm_j <= 0:
        raise GeometryError("plane normal with zero norm in smoothness term")
    d_i, _ = plane_disparity_values(rig, plane_i, pts_xy)
    d_j, _ = plane_disparity_values(rig, plane_j, pts_xy)
    omega = d_i - d_j
    align = abs(float(n_i @ n_j)) / (norm_i * norm_j)
    e_depth = params.theta4 * truncated_l1(omega, params.alpha2).sum()
    e_orient = params.theta5 * min(1.0 - align, params.alpha3)
    if same_object or len(pts_xy) == 0:
        e_motion = 0.0
    else:
        e_motion = params.theta6 * math.exp(
            -(params.lam / len(pts_xy)) * float((omega * omega).sum()) * align
        )
    return e_depth + e_orient + e_motion


def _boundary_xy(seg, i, j):
    pts = seg.boundary(i, j)
    return pts[:, ::-1].astype(np.float64)


def data_brightness(state, seg, latents, rig, params):
    """L1 brightness constancy over all warp directions of the window."""
    directions = latents.directions()
    ref = latents.images[REFERENCE_VIEW]
    total = 0.0
    for i in range(seg.count):
        pts = seg.region_xy(i)
        ixy = pts.astype(np.int64)
        ref_vals = ref[ixy[:, 1], ixy[:, 0], :]
        total += _brightness_region(
            pts, ref_vals, state.planes[i], state.motion_of(i), latents, rig,
            directions, params,
        )
    return float(total)


def data_features(state, seg, matches, rig, params, directions=None):
    """Truncated reprojection error of sparse matches under the state."""
    if directions is None:
        directions = tuple(matches.by_direction.keys())
    groups = _group_matches(seg, matches, directions)
    total = 0.0
    for (direction, i), idx in groups.items():
        ms = matches.by_direction[direction]
        total += _feature_group(
            ms.x_ref[idx], ms.x_tgt[idx], state.planes[i], state.motion_of(i),
            rig, direction, params,
        )
    return float(total)


def data_blur(state, seg, latents, blurs, rig, params):
    """Squared derivative mismatch between re-blurred latents and inputs."""
    if params.theta3 == 0.0:
        return 0.0
    reflect = latents.mode == "two_frame"
    total = 0.0
    for view in latents.views:
        proj = project_state(state, seg, rig, view)
        fwd, bwd = flow_rasters(
            state, seg, rig, view, proj.labels, reflect_backward=reflect
        )
        fld = build_kernel_field(fwd, bwd, params.tau)
        blurred = apply_blur(fld, latents.images[view])
        diff = blurred - blurs.images[view]
        gx = grad_x(diff)
        gy = grad_y(diff)
        total += float((gx * gx + gy * gy).sum())
    return params.theta3 * total


def smooth_depth(state, seg, rig, params):
    """Truncated L1 disparity gap along superpixel boundaries."""
    total = 0.0
    for (i, j) in seg.boundaries:
        pts_xy = _boundary_xy(seg, i, j)
        d_i, _ = plane_disparity_values(rig, state.planes[i], pts_xy)
        d_j, _ = plane_disparity_values(rig, state.planes[j], pts_xy)
        total += truncated_l1(d_i - d_j, params.alpha2).sum()
    return params.theta4 * float(total)


def smooth_orientation(state, seg, params):
    """Truncated penalty on unsigned normal misalignment of adjacent planes."""
    total = 0.0
    for (i, j) in seg.boundaries:
        n_i, n_j = state.planes[i].n, state.planes[j].n
        norm_i = np.linalg.norm(n_i)
        norm_j = np.linalg.norm(n_j)
        if norm_i <= 0 or norm_j <= 0:
            raise GeometryError("plane normal with zero norm in smoothness term")
        align = abs(float(n_i @ n_j)) / (norm_i * norm_j)
        total += min(1.0 - align, params.alpha3)
    return params.theta5 * float(total)


def smooth_motion_boundary(state, seg, rig, params):
    """Exponential co-alignment penalty across object-label changes."""
    total = 0.0
    for (i, j) in seg.boundaries:
        if int(state.objects[i]) == int(state.objects[j]):
            continue
        pts_xy = _boundary_xy(seg, i, j)
        if len(pts_xy) == 0:
            continue
        n_i, n_j = state.planes[i].n, state.planes[j].n
        norm_i = np.linalg.norm(n_i)
        norm_j = np.linalg.norm(n_j)
        if norm_i <= 0 or norm_j <= 0:
            raise GeometryError("plane normal with zero norm in smoothness term")
        align = abs(float(n_i @ n_j)) / (norm_i * norm_j)
        d_i, _ = plane_disparity_values(rig, state.planes[i], pts_xy)
        d_j, _ = plane_disparity_values(rig, state.planes[j], pts_xy)
        omega = d_i - d_j
        total += math.exp(
            -(params.lam / len(pts_xy)) * float((omega * omega).sum()) * align
        )
    return params.theta6 * float(total)


def total_energy(state, latents, blurs, matches, seg, rig, params):
    """Scene-flow energy: three data terms plus three smoothness terms."""
    return (
        data_brightness(state, seg, latents, rig, params)
        + data_features(state, seg, matches, rig, params,
                        directions=latents.directions())
        + data_blur(state, seg, latents, blurs, rig, params)
        + smooth_depth(state, seg, rig, params)
        + smooth_orientation(state, seg, params)
        + smooth_motion_boundary(state, seg, rig, params)
    )


def _grow(region, k, height, width):
    y0, y1, x0, x1 = region
    return max(y0 - k, 0), min(y1 + k, height), max(x0 - k, 0), min(x1 + k, width)


def _union_regions(regions, height, width):
    regions = [r for r in regions if r is not None and r[0] < r[1] and r[2] < r[3]]
    if not regions:
        return None
    ys0, ys1, xs0, xs1 = zip(*regions)
    return (
        max(min(ys0), 0), min(max(ys1), height),
        max(min(xs0), 0), min(max(xs1), width),
    )


class EnergyModel:
    """Incremental evaluator of the scene-flow energy.

    Caches per-superpixel unary costs, per-edge smoothness costs and, per
    view, the label/flow rasters, the re-blurred latents and a per-pixel
    blur-energy raster.  Candidate assignments are scored by exact energy
    deltas restricted to the windows they can affect, so a delta equals the
    full recomputation up to floating-point summation order.
    """

    def __init__(self, state, seg, latents, blurs, matches, rig, params):
        self.state = state.copy()
        self.seg = seg
        self.latents = latents
        self.blurs = blurs
        self.rig = rig
        self.params = params
        self.directions = tuple(latents.directions())
        self.reflect = latents.mode == "two_frame"
        h, w, _ = latents.shape
        self.height, self.width = h, w
        self.num_objects = len(self.state.motions)

        ref = latents.images[REFERENCE_VIEW]
        self._pts = []
        self._ref_vals = []
        self._rays = []
        for i in range(seg.count):
            pts = seg.region_xy(i)
            ixy = pts.astype(np.int64)
            self._pts.append(pts)
            self._ref_vals.append(ref[ixy[:, 1], ixy[:, 0], :])
            self._rays.append(pixel_rays(rig, pts))
        self._matches = matches
        self._groups = _group_matches(seg, matches, self.directions)
        self._spx_groups = [[] for _ in range(seg.count)]
        for (direction, i), idx in self._groups.items():
            self._spx_groups[i].append((direction, idx))

        self._u_bright = np.zeros(seg.count)
        self._u_feat = np.zeros(seg.count)
        for i in range(seg.count):
            b, f = self._unary_parts(i, self.state.planes[i], self.state.motion_of(i))
            self._u_bright[i] = b
            self._u_feat[i] = f
        self._edges = {}
        self._edge_pts = {}
        for key in seg.boundaries:
            i, j = key
            self._edge_pts[key] = _boundary_xy(seg, i, j)
            self._edges[key] = _edge_energy(
                self.state.planes[i], self.state.planes[j],
                int(self.state.objects[i]) == int(self.state.objects[j]),
                self._edge_pts[key], rig, params,
            )

        self._vc = {}
        if params.theta3 > 0:
            for view in latents.views:
                self._vc[view] = self._build_view_cache(view)

    # ---------------- cache construction ----------------

    def _build_view_cache(self, view):
        proj = project_state(self.state, self.seg, self.rig, view)
        bhoms = {}
        fwd, bwd = flow_rasters(
            self.state, self.seg, self.rig, view, proj.labels,
            reflect_backward=self.reflect, hom_cache=bhoms,
        )
        fld = build_kernel_field(fwd, bwd, self.params.tau)
        blurred = apply_blur(fld, self.latents.images[view])
        diff = blurred - self.blurs.images[view]
        gx = grad_x(diff)
        gy = grad_y(diff)
        eblur = (gx * gx + gy * gy).sum(axis=2)
        cache = {
            "labels": proj.labels,
            "windows": proj.windows.copy(),
            "homs": list(proj.homs),
            "fwd": fwd,
            "bwd": bwd,
            "blurred": blurred,
            "eblur": eblur,
            "fp": self._footprints(proj.labels),
            "bhoms": bhoms,
        }
        return cache

    def _footprints(self, labels):
        boxes = np.zeros((self.seg.count, 4), dtype=np.int64)
        objects = ndimage.find_objects(labels + 1, max_label=self.seg.count)
        for i, sl in enumerate(objects):
            if sl is None:
                boxes[i] = (0, 0, 0, 0)
            else:
                boxes[i] = (sl[0].start, sl[0].stop, sl[1].start, sl[1].stop)
        return boxes

    # ---------------- term primitives ----------------

    def _unary_parts(self, i, plane, motion):
        bright = _brightness_region(
            self._pts[i], self._ref_vals[i], plane, motion, self.latents,
            self.rig, self.directions, self.params,
        )
        feat = 0.0
        for direction, idx in self._spx_groups[i]:
            ms = self._matches.by_direction[direction]
            feat += _feature_group(
                ms.x_ref[idx], ms.x_tgt[idx], plane, motion, self.rig,
                direction, self.params,
            )
        return bright, feat

    def _positive_depth(self, i, plane):
        return bool((self._rays[i] @ plane.n > 1e-9).all())

    # ---------------- totals ----------------

    def total(self):
        e = float(self._u_bright.sum() + self._u_feat.sum())
        e += float(sum(self._edges.values()))
        e += self.blur_total()
        return e

    def blur_total(self):
        if not self._vc:
            return 0.0
        return self.params.theta3 * float(
            sum(vc["eblur"].sum() for vc in self._vc.values())
        )

    def breakdown(self):
        return {
            "brightness": float(self._u_bright.sum()),
            "features": float(self._u_feat.sum()),
            "blur": self.blur_total(),
            "depth": smooth_depth(self.state, self.seg, self.rig, self.params),
            "orientation": smooth_orientation(self.state, self.seg, self.params),
            "motion_boundary": smooth_motion_boundary(
                self.state, self.seg, self.rig, self.params
            ),
            "total": self.total(),
        }

    # ---------------- candidate evaluation ----------------

    def try_assignment(self, i, plane, obj, with_blur=True):
        """Exact energy delta of assigning (plane, object) to superpixel i."""
        if not self._positive_depth(i, plane):
            return math.inf, None
        motion = self.state.motions[obj]
        b_new, f_new = self._unary_parts(i, plane, motion)
        delta = (b_new - self._u_bright[i]) + (f_new - self._u_feat[i])
        edge_new = {}
        for j in sorted(self.seg.adjacency[i]):
            key = (min(i, j), max(i, j))
            e = _edge_energy(
                plane, self.state.planes[j],
                obj == int(self.state.objects[j]),
                self._edge_pts[key], self.rig, self.params,
            )
            edge_new[key] = e
            delta += e - self._edges[key]
        token = {
            "kind": "assign", "i": i, "plane": plane, "obj": obj,
            "bright": b_new, "feat": f_new, "edges": edge_new, "views": {},
            "delta": delta,
        }
        if with_blur and self._vc:
            override = self._assignment_override(i, plane, motion)
            for view in self.latents.views:
                d_view, piece = self._blur_delta_view(view, {i: override[view]})
                delta += self.params.theta3 * d_view
                token["views"][view] = piece
            token["delta"] = delta
        if not np.isfinite(delta):
            return math.inf, None
        return delta, token

    def try_motion(self, k, new_motion, with_blur=True):
        """Exact energy delta of replacing object k's motion."""
        members = np.flatnonzero(self.state.objects == k)
        if len(members) == 0:
            return 0.0, {"kind": "motion", "k": k, "motion": new_motion,
                         "members": members, "bright": {}, "feat": {}, "views": {}}
        delta = 0.0
        bright = {}
        feat = {}
        for i in members:
            i = int(i)
            b_new, f_new = self._unary_parts(i, self.state.planes[i], new_motion)
            bright[i] = b_new
            feat[i] = f_new
            delta += (b_new - self._u_bright[i]) + (f_new - self._u_feat[i])
        token = {
            "kind": "motion", "k": k, "motion": new_motion, "members": members,
            "bright": bright, "feat": feat, "views": {}, "delta": delta,
        }
        if with_blur and self._vc:
            for view in self.latents.views:
                override = {}
                for i in members:
                    i = int(i)
                    override[i] = self._member_override(i, self.state.planes[i],
                                                        new_motion, view)
                d_view, piece = self._blur_delta_view(view, override)
                delta += self.params.theta3 * d_view
                token["views"][view] = piece
            token["delta"] = delta
        if not np.isfinite(delta):
            return math.inf, None
        return delta, token

    def _assignment_override(self, i, plane, motion):
        """Per-view override entries for a single-superpixel candidate."""
        out = {}
        for view in self.latents.views:
            out[view] = self._member_override(i, plane, motion, view)
        return out

    def _member_override(self, i, plane, motion, view):
        hom = ref_to_view_homography(self.rig, plane, motion, view)
        y0, y1, x0, x1 = self.seg.region_bbox(i)
        win = _warp_window(hom.matrix, (y0, y1 + 1, x0, x1 + 1),
                           self.width, self.height)
        return (hom, np.asarray(win, dtype=np.int64), plane, motion)

    def _blur_delta_view(self, view, override):
        """Blur-energy delta (unweighted) of an override set on one view."""
        vc = self._vc[view]
        pieces = []
        for i, (_, win_new, _, _) in override.items():
            pieces.append(tuple(vc["windows"][i]))
            pieces.append(tuple(win_new))
            fp = vc["fp"][i]
            if fp[0] < fp[1] and fp[2] < fp[3]:
                pieces.append(tuple(fp))
        region = _union_regions(pieces, self.height, self.width)
        if region is None:
            return 0.0, {"region": None}
        labels_r, _ = resolve_labels(
            self.state, self.seg, self.rig, view, vc["homs"], vc["windows"],
            region=region, override=override,
        )
        fwd_r, bwd_r = flow_rasters(
            self.state, self.seg, self.rig, view, labels_r, region=region,
            reflect_backward=self.reflect, override=override,
            hom_cache=vc["bhoms"],
        )
        ry0, ry1, rx0, rx1 = region
        diff_mask = (
            (labels_r != vc["labels"][ry0:ry1, rx0:rx1])
            | np.any(fwd_r != vc["fwd"][ry0:ry1, rx0:rx1], axis=2)
            | np.any(bwd_r != vc["bwd"][ry0:ry1, rx0:rx1], axis=2)
        )
        if not diff_mask.any():
            piece = {"region": None, "override": override}
            return 0.0, piece
        # A pixel's blurred value depends only on its own flow pair, so only
        # the pixels whose flows changed need re-blurring; everything else
        # (and hence the blur energy beyond a one-pixel halo) keeps its
        # cached value.  Re-blur the changed pixels and composite.
        ys, xs = np.nonzero(diff_mask)
        changed = (
            ry0 + int(ys.min()), ry0 + int(ys.max()) + 1,
            rx0 + int(xs.min()), rx0 + int(xs.max()) + 1,
        )
        cy0, cy1, cx0, cx1 = changed
        vals = blur_values_at(
            fwd_r[ys, xs], bwd_r[ys, xs], self.params.tau,
            self.latents.images[view],
            np.stack([rx0 + xs, ry0 + ys], axis=1),
        )
        blurred_c = vc["blurred"][cy0:cy1, cx0:cx1].copy()
        blurred_c[ry0 + ys - cy0, rx0 + xs - cx0] = vals
        grown = _grow(changed, 2, self.height, self.width)
        gy0, gy1, gx0, gx1 = grown
        big = vc["blurred"][gy0:gy1, gx0:gx1].copy()
        big[cy0 - gy0:cy1 - gy0, cx0 - gx0:cx1 - gx0] = blurred_c
        diff = big - self.blurs.images[view][gy0:gy1, gx0:gx1]
        ex = np.zeros_like(diff)
        ey = np.zeros_like(diff)
        ex[:, :-1] = diff[:, 1:] - diff[:, :-1]
        ey[:-1, :] = diff[1:, :] - diff[:-1, :]
        e_new = (ex * ex + ey * ey).sum(axis=2)
        inner = _grow(changed, 1, self.height, self.width)
        iy0, iy1, ix0, ix1 = inner
        e_inner = e_new[iy0 - gy0:iy1 - gy0, ix0 - gx0:ix1 - gx0]
        d_view = float(e_inner.sum() - vc["eblur"][iy0:iy1, ix0:ix1].sum())
        piece = {
            "region": region, "labels": labels_r, "fwd": fwd_r, "bwd": bwd_r,
            "blur_box": changed, "blurred": blurred_c, "inner": inner,
            "einner": e_inner, "override": override,
        }
        return d_view, piece

    # ---------------- application ----------------

    def apply(self, token):
        if token["kind"] == "assign":
            i = token["i"]
            self.state.planes[i] = token["plane"]
            self.state.objects[i] = token["obj"]
            self._u_bright[i] = token["bright"]
            self._u_feat[i] = token["feat"]
            self._edges.update(token["edges"])
        else:
            self.state.motions[token["k"]] = token["motion"]
            for i, b in token["bright"].items():
                self._u_bright[i] = b
            for i, f in token["feat"].items():
                self._u_feat[i] = f
        for view, piece in token["views"].items():
            self._apply_view_piece(view, piece)

    def _apply_view_piece(self, view, piece):
        vc = self._vc[view]
        override = piece.get("override", {})
        for i, (hom, win, _, _) in override.items():
            vc["homs"][i] = hom
            vc["windows"][i] = win
            vc["bhoms"].pop(i, None)
        if piece["region"] is None:
            return
        ry0, ry1, rx0, rx1 = piece["region"]
        vc["labels"][ry0:ry1, rx0:rx1] = piece["labels"]
        vc["fwd"][ry0:ry1, rx0:rx1] = piece["fwd"]
        vc["bwd"][ry0:ry1, rx0:rx1] = piece["bwd"]
        cy0, cy1, cx0, cx1 = piece["blur_box"]
        vc["blurred"][cy0:cy1, cx0:cx1] = piece["blurred"]
        iy0, iy1, ix0, ix1 = piece["inner"]
        vc["eblur"][iy0:iy1, ix0:ix1] = piece["einner"]
        for i in np.unique(piece["labels"]):
            i = int(i)
            ys, xs = np.nonzero(piece["labels"] == i)
            box = (ry0 + ys.min(), ry0 + ys.max() + 1,
                   rx0 + xs.min(), rx0 + xs.max() + 1)
            fp = vc["fp"][i]
            if fp[0] < fp[1] and fp[2] < fp[3]:
                vc["fp"][i] = (
                    min(fp[0], box[0]), max(fp[1], box[1]),
                    min(fp[2], box[2]), max(fp[3], box[3]),
                )
            else:
                vc["fp"][i] = box


# ---------------- optimizer ----------------


def _plane_key(plane):
    return tuple(np.round(plane.n, 12))


def build_proposals(state0, seg, count=5):
    """Per-superpixel plane proposals: own fit, neighbor fits, depth sweeps."""
    zs = []
    for i in range(seg.count):
        n = state0.planes[i].n
        nz = abs(float(n[2]))
        if nz > 1e-12:
            zs.append(1.0 / nz)
    if zs:
        qs = np.quantile(np.asarray(zs), np.linspace(0.05, 0.95, count))
    else:
        qs = np.linspace(2.0, 50.0, count)
    sweeps = [Plane.fronto_parallel(float(max(z, 1e-3))) for z in qs]
    proposals = []
    for i in range(seg.count):
        props = [state0.planes[i]]
        for j in sorted(seg.adjacency[i]):
            props.append(state0.planes[j])
        props.extend(sweeps)
        seen = set()
        unique = []
        for p in props:
            key = _plane_key(p)
            if key not in seen:
                seen.add(key)
                unique.append(p)
        proposals.append(unique)
    return proposals


def _dirty_set(model, changed_ids, touched):
    """Superpixels whose best move could change after this sweep's applies.

    Unary terms depend only on a superpixel's own labels, pairwise terms on
    boundary neighbors, and the blur term on the raster inside the current
    projection window / smear footprint; anything outside changed regions
    was already rejected at identical energy.
    """
    active = set()
    for i in changed_ids:
        active.add(i)
        active.update(int(j) for j in model.seg.adjacency[i])
    for view, region in touched:
        vc = model._vc.get(view)
        if vc is None:
            continue
        ry0, ry1, rx0, rx1 = _grow(region, 2, model.height, model.width)
        for name in ("windows", "fp"):
            b = np.asarray(vc[name])
            hit = (
                (b[:, 0] < ry1) & (b[:, 1] > ry0)
                & (b[:, 2] < rx1) & (b[:, 3] > rx0)
                & (b[:, 1] > b[:, 0]) & (b[:, 3] > b[:, 2])
            )
            active.update(int(k) for k in np.flatnonzero(hit))
    return active


def _icm_pass(model, proposals, trace, max_sweeps, exact_top):
    params = model.params
    n_obj = model.num_objects
    sweeps = 0
    active = None
    while sweeps < max_sweeps:
        sweeps += 1
        changed_ids = []
        touched = []
        for i in range(model.seg.count):
            if active is not None and i not in active:
                continue
            tol = -1e-9 * (1.0 + abs(model.total()))
            cands = []
            cur = (_plane_key(model.state.planes[i]), int(model.state.objects[i]))
            for plane in proposals[i]:
                for obj in range(n_obj):
                    if (_plane_key(plane), obj) == cur:
                        continue
                    cands.append((plane, obj))
            if not cands:
                continue
            if model._vc:
                cheap = np.array([
                    model.try_assignment(i, p, o, with_blur=False)[0]
                    for p, o in cands
                ])
                order = np.argsort(cheap, kind="stable")[:exact_top]
                best = None
                for ci in order:
                    if not np.isfinite(cheap[ci]):
                        continue
                    plane, obj = cands[ci]
                    d, tok = model.try_assignment(i, plane, obj, with_blur=True)
                    if tok is not None and (best is None or d < best[0]):
                        best = (d, tok)
            else:
                best = None
                for plane, obj in cands:
                    d, tok = model.try_assignment(i, plane, obj, with_blur=False)
                    if tok is not None and (best is None or d < best[0]):
                        best = (d, tok)
            if best is not None and best[0] < tol:
                model.apply(best[1])
                changed_ids.append(i)
                for view, piece in best[1]["views"].items():
                    if piece.get("region") is not None:
                        touched.append((view, piece["region"]))
        if trace is not None:
            rec = {"stage": "icm", "sweep": sweeps}
            rec.update(model.breakdown())
            trace.append(rec)
        if not changed_ids:
            break
        active = _dirty_set(model, changed_ids, touched)
    return sweeps


def _brightness_residuals(model, i, plane, motion, stride=1):
    """Signed brightness residuals of one superpixel (surrogate for GN)."""
    pts = model._pts[i][::stride]
    refs = model._ref_vals[i][::stride]
    sq1 = math.sqrt(model.params.theta1)
    parts = []
    for direction in model.directions:
        target = direction_target(REFERENCE_VIEW, direction)
        img = model.latents.images[target]
        try:
            hom = _direction_homography(model.rig, plane, motion, direction)
        except GeometryError:
            parts.append(np.zeros(len(pts) * img.shape[2]))
            continue
        out, ok = apply_homography_masked(hom.matrix, pts)
        vals, inside = bilinear_sample(img, out)
        good = ok & inside
        diff = np.where(good[:, None], vals - refs, 0.0)
        parts.append(sq1 * diff.ravel())
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


def _feature_residuals(model, i, plane, motion):
    sq2 = math.sqrt(model.params.theta2)
    parts = []
    for direction, idx in model._spx_groups[i]:
        ms = model._matches.by_direction[direction]
        try:
            hom = _direction_homography(model.rig, plane, motion, direction)
        except GeometryError:
            parts.append(np.full(2 * len(idx), model.params.alpha1))
            continue
        out, ok = apply_homography_masked(hom.matrix, ms.x_ref[idx])
        diff = np.where(ok[:, None], out - ms.x_tgt[idx], model.params.alpha1)
        parts.append(sq2 * diff.ravel())
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


def _damped_gn_step(residual_fn, x0, scales, damping):
    """One damped Gauss-Newton proposal via forward-difference Jacobian."""
    r0 = residual_fn(x0)
    if r0.size == 0:
        return None
    jac = np.zeros((r0.size, len(x0)))
    for c in range(len(x0)):
        eps = scales[c]
        xp = x0.copy()
        xp[c] += eps
        jac[:, c] = (residual_fn(xp) - r0) / eps
    jtj = jac.T @ jac
    jtr = jac.T @ r0
    reg = damping * (np.trace(jtj) / max(len(x0), 1) + 1e-12)
    try:
        step = np.linalg.solve(jtj + reg * np.eye(len(x0)), -jtr)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(step)):
        return None
    return step


def _refine_planes(model, trace):
    """Damped Gauss-Newton on each superpixel's plane.

    Steps are proposed from brightness/feature residuals and accepted on
    their exact non-blur energy delta; the blur term is validated once on
    the aggregate move, which is rolled back unless the full exact delta is
    negative.  Every net change therefore strictly lowers the total energy.
    """
    params = model.params
    for i in range(model.seg.count):
        obj = int(model.state.objects[i])
        motion = model.state.motions[obj]
        plane0 = model.state.planes[i]
        bright0 = float(model._u_bright[i])
        feat0 = float(model._u_feat[i])
        edge_keys = [(min(i, j), max(i, j)) for j in model.seg.adjacency[i]]
        edges0 = {key: model._edges[key] for key in edge_keys}
        cheap_total = 0.0
        damping = 1e-3
        for _ in range(params.refine_steps):
            n0 = model.state.planes[i].n.copy()

            def residual(n, i=i, motion=motion):
                plane = Plane(n)
                return np.concatenate([
                    _brightness_residuals(model, i, plane, motion),
                    _feature_residuals(model, i, plane, motion),
                ])

            scales = np.maximum(np.abs(n0) * 1e-4, 1e-7)
            try:
                step = _damped_gn_step(residual, n0, scales, damping)
            except (GeometryError, FloatingPointError):
                break
            if step is None:
                break
            tol = -1e-9 * (1.0 + abs(model.total()))
            accepted = False
            scale = 1.0
            for _ in range(3):
                cand = n0 + scale * step
                try:
                    d, tok = model.try_assignment(i, Plane(cand), obj,
                                                  with_blur=False)
                except (GeometryError, FloatingPointError):
                    d, tok = math.inf, None
                if tok is not None and d < tol:
                    model.apply(tok)
                    cheap_total += d
                    accepted = True
                    break
                scale *= 0.5
            if accepted:
                damping = max(damping / 3.0, 1e-6)
            else:
                damping *= 10.0
                if damping > 1e3:
                    break
        plane_new = model.state.planes[i]
        if plane_new is plane0 or not model._vc:
            continue
        try:
            override = model._assignment_override(i, plane_new, motion)
            blur_delta = 0.0
            pieces = {}
            for view in model.latents.views:
                d_view, piece = model._blur_delta_view(view, {i: override[view]})
                blur_delta += model.params.theta3 * d_view
                pieces[view] = piece
        except (GeometryError, FloatingPointError):
            blur_delta, pieces = math.inf, None
        tol = -1e-9 * (1.0 + abs(model.total()))
        if np.isfinite(blur_delta) and cheap_total + blur_delta < tol:
            for view, piece in pieces.items():
                model._apply_view_piece(view, piece)
        else:
            model.state.planes[i] = plane0
            model._u_bright[i] = bright0
            model._u_feat[i] = feat0
            model._edges.update(edges0)
    if trace is not None:
        rec = {"stage": "refine_planes"}
        rec.update(model.breakdown())
        trace.append(rec)


def _refine_motions(model, trace):
    """Damped Gauss-Newton on each object's rigid motion.

    Same acceptance scheme as _refine_planes: cheap exact non-blur deltas
    drive the steps, one blur validation of the aggregate move decides
    whether the object's net change survives.
    """
    params = model.params
    for k in range(model.num_objects):
        members = [int(i) for i in np.flatnonzero(model.state.objects == k)]
        if not members:
            continue
        start = model.state.motions[k]
        bright0 = {i: float(model._u_bright[i]) for i in members}
        feat0 = {i: float(model._u_feat[i]) for i in members}
        cheap_total = 0.0
        damping = 1e-3
        for _ in range(params.refine_steps):
            motion0 = model.state.motions[k]
            r0 = motion0.rotation
            t0 = motion0.translation

            def residual(x, members=members, r0=r0, t0=t0):
                rot = Rotation.from_rotvec(x[:3]).as_matrix() @ r0
                motion = RigidMotion(rot, t0 + x[3:])
                parts = []
                for i in members:
                    parts.append(_brightness_residuals(
                        model, i, model.state.planes[i], motion, stride=4))
                    parts.append(_feature_residuals(
                        model, i, model.state.planes[i], motion))
                return np.concatenate(parts) if parts else np.zeros(0)

            x0 = np.zeros(6)
            scales = np.full(6, 1e-5)
            scales[3:] = 1e-4
            try:
                step = _damped_gn_step(residual, x0, scales, damping)
            except (GeometryError, FloatingPointError):
                break
            if step is None:
                break
            tol = -1e-9 * (1.0 + abs(model.total()))
            accepted = False
            scale = 1.0
            for _ in range(3):
                x = scale * step
                try:
                    rot = Rotation.from_rotvec(x[:3]).as_matrix() @ r0
                    cand = RigidMotion(rot, t0 + x[3:])
                    d, tok = model.try_motion(k, cand, with_blur=False)
                except (GeometryError, FloatingPointError, ValueError):
                    d, tok = math.inf, None
                if tok is not None and d < tol:
                    model.apply(tok)
                    cheap_total += d
                    accepted = True
                    break
                scale *= 0.5
            if accepted:
                damping = max(damping / 3.0, 1e-6)
            else:
                damping *= 10.0
                if damping > 1e3:
                    break
        motion_new = model.state.motions[k]
        if motion_new is start or not model._vc:
            continue
        try:
            blur_delta = 0.0
            pieces = {}
            for view in model.latents.views:
                override = {
                    i: model._member_override(i, model.state.planes[i],
                                              motion_new, view)
                    for i in members
                }
                d_view, piece = model._blur_delta_view(view, override)
                blur_delta += model.params.theta3 * d_view
                pieces[view] = piece
        except (GeometryError, FloatingPointError):
            blur_delta, pieces = math.inf, None
        tol = -1e-9 * (1.0 + abs(model.total()))
        if np.isfinite(blur_delta) and cheap_total + blur_delta < tol:
            for view, piece in pieces.items():
                model._apply_view_piece(view, piece)
        else:
            model.state.motions[k] = start
            for i in members:
                model._u_bright[i] = bright0[i]
                model._u_feat[i] = feat0[i]
    if trace is not None:
        rec = {"stage": "refine_motions"}
        rec.update(model.breakdown())
        trace.append(rec)


def optimize_scene_flow(state0, latents, blurs, matches, seg, rig, params,
                        proposals=None, trace=None):
    """Minimize the scene-flow energy; never returns a worse state.

    A discrete ICM pass reassigns (plane proposal, object) labels per
    superpixel until no change (capped sweeps), then damped Gauss-Newton
    refines planes and object motions; every acceptance requires an exact
    negative energy delta.  On numerical failure of a refinement step the
    step is skipped, so the incumbent state survives.
    """
    model = EnergyModel(state0, seg, latents, blurs, matches, rig, params)
    e0 = model.total()
    if proposals is None:
        proposals = build_proposals(state0, seg)
    _icm_pass(model, proposals, trace, params.icm_sweeps, params.icm_exact_top)
    if params.refine_steps > 0:
        try:
            _refine_planes(model, trace)
            _refine_motions(model, trace)
        except Exception:
            pass
    if model.total() > e0 + 1e-9 * (1.0 + abs(e0)):
        return state0.copy()
    return model.state
