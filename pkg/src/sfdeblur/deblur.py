"""Latent-image restoration with a primal-dual total-variation solver.

Given per-view blur-kernel fields and cross-view warp maps from the current
scene estimate, the latent images minimize

  theta1 * (cross-view brightness coupling, L1)
  + theta3 * (derivative-domain blur fidelity, squared)
  + tv_weight * (anisotropic total variation)

The nonsmooth terms are dualized (p for TV, one q raster per ordered coupled
view pair); each primal step solves the remaining strictly convex quadratic
with a conjugate-residual iteration whose residual norms are non-increasing
for the symmetric positive-definite operator involved.  The returned pack is
the energy-best iterate encountered, so the final energy never exceeds the
energy of the initial latents.
"""

import numpy as np

from .blurkernel import apply_blur, apply_blur_adjoint
from .errors import SolverDivergenceError
from .imageops import (
    bilinear_sample,
    bilinear_splat,
    grad_x,
    grad_x_adjoint,
    grad_y,
    grad_y_adjoint,
    total_variation,
)
from .window import REFERENCE_VIEW, StereoWindow


def tv_value(image):
    """Anisotropic total variation: forward differences, summed channels."""
    return total_variation(image)


def _coupling_residual(l_src, l_tgt, coords, valid):
    """Per-pixel signed coupling residual L_tgt(W x) - L_src(x)."""
    h, w, c = l_src.shape
    vals, inside = bilinear_sample(l_tgt, coords.reshape(-1, 2))
    ok = valid.ravel() & inside
    diff = vals - l_src.reshape(-1, c)
    diff[~ok] = 0.0
    return diff.reshape(h, w, c), ok.reshape(h, w)


def pd_energy(latents, blurs, fields, warps, params):
    """Reference-anchored deblurring objective used for monitoring.

    theta1 couples the reference latent to every other view through the
    given warp maps (out-of-image samples skipped), theta3 scores the
    derivative-domain blur fidelity of every view, and tv_weight scales the
    latent total variation.
    """
    ref = latents.images[REFERENCE_VIEW]
    coupling = 0.0
    for view in latents.views:
        if view == REFERENCE_VIEW:
            continue
        pair = (REFERENCE_VIEW, view)
        if pair not in warps:
            continue
        coords, valid = warps[pair]
        diff, ok = _coupling_residual(ref, latents.images[view], coords, valid)
        coupling += float(np.abs(diff[ok]).sum())
    fidelity = 0.0
    for view in latents.views:
        blurred = apply_blur(fields[view], latents.images[view])
        diff = blurred - blurs.images[view]
        gx = grad_x(diff)
        gy = grad_y(diff)
        fidelity += float((gx * gx + gy * gy).sum())
    tv = sum(tv_value(latents.images[view]) for view in latents.views)
    return (
        params.theta1 * coupling
        + params.theta3 * fidelity
        + params.tv_weight * float(tv)
    )


def _pd_terms(images, blurs, fields, warps, params, views):
    ref = images[REFERENCE_VIEW]
    coupling = 0.0
    for view in views:
        if view == REFERENCE_VIEW:
            continue
        pair = (REFERENCE_VIEW, view)
        if pair not in warps:
            continue
        coords, valid = warps[pair]
        diff, ok = _coupling_residual(ref, images[view], coords, valid)
        coupling += float(np.abs(diff[ok]).sum())
    fidelity = 0.0
    for view in views:
        blurred = apply_blur(fields[view], images[view])
        diff = blurred - blurs.images[view]
        gx = grad_x(diff)
        gy = grad_y(diff)
        fidelity += float((gx * gx + gy * gy).sum())
    tv = float(sum(total_variation(images[view]) for view in views))
    total = (
        params.theta1 * coupling + params.theta3 * fidelity
        + params.tv_weight * tv
    )
    return total, coupling, fidelity, tv


def _conjugate_residual(op, rhs, x0, iters, tol=1e-6):
    """Conjugate-residual solve of op(x) = rhs for SPD op.

    Minimizes the residual 2-norm over the Krylov space, so the residual
    norms are non-increasing across iterations.
    """
    x = x0.copy()
    r = rhs - op(x)
    rhs_norm = float(np.sqrt(np.vdot(rhs, rhs).real))
    if rhs_norm == 0.0:
        return np.zeros_like(rhs)
    d = r.copy()
    ar = op(r)
    ad = ar.copy()
    r_ar = float(np.vdot(r, ar).real)
    for _ in range(iters):
        rnorm = float(np.sqrt(np.vdot(r, r).real))
        if rnorm <= tol * rhs_norm:
            break
        ad_ad = float(np.vdot(ad, ad).real)
        if ad_ad <= 0 or not np.isfinite(ad_ad):
            break
        alpha = r_ar / ad_ad
        x += alpha * d
        r -= alpha * ad
        ar = op(r)
        r_ar_new = float(np.vdot(r, ar).real)
        if r_ar <= 0 or not np.isfinite(r_ar_new):
            break
        beta = r_ar_new / r_ar
        d = r + beta * d
        ad = ar + beta * ad
        r_ar = r_ar_new
    return x


def _fidelity_op(field, scale):
    """x -> x + scale * A^T D^T D A x (symmetric positive definite)."""

    def op(x):
        ax = apply_blur(field, x)
        gx = grad_x(ax)
        gy = grad_y(ax)
        back = grad_x_adjoint(gx) + grad_y_adjoint(gy)
        return x + scale * apply_blur_adjoint(field, back)

    return op


def primal_dual_deblur(blurs, fields, warps, params, latents0=None, trace=None):
    """Primal-dual latent restoration over one stereo window.

    `fields` maps each view to its BlurKernelField, `warps` maps ordered
    view pairs to (coords, valid) pixel warp maps.  Latents start at
    `latents0` (default: the blurry inputs).  Every dual update projects
    onto its box; the primal quadratic is solved inexactly by conjugate
    residuals; the energy-best clamped iterate is returned.
    """
    views = list(blurs.views)
    pairs = [(m, t) for m in views for t in views
             if m != t and (m, t) in warps]
    h, w, c = blurs.shape
    if latents0 is None:
        latents0 = blurs
    lat = {v: np.clip(latents0.images[v], 0.0, 1.0) for v in views}
    lat_bar = {v: lat[v].copy() for v in views}
    p_x = {v: np.zeros((h, w, c)) for v in views}
    p_y = {v: np.zeros((h, w, c)) for v in views}
    q = {pair: np.zeros((h, w, c)) for pair in pairs}

    pair_geometry = {}
    for pair in pairs:
        coords, valid = warps[pair]
        flat = coords.reshape(-1, 2)
        inside = (
            (flat[:, 0] >= 0.0) & (flat[:, 0] <= w - 1.0)
            & (flat[:, 1] >= 0.0) & (flat[:, 1] <= h - 1.0)
        )
        ok = valid.ravel() & inside
        pair_geometry[pair] = (flat, ok)

    scale = 2.0 * params.eta * params.theta3
    ops = {v: _fidelity_op(fields[v], scale) for v in views}
    rhs_fid = {}
    for v in views:
        b = blurs.images[v]
        gx = grad_x(b)
        gy = grad_y(b)
        back = grad_x_adjoint(gx) + grad_y_adjoint(gy)
        rhs_fid[v] = scale * apply_blur_adjoint(fields[v], back)

    def snapshot():
        return {v: np.clip(lat[v], 0.0, 1.0) for v in views}

    def record(it, images):
        total, coupling, fidelity, tv = _pd_terms(
            images, blurs, fields, warps, params, views
        )
        if trace is not None:
            trace.append({
                "iteration": it, "total": total, "coupling": coupling,
                "fidelity": fidelity, "tv": tv,
            })
        return total

    best_images = snapshot()
    best_energy = record(0, best_images)

    gamma = params.gamma
    eta = params.eta
    # Coupling dual step: gamma*theta1 capped by the preconditioned
    # stability budget.  Each latent appears in up to 2(V-1) coupling rows
    # (identity column norm 1, splat column norm up to 4), so the ascent
    # step must satisfy eta * step * theta1 * rows <= 1 to keep the
    # saddle-point iteration from diverging.
    if pairs and params.theta1 > 0:
        touching = max(
            sum(1 for pp in pairs if v in pp) for v in views
        )
        budget = 0.9 / (eta * params.theta1 * 2.5 * max(touching, 1))
        q_step = min(gamma * params.theta1, budget)
    else:
        q_step = 0.0
    for it in range(1, params.pd_iters + 1):
        for v in views:
            p_x[v] = np.clip(p_x[v] + gamma * grad_x(lat_bar[v]), -1.0, 1.0)
            p_y[v] = np.clip(p_y[v] + gamma * grad_y(lat_bar[v]), -1.0, 1.0)
        if params.theta1 > 0:
            for pair in pairs:
                m, t = pair
                flat, ok = pair_geometry[pair]
                diff, _ = _coupling_residual(
                    lat_bar[m], lat_bar[t], flat.reshape(h, w, 2),
                    ok.reshape(h, w),
                )
                q[pair] = np.clip(q[pair] + q_step * diff, -1.0, 1.0)
        new_lat = {}
        for v in views:
            div = params.tv_weight * (
                grad_x_adjoint(p_x[v]) + grad_y_adjoint(p_y[v])
            )
            g = np.zeros((h, w, c))
            if params.theta1 > 0:
                for t in views:
                    if t == v:
                        continue
                    if (v, t) in pair_geometry:
                        flat, ok = pair_geometry[(v, t)]
                        g -= np.where(
                            ok.reshape(h, w)[:, :, None], q[(v, t)], 0.0
                        )
                    if (t, v) in pair_geometry:
                        flat_b, ok_b = pair_geometry[(t, v)]
                        qv = q[(t, v)].reshape(-1, c)[ok_b]
                        for ch in range(c):
                            bilinear_splat(
                                (h, w), flat_b[ok_b], qv[:, ch],
                                out=g[:, :, ch],
                            )
            rhs = lat[v] - eta * (div + params.theta1 * g) + rhs_fid[v]
            new_lat[v] = _conjugate_residual(
                ops[v], rhs, lat[v], params.cg_iters
            )
        for v in views:
            if not np.isfinite(new_lat[v]).all():
                raise SolverDivergenceError("deblur", it)
            lat_bar[v] = 2.0 * new_lat[v] - lat[v]
            lat[v] = new_lat[v]
        if it % 5 == 0 or it == params.pd_iters:
            images = snapshot()
            energy = record(it, images)
            if energy < best_energy:
                best_energy = energy
                best_images = images

    return StereoWindow(best_images, dict(blurs.masks))
