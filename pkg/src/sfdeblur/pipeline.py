"""Joint estimation pipeline: alternation loop plus evaluation metrics.

 joint_estimate initializes disparity, superpixels, planes, feature matches
and motion hypotheses from the blurry inputs, then alternates the scene-flow
minimizer with the primal-dual latent restoration.  Both steps are descent
steps on the combined objective (scene-flow energy plus latent total
variation), so the combined energy is non-increasing across outer iterations
up to floating-point slack.

The evaluation half implements the endpoint-error outlier metrics (a pixel
is an outlier only when its error exceeds 3 px AND 5% of the ground-truth
magnitude), PSNR, and block SSIM, plus the MetricsReport container the CLI
serializes.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .blurkernel import build_kernel_field
from .deblur import primal_dual_deblur, tv_value
from .errors import SfdError, UndefinedMetricError
from .geometry import plane_disparity_values, transform_plane
from .imageops import psnr, ssim  # noqa: F401  (metric ops re-exported here)
from .initialization import (
    compute_disparity,
    fit_planes,
    match_features,
    ransac_motion_hypotheses,
)
from .scenestate import SceneFlowState
from .sceneflow import EnergyParams, optimize_scene_flow, total_energy
from .segmentation import segment
from .views import (
    apply_homography_masked,
    flow_rasters,
    project_state,
    ref_to_view_homography,
    view_transform_rt,
    warp_map,
)
from .window import REFERENCE_VIEW, View


@dataclass
class PipelineConfig:
    """Frame mode, initialization sizes and the energy parameters."""

    energy: EnergyParams = field(default_factory=EnergyParams)
    mode: str = "three_frame"
    superpixels: int = 150
    hypotheses: int = 4
    max_disparity: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("two_frame", "three_frame"):
            raise ValueError("mode must be two_frame or three_frame")
        if self.superpixels < 1 or self.hypotheses < 1:
            raise ValueError("superpixels and hypotheses must be positive")
        if self.max_disparity < 1:
            raise ValueError("max_disparity must be positive")


@dataclass
class MetricsReport:
    """Evaluation summary: outlier rates, image quality, runtimes."""

    flow_outliers: dict = field(default_factory=dict)
    disparity_outliers: dict = field(default_factory=dict)
    psnr: dict = field(default_factory=dict)
    ssim: dict = field(default_factory=dict)
    identical: dict = field(default_factory=dict)
    runtime: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "flow_outliers": dict(self.flow_outliers),
            "disparity_outliers": dict(self.disparity_outliers),
            "psnr": dict(self.psnr),
            "ssim": dict(self.ssim),
            "identical": dict(self.identical),
            "runtime": dict(self.runtime),
        }

    def lines(self):
        """Deterministic key=value lines for the text report."""
        out = []
        for group, vals in sorted(self.to_dict().items()):
            for key, val in sorted(vals.items()):
                if isinstance(val, bool):
                    text = "true" if val else "false"
                elif isinstance(val, float):
                    text = f"{val:.6f}"
                else:
                    text = str(val)
                out.append(f"{group}.{key}={text}")
        return out


def flow_outlier_rate(est, gt):
    """Percent of GT-valid pixels with error > 3 px and > 5% of ‖gt‖."""
    if est.vectors.shape != gt.vectors.shape:
        raise UndefinedMetricError("flow field dimensions differ")
    valid = gt.valid
    if not valid.any():
        raise UndefinedMetricError("no valid ground-truth flow pixels")
    err = np.linalg.norm(est.vectors - gt.vectors, axis=2)
    err = np.where(est.valid, err, np.inf)
    mag = np.linalg.norm(gt.vectors, axis=2)
    bad = (err > 3.0) & (err > 0.05 * mag)
    return 100.0 * float(bad[valid].mean())


def disparity_outlier_rate(est, gt):
    """Scalar-error variant of the 3 px / 5% AND-rule."""
    if est.values.shape != gt.values.shape:
        raise UndefinedMetricError("disparity map dimensions differ")
    valid = gt.valid
    if not valid.any():
        raise UndefinedMetricError("no valid ground-truth disparity pixels")
    err = np.abs(est.values - gt.values)
    err = np.where(est.valid, err, np.inf)
    bad = (err > 3.0) & (err > 0.05 * np.abs(gt.values))
    return 100.0 * float(bad[valid].mean())


def state_flow_field(state, seg, rig, side="left"):
    """Dense frame m -> m+1 flow of one camera under the current state."""
    from .window import FlowField

    src = View(side, 0)
    dst = View(side, 1)
    if src == REFERENCE_VIEW:
        labels = seg.labels
    else:
        labels = project_state(state, seg, rig, src).labels
    coords, ok = warp_map(state, seg, rig, src, dst, labels)
    h, w = labels.shape
    gy, gx = np.mgrid[0:h, 0:w]
    vectors = coords - np.stack([gx, gy], axis=-1).astype(np.float64)
    vectors[~ok] = 0.0
    return FlowField(vectors, ok)


def state_disparity_map(state, seg, rig, frame=0):
    """Dense left-view disparity at a window frame under the current state."""
    from .window import DisparityMap

    view = View("left", frame)
    if view == REFERENCE_VIEW:
        labels = seg.labels
    else:
        labels = project_state(state, seg, rig, view).labels
    h, w = labels.shape
    gy, gx = np.mgrid[0:h, 0:w]
    pts = np.stack([gx, gy], axis=-1).reshape(-1, 2).astype(np.float64)
    values = np.zeros(h * w)
    ok = np.zeros(h * w, dtype=bool)
    flat = labels.ravel()
    for i in np.unique(flat):
        i = int(i)
        rt, ct = view_transform_rt(rig, state.motion_of(i), view)
        plane_v = transform_plane(state.planes[i], rt, ct)
        mask = flat == i
        vals, good = plane_disparity_values(rig, plane_v, pts[mask])
        values[mask] = vals
        ok[mask] = good
    values = values.reshape(h, w)
    ok = ok.reshape(h, w) & np.isfinite(values) & (values > 0) & (values < w)
    values[~ok] = 0.0
    return DisparityMap(values, ok)


def _reference_warp(state, seg, rig, dst):
    """Reference -> dst warp map from the per-superpixel homographies."""
    h, w = seg.labels.shape
    gy, gx = np.mgrid[0:h, 0:w]
    pts = np.stack([gx, gy], axis=-1).reshape(-1, 2).astype(np.float64)
    coords = np.zeros((h * w, 2))
    ok = np.zeros(h * w, dtype=bool)
    flat = seg.labels.ravel()
    for i in np.unique(flat):
        i = int(i)
        hom = ref_to_view_homography(rig, state.planes[i], state.motion_of(i), dst)
        mask = flat == i
        out, good = apply_homography_masked(hom.matrix, pts[mask])
        coords[mask] = out
        ok[mask] = good
    return coords.reshape(h, w, 2), ok.reshape(h, w)


def build_operators(state, seg, rig, window, params):
    """Per-view blur-kernel fields and cross-view warp maps for deblurring.

    The warp set anchors the brightness coupling at the reference view: one
    (reference, view) map per partner, evaluated with the same homography
    path as the scene-flow brightness term so the deblurring objective and
    the scene-flow energy agree on shared latents.  The coupling duals are
    transported back through these maps by splatting, which ties each
    partner image to the reference symmetrically.
    """
    reflect = window.mode == "two_frame"
    fields = {}
    for view in window.views:
        proj = project_state(state, seg, rig, view)
        fwd, bwd = flow_rasters(
            state, seg, rig, view, proj.labels, reflect_backward=reflect
        )
        fields[view] = build_kernel_field(fwd, bwd, params.tau)
    warps = {}
    for dst in window.views:
        if dst == REFERENCE_VIEW:
            continue
        warps[(REFERENCE_VIEW, dst)] = _reference_warp(state, seg, rig, dst)
    return fields, warps


def combined_energy(state, latents, blurs, matches, seg, rig, params):
    """Scene-flow energy plus the weighted latent total variation."""
    tv = sum(tv_value(latents.images[v]) for v in latents.views)
    return (
        total_energy(state, latents, blurs, matches, seg, rig, params)
        + params.tv_weight * float(tv)
    )


def initialize(blurs, rig, config, rng=None):
    """Disparity, superpixels, planes, matches and motion hypotheses."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    left0 = blurs.images[REFERENCE_VIEW]
    right0 = blurs.images[View("right", 0)]
    disparity = compute_disparity(left0, right0, max_disparity=config.max_disparity)
    seg = segment(left0, disparity, config.superpixels)
    planes = fit_planes(seg, disparity, rig)
    matches = match_features(blurs)
    motions = ransac_motion_hypotheses(
        matches, disparity, rig, rng, count=config.hypotheses
    )
    identity_index = len(motions) - 1
    objects = np.full(seg.count, identity_index, dtype=np.int32)
    state = SceneFlowState(planes, objects, motions)
    return state, seg, matches, disparity


def joint_estimate(blurs, rig, config, traces=None):
    """Alternate scene-flow and deblurring steps over one stereo window.

    Returns (state, latents, traces); `traces` collects per-stage energy
    records, per-iteration latent snapshots, warnings and runtimes.  Any
    step failure after initialization leaves the last consistent iterate in
    place and records a warning instead of raising.
    """
    if traces is None:
        traces = {}
    traces.setdefault("sceneflow", [])
    traces.setdefault("deblur", [])
    traces.setdefault("outer", [])
    traces.setdefault("warnings", [])
    traces.setdefault("iterates", [])
    runtime = traces.setdefault("runtime", {})
    params = config.energy

    t0 = time.perf_counter()
    state, seg, matches, disparity = initialize(blurs, rig, config)
    runtime["initialize"] = time.perf_counter() - t0
    traces["labels"] = seg.labels.copy()
    traces["disparity_init"] = disparity

    latents = blurs.map_images(lambda img: np.clip(img, 0.0, 1.0))
    prev_combined = None
    for it in range(1, params.outer_iters + 1):
        t0 = time.perf_counter()
        try:
            state = optimize_scene_flow(
                state, latents, blurs, matches, seg, rig, params,
                trace=traces["sceneflow"],
            )
        except SfdError as exc:
            traces["warnings"].append(f"scene-flow step {it} failed: {exc}")
            break
        runtime["sceneflow"] = runtime.get("sceneflow", 0.0) + (
            time.perf_counter() - t0
        )
        t0 = time.perf_counter()
        try:
            fields, warps = build_operators(state, seg, rig, blurs, params)
            latents = primal_dual_deblur(
                blurs, fields, warps, params, latents0=latents,
                trace=traces["deblur"],
            )
        except SfdError as exc:
            traces["warnings"].append(f"deblur step {it} failed: {exc}")
            break
        runtime["deblur"] = runtime.get("deblur", 0.0) + (
            time.perf_counter() - t0
        )
        combined = combined_energy(
            state, latents, blurs, matches, seg, rig, params
        )
        traces["outer"].append({"iteration": it, "combined": combined})
        traces["iterates"].append(
            {v.name: latents.images[v].copy() for v in latents.views}
        )
        if prev_combined is not None:
            if prev_combined - combined < 1e-4 * abs(prev_combined):
                break
        prev_combined = combined
    traces["segmentation"] = seg
    traces["matches"] = matches
    return state, latents, traces
