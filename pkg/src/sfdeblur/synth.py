"""Synthetic ground-truth scenes: textured planar patches under rigid motion.

A scene is a stack of textured planar patches (the first one is an infinite
background, later ones are bounded foreground rectangles), each attached to a
rigid object. All views are rendered by resolving, per pixel, which patch
surface is seen (inverse warp, membership, smallest depth) and evaluating
that patch's procedural texture at the inverse-warped reference coordinates,
so multi-view appearance is consistent by construction. Flows, disparities
and blur kernels derive from the same plane/motion algebra the estimator
uses, but all ground truth here is analytic, never estimated.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .blurkernel import apply_blur, build_kernel_field
from .errors import BehindCameraError, ConfigError, DataError
from .geometry import (
    CameraRig,
    Plane,
    RigidMotion,
    homography_from_transform,
    pixel_rays,
)
from .scenestate import SceneFlowState
from .views import apply_homography_masked, blur_flow_homographies_rt
from .window import (
    DisparityMap,
    FlowField,
    MODE_VIEWS,
    StereoWindow,
    View,
)


@dataclass(frozen=True)
class TexturedPatch:
    """A textured planar rectangle; rect = (x0, y0, x1, y1), end-exclusive."""

    plane: Plane
    object_id: int
    rect: tuple
    texture_seed: int


@dataclass
class SceneSpec:
    width: int
    height: int
    rig: CameraRig
    patches: list
    motions: list
    tau: float = 0.8
    noise_sigma: float = 0.005
    blur_model: str = "kernel"
    seed: int = 0
    mode: str = "three_frame"
    texture_waves: int = 10
    texture_amplitude: float = 0.42
    wavelength_range: tuple = (6.0, 64.0)

    def __post_init__(self):
        if self.blur_model not in ("kernel", "average"):
            raise ConfigError(f"unknown blur model {self.blur_model!r}")
        if self.mode not in MODE_VIEWS:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if not self.patches:
            raise ConfigError("scene needs at least one patch")
        if not 0 < self.tau <= 1:
            raise ConfigError("tau must lie in (0, 1]")
        for p in self.patches:
            if p.object_id < 0 or p.object_id >= len(self.motions):
                raise ConfigError("patch references a missing motion")
        x0, y0, x1, y1 = self.patches[0].rect
        if x0 > 0 or y0 > 0 or x1 < self.width or y1 < self.height:
            raise ConfigError("first patch must cover the full image")


@dataclass
class RenderedScene:
    """Everything render_scene knows about a window."""

    spec: SceneSpec
    sharp: StereoWindow
    flows: dict          # side -> (FlowField fwd, FlowField bwd) on frame-0 grid
    disparities: dict    # frame -> DisparityMap on that frame's left grid
    state: SceneFlowState
    labels: np.ndarray   # reference-view patch index raster
    blur_flows: dict     # View -> (fwd, bwd) (H, W, 2) rasters


def _texture_params(spec, patch, channel):
    rng = np.random.default_rng([spec.seed, patch.texture_seed, channel, 7919])
    k = spec.texture_waves
    lo, hi = spec.wavelength_range
    wavelengths = np.exp(rng.uniform(np.log(lo), np.log(hi), size=k))
    angles = rng.uniform(0, np.pi, size=k)
    phases = rng.uniform(0, 2 * np.pi, size=k)
    amps = rng.uniform(0.5, 1.0, size=k)
    amps *= spec.texture_amplitude / amps.sum()
    freq = np.stack([np.cos(angles), np.sin(angles)], axis=1) / wavelengths[:, None]
    return freq, phases, amps


def _texture_values(spec, patch, channel, xy):
    freq, phases, amps = _texture_params(spec, patch, channel)
    arg = 2 * np.pi * (xy @ freq.T) + phases
    return 0.5 + np.sin(arg) @ amps


def _frame_rt(motion, frame):
    """Reference-frame-to-frame-f transform (R_T, c_T) under one motion."""
    m = RigidMotion.identity()
    step = motion if frame >= 0 else motion.inverse()
    for _ in range(abs(frame)):
        m = step.compose(m)
    return m.rotation, -m.translation


def _view_rt(rig, motion, side, frame):
    rt, ct = _frame_rt(motion, frame)
    if side == "right":
        ct = ct - np.array([rig.baseline, 0.0, 0.0])
    return rt, ct


def _resolve_patches(spec, side, frame):
    """Per-pixel patch index, inverse-warped reference coords, and depth."""
    rig = spec.rig
    h, w = spec.height, spec.width
    gy, gx = np.mgrid[0:h, 0:w]
    pts = np.stack([gx, gy], axis=-1).reshape(-1, 2).astype(np.float64)
    rays = pixel_rays(rig, pts)
    best = np.full(h * w, -1, dtype=np.int64)
    best_depth = np.full(h * w, np.inf)
    backs = []
    planes_v = []
    for p_idx, patch in enumerate(spec.patches):
        motion = spec.motions[patch.object_id]
        rt, ct = _view_rt(rig, motion, side, frame)
        hom = homography_from_transform(rig, rt, ct, patch.plane)
        denom = 1.0 + patch.plane.n @ (rt.T @ ct)
        if abs(denom) < 1e-12:
            raise BehindCameraError("patch plane passes through a camera center")
        plane_v = Plane((rt @ patch.plane.n) / denom)
        planes_v.append(plane_v)
        back, ok = apply_homography_masked(np.linalg.inv(hom.matrix), pts)
        backs.append(back)
        inv_depth = rays @ plane_v.n
        x0, y0, x1, y1 = patch.rect
        member = (
            ok
            & (back[:, 0] >= x0 - 0.5)
            & (back[:, 0] < x1 - 0.5)
            & (back[:, 1] >= y0 - 0.5)
            & (back[:, 1] < y1 - 0.5)
            & (inv_depth > 1e-12)
        )
        depth = np.where(member, 1.0 / np.maximum(inv_depth, 1e-12), np.inf)
        closer = depth < best_depth
        best[closer] = p_idx
        best_depth[closer] = depth[closer]
    none = best < 0
    if none.any():
        inv_depth0 = rays[none] @ planes_v[0].n
        if np.any(inv_depth0 <= 0):
            raise BehindCameraError("background plane behind camera in a view")
        best[none] = 0
        best_depth[none] = 1.0 / inv_depth0
    back_sel = np.empty((h * w, 2))
    for p_idx in range(len(spec.patches)):
        m = best == p_idx
        back_sel[m] = backs[p_idx][m]
    return (
        best.reshape(h, w),
        back_sel.reshape(h, w, 2),
        best_depth.reshape(h, w),
        planes_v,
    )


def _render_view(spec, side, frame, resolved=None):
    idx, back, _, _ = resolved if resolved is not None else _resolve_patches(spec, side, frame)
    h, w = spec.height, spec.width
    img = np.zeros((h, w, 3))
    for p_idx, patch in enumerate(spec.patches):
        m = idx == p_idx
        if not m.any():
            continue
        xy = back[m]
        for ch in range(3):
            img[:, :, ch][m] = _texture_values(spec, patch, ch, xy)
    return np.clip(img, 0.0, 1.0)


def _blur_flow_rasters(spec, side, frame, resolved):
    """Forward/backward one-step flows of the resolved surfaces in a view."""
    idx, _, _, _ = resolved
    rig = spec.rig
    h, w = spec.height, spec.width
    gy, gx = np.mgrid[0:h, 0:w]
    pts_all = np.stack([gx, gy], axis=-1).astype(np.float64)
    fwd = np.zeros((h, w, 2))
    bwd = np.zeros((h, w, 2))
    for p_idx, patch in enumerate(spec.patches):
        m = idx == p_idx
        if not m.any():
            continue
        motion = spec.motions[patch.object_id]
        rt, ct = _view_rt(rig, motion, side, frame)
        h_fwd, h_bwd = blur_flow_homographies_rt(rig, patch.plane, motion, rt, ct)
        pts = pts_all[m]
        out_f, ok_f = apply_homography_masked(h_fwd.matrix, pts)
        out_b, ok_b = apply_homography_masked(h_bwd.matrix, pts)
        fwd[m] = np.where(ok_f[:, None], out_f - pts, 0.0)
        bwd[m] = np.where(ok_b[:, None], out_b - pts, 0.0)
    return fwd, bwd


def _disparity_raster(spec, frame):
    """GT disparity on the left grid of a frame."""
    resolved = _resolve_patches(spec, "left", frame)
    idx, _, _, planes_v = resolved
    rig = spec.rig
    h, w = spec.height, spec.width
    gy, gx = np.mgrid[0:h, 0:w]
    rays = pixel_rays(rig, np.stack([gx, gy], axis=-1).reshape(-1, 2)).reshape(h, w, 3)
    disp = np.zeros((h, w))
    for p_idx in range(len(spec.patches)):
        m = idx == p_idx
        inv_depth = rays[m] @ planes_v[p_idx].n
        if np.any(inv_depth <= 0):
            raise BehindCameraError("non-positive depth in disparity render")
        disp[m] = rig.fx * rig.baseline * inv_depth
    return DisparityMap(disp)


def render_scene(spec):
    """Render the window plus analytic ground truth for a SceneSpec."""
    views = MODE_VIEWS[spec.mode]
    images = {}
    blur_flows = {}
    resolved_cache = {}
    for view in views:
        resolved = _resolve_patches(spec, view.side, view.frame)
        resolved_cache[view] = resolved
        images[view] = _render_view(spec, view.side, view.frame, resolved)
        blur_flows[view] = _blur_flow_rasters(spec, view.side, view.frame, resolved)
    sharp = StereoWindow(images)
    flows = {}
    for side in ("left", "right"):
        fwd, bwd = blur_flows[View(side, 0)]
        flows[side] = (FlowField(fwd.copy()), FlowField(bwd.copy()))
    disparities = {0: _disparity_raster(spec, 0), 1: _disparity_raster(spec, 1)}
    ref_idx = resolved_cache[View("left", 0)][0]
    state = SceneFlowState(
        [p.plane for p in spec.patches],
        np.array([p.object_id for p in spec.patches], dtype=np.int32),
        list(spec.motions),
    )
    return RenderedScene(
        spec, sharp, flows, disparities, state, ref_idx.astype(np.int32), blur_flows
    )


def synthesize_blur_kernel_model(sharp, blur_flows, tau, noise_sigma=0.0, rng=None):
    """Blur every image with kernels built from its bidirectional GT flows."""
    out = {}
    for view in sharp.views:
        fwd, bwd = blur_flows[view]
        fld = build_kernel_field(fwd, bwd, tau)
        out[view] = apply_blur(fld, sharp[view])
    blurred = StereoWindow(out)
    if noise_sigma > 0:
        if rng is None:
            rng = np.random.default_rng(0)
        blurred = blurred.map_images(
            lambda img: np.clip(img + rng.normal(0.0, noise_sigma, img.shape), 0.0, 1.0)
        )
    return blurred


def synthesize_blur_average_model(frames):
    """Arithmetic mean of three registered sharp frames."""
    if len(frames) != 3:
        raise DataError("averaging blur needs exactly three frames")
    return (frames[0] + frames[1] + frames[2]) / 3.0


def synthesize_blur_for_spec(scene, rng=None):
    """Blurred window for a rendered scene honoring its blur_model."""
    spec = scene.spec
    if rng is None:
        rng = np.random.default_rng([spec.seed, 104729])
    if spec.blur_model == "kernel":
        return synthesize_blur_kernel_model(
            scene.sharp, scene.blur_flows, spec.tau, spec.noise_sigma, rng
        )
    out = {}
    for view in scene.sharp.views:
        trio = [
            _render_view(spec, view.side, view.frame + df) for df in (-1, 0, 1)
        ]
        out[view] = synthesize_blur_average_model(trio)
    blurred = StereoWindow(out)
    if spec.noise_sigma > 0:
        blurred = blurred.map_images(
            lambda img: np.clip(
                img + rng.normal(0.0, spec.noise_sigma, img.shape), 0.0, 1.0
            )
        )
    return blurred


# ---------------------------------------------------------------------------
# Preset scenes


def _default_rig(width, height):
    return CameraRig(
        fx=110.0, fy=110.0, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0, baseline=0.35
    )


def preset_scene(name, width=256, height=128, seed=0, noise_sigma=0.005,
                 blur_model="kernel", mode="three_frame", motion_scale=1.0):
    """Named synthetic scenes used by the test suites and the CLI."""
    rig = _default_rig(width, height)
    bg_plane = Plane(np.array([0.0004, 0.0007, 1.0 / 8.0]))
    fg_plane = Plane(np.array([-0.0006, 0.0004, 1.0 / 4.0]))
    fg_rect = (
        int(width * 0.34),
        int(height * 0.30),
        int(width * 0.66),
        int(height * 0.74),
    )
    patches = [
        TexturedPatch(bg_plane, 0, (0, 0, width, height), texture_seed=11),
        TexturedPatch(fg_plane, 1 if name != "single_plane" else 0, fg_rect, texture_seed=23),
    ]
    if name == "static":
        motions = [RigidMotion.identity(), RigidMotion.identity()]
    elif name == "single_plane":
        patches = [TexturedPatch(Plane(np.array([0.0, 0.0, 0.1])), 0,
                                 (0, 0, width, height), texture_seed=11)]
        motions = [RigidMotion(np.eye(3), np.array([0.1, 0.0, 0.0]) * motion_scale)]
    elif name == "two_object":
        from scipy.spatial.transform import Rotation

        r_bg = Rotation.from_rotvec(
            np.array([0.0040, 0.0120, 0.0020]) * motion_scale
        ).as_matrix()
        r_fg = Rotation.from_rotvec(
            np.array([-0.0030, 0.0100, -0.0040]) * motion_scale
        ).as_matrix()
        motions = [
            RigidMotion(r_bg, np.array([-0.16, 0.03, 0.18]) * motion_scale),
            RigidMotion(r_fg, np.array([-0.22, 0.06, 0.12]) * motion_scale),
        ]
    else:
        raise ConfigError(f"unknown preset scene {name!r}")
    return SceneSpec(
        width=width,
        height=height,
        rig=rig,
        patches=patches,
        motions=motions,
        noise_sigma=noise_sigma,
        blur_model=blur_model,
        seed=seed,
        mode=mode,
    )


def vary_seed(spec, seed):
    """Copy of a spec with a different master seed (textures and noise move)."""
    return replace(spec, seed=seed)
