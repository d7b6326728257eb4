"""Command-line interface.

Subcommands:
  synth     scene description -> dataset bundle (with ground truth)
  estimate  bundle -> scene-flow outputs (state, labels, flow, disparity)
  deblur    bundle + state + labels -> restored latent images
  run       bundle -> joint estimation outputs plus metrics (when GT exists)
  eval      output directory + bundle with GT -> metrics report

Exit codes: 0 success, 2 configuration error, 3 data error, 4 solver or
geometry failure.  Diagnostics go to stderr; all file writers are
deterministic for a fixed seed.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .bundle import (
    load_bundle,
    load_gt_disparity,
    load_gt_flow,
    load_sharp,
    read_manifest,
    write_bundle,
)
from .config import load_config, load_scene_request
from .deblur import primal_dual_deblur
from .errors import (
    ConfigError,
    DataError,
    GeometryError,
    InitializationError,
    SfdError,
    SolverError,
)
from .formats import (
    read_flow_png,
    read_disparity_png,
    read_fras,
    read_label_png,
    write_disparity_png,
    write_flow_png,
    write_fras,
    write_image,
    write_label_png,
)
from .pipeline import (
    MetricsReport,
    build_operators,
    disparity_outlier_rate,
    flow_outlier_rate,
    initialize,
    joint_estimate,
    psnr,
    ssim,
    state_disparity_map,
    state_flow_field,
)
from .scenestate import SceneFlowState
from .sceneflow import optimize_scene_flow
from .segmentation import from_labels
from .synth import preset_scene, render_scene, synthesize_blur_for_spec
from .window import DisparityMap, FlowField, View


def _write_json(path, data):
    with open(path, "w") as handle:
        json.dump(data, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _write_traces(path, traces):
    """Line-delimited trace records (energies only; deterministic)."""
    with open(path, "w") as handle:
        for kind in ("sceneflow", "deblur", "outer"):
            for rec in traces.get(kind, []):
                row = {"kind": kind}
                row.update(rec)
                handle.write(json.dumps(row, sort_keys=True) + "\n")
        for msg in traces.get("warnings", []):
            handle.write(json.dumps({"kind": "warning", "message": msg},
                                    sort_keys=True) + "\n")


def _write_state_outputs(out, state, seg, rig, config):
    _write_json(out / "state.json", state.to_dict())
    write_label_png(out / "labels.png", seg.labels)
    write_flow_png(out / "flow_left.png",
                   state_flow_field(state, seg, rig, "left"))
    write_flow_png(out / "flow_right.png",
                   state_flow_field(state, seg, rig, "right"))
    write_disparity_png(out / "disp_curr.png",
                        state_disparity_map(state, seg, rig, 0))
    write_disparity_png(out / "disp_next.png",
                        state_disparity_map(state, seg, rig, 1))


def _write_latents(out, latents):
    for view in latents.views:
        img = latents.images[view]
        write_fras(out / f"latent_{view.name}.fras", img.astype(np.float32))
        write_image(out / f"latent_{view.name}.png", img, bit_depth=16)


def _evaluate(bundle_dir, mode, blurs, latents, flows, disps):
    """MetricsReport against whatever ground truth the bundle carries."""
    report = MetricsReport()
    sharp = load_sharp(bundle_dir, mode=mode)
    if sharp is not None and latents is not None:
        for view in latents.views:
            est = latents.images[view]
            ref = sharp.images[view]
            val = psnr(est, ref)
            report.psnr[view.name] = val
            report.ssim[view.name] = ssim(est, ref)
            report.identical[view.name] = bool(val >= 99.0)
            if blurs is not None:
                report.psnr[f"input_{view.name}"] = psnr(
                    blurs.images[view], ref
                )
                report.ssim[f"input_{view.name}"] = ssim(
                    blurs.images[view], ref
                )
    for side in ("left", "right"):
        gt = load_gt_flow(bundle_dir, side)
        est = flows.get(side) if flows else None
        if gt is not None and est is not None:
            report.flow_outliers[side] = flow_outlier_rate(est, gt)
    for frame, name in ((0, "curr"), (1, "next")):
        gt = load_gt_disparity(bundle_dir, frame)
        est = disps.get(frame) if disps else None
        if gt is not None and est is not None:
            report.disparity_outliers[name] = disparity_outlier_rate(est, gt)
    return report


def _write_metrics(out, report):
    lines = report.lines()
    with open(out / "metrics.txt", "w") as handle:
        for line in lines:
            handle.write(line + "\n")
    data = report.to_dict()
    data.pop("runtime", None)
    _write_json(out / "metrics.json", data)


def _resolved_mode(args, bundle_dir):
    """Frame mode: explicit config/--set wins, else the bundle's own mode."""
    for item in args.set or []:
        if item.startswith("mode="):
            return None
    if args.config:
        import yaml

        with open(args.config) as handle:
            data = yaml.safe_load(handle) or {}
        if isinstance(data, dict) and "mode" in data:
            return None
    return read_manifest(bundle_dir)["mode"]


def _config_for(args, bundle_dir):
    config = load_config(args.config, args.set or [], args.seed)
    default_mode = _resolved_mode(args, bundle_dir)
    if default_mode is not None and default_mode != config.mode:
        from dataclasses import replace

        config = replace(config, mode=default_mode)
    return config


def _cmd_synth(args):
    request = load_scene_request(args.scene, args.set or [], args.seed)
    preset = request.pop("preset")
    try:
        spec = preset_scene(preset, **request)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    scene = render_scene(spec)
    blurs = synthesize_blur_for_spec(scene)
    out = Path(args.output)
    write_bundle(
        out, blurs, spec.rig, sharp=scene.sharp,
        flows={side: pair[0] for side, pair in scene.flows.items()},
        disparities=scene.disparities,
    )
    print(f"bundle written to {out}")
    return 0


def _cmd_estimate(args):
    config = _config_for(args, args.bundle)
    blurs, rig, _ = load_bundle(args.bundle, mode=config.mode)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    state, seg, matches, _ = initialize(blurs, rig, config)
    latents = blurs.map_images(lambda img: np.clip(img, 0.0, 1.0))
    trace = []
    state = optimize_scene_flow(
        state, latents, blurs, matches, seg, rig, config.energy, trace=trace
    )
    _write_state_outputs(out, state, seg, rig, config)
    _write_traces(out / "traces.jsonl", {"sceneflow": trace})
    print(f"scene-flow outputs written to {out}")
    return 0


def _cmd_deblur(args):
    config = _config_for(args, args.bundle)
    blurs, rig, _ = load_bundle(args.bundle, mode=config.mode)
    try:
        with open(args.state) as handle:
            state = SceneFlowState.from_dict(json.load(handle))
    except FileNotFoundError as exc:
        raise DataError(f"state file not found: {args.state}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt state file: {exc}") from exc
    labels = read_label_png(args.labels)
    if labels.shape != blurs.shape[:2]:
        raise DataError("label raster does not match the bundle images")
    seg = from_labels(labels)
    if len(state.planes) != seg.count:
        raise DataError("state and label raster disagree on superpixel count")
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    fields, warps = build_operators(state, seg, rig, blurs, config.energy)
    trace = []
    latents = primal_dual_deblur(
        blurs, fields, warps, config.energy, trace=trace
    )
    _write_latents(out, latents)
    _write_traces(out / "traces.jsonl", {"deblur": trace})
    print(f"latent images written to {out}")
    return 0


def _cmd_run(args):
    config = _config_for(args, args.bundle)
    blurs, rig, _ = load_bundle(args.bundle, mode=config.mode)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    state, latents, traces = joint_estimate(blurs, rig, config)
    seg = traces["segmentation"]
    _write_state_outputs(out, state, seg, rig, config)
    _write_latents(out, latents)
    _write_traces(out / "traces.jsonl", traces)
    flows = {
        "left": state_flow_field(state, seg, rig, "left"),
        "right": state_flow_field(state, seg, rig, "right"),
    }
    disps = {
        0: state_disparity_map(state, seg, rig, 0),
        1: state_disparity_map(state, seg, rig, 1),
    }
    report = _evaluate(args.bundle, config.mode, blurs, latents, flows, disps)
    _write_metrics(out, report)
    for stage, seconds in sorted(traces.get("runtime", {}).items()):
        print(f"runtime {stage}: {seconds:.3f}s", file=sys.stderr)
    for warning in traces.get("warnings", []):
        print(f"warning: {warning}", file=sys.stderr)
    print(f"outputs written to {out}")
    return 0


def _cmd_eval(args):
    config = _config_for(args, args.bundle)
    mode = config.mode
    blurs, rig, _ = load_bundle(args.bundle, mode=mode)
    est = Path(args.outputs)
    latents = None
    images = {}
    for view in blurs.views:
        fras = est / f"latent_{view.name}.fras"
        if fras.is_file():
            images[view] = read_fras(fras).astype(np.float64)
    if len(images) == len(list(blurs.views)):
        from .window import StereoWindow

        latents = StereoWindow(images)
    flows = {}
    for side in ("left", "right"):
        path = est / f"flow_{side}.png"
        if path.is_file():
            flows[side] = read_flow_png(path)
    disps = {}
    for frame, name in ((0, "curr"), (1, "next")):
        path = est / f"disp_{name}.png"
        if path.is_file():
            disps[frame] = read_disparity_png(path)
    report = _evaluate(args.bundle, mode, blurs, latents, flows, disps)
    out = Path(args.output) if args.output else est
    out.mkdir(parents=True, exist_ok=True)
    _write_metrics(out, report)
    for line in report.lines():
        print(line)
    return 0


def _add_common(parser, config_flag=True):
    if config_flag:
        parser.add_argument("--config", help="YAML configuration file")
    parser.add_argument(
        "--set", action="append", metavar="KEY=VALUE",
        help="override a configuration key (repeatable)",
    )
    parser.add_argument("--seed", type=int, help="seed for all randomness")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sfdeblur",
        description="Joint stereo-video deblurring and scene-flow estimation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a dataset bundle")
    p.add_argument("scene", nargs="?", help="scene description YAML")
    p.add_argument("-o", "--output", required=True, help="bundle directory")
    _add_common(p, config_flag=False)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("estimate", help="scene-flow estimation only")
    p.add_argument("bundle", help="dataset bundle directory")
    p.add_argument("-o", "--output", required=True, help="output directory")
    _add_common(p)
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("deblur", help="deblur with a given scene state")
    p.add_argument("bundle", help="dataset bundle directory")
    p.add_argument("--state", required=True, help="state.json from estimate")
    p.add_argument("--labels", required=True, help="labels.png from estimate")
    p.add_argument("-o", "--output", required=True, help="output directory")
    _add_common(p)
    p.set_defaults(func=_cmd_deblur)

    p = sub.add_parser("run", help="joint estimation and deblurring")
    p.add_argument("bundle", help="dataset bundle directory")
    p.add_argument("-o", "--output", required=True, help="output directory")
    _add_common(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("eval", help="evaluate outputs against bundle GT")
    p.add_argument("outputs", help="directory with run/estimate outputs")
    p.add_argument("bundle", help="bundle directory with ground truth")
    p.add_argument("-o", "--output", help="metrics directory (default: outputs)")
    _add_common(p)
    p.set_defaults(func=_cmd_eval)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except InitializationError as exc:
        print(f"initialization failed: {exc}", file=sys.stderr)
        return 3
    except (SolverError, GeometryError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 4
    except SfdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
