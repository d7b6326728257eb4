"""Dataset bundles: an on-disk directory with a checksummed manifest.

A bundle holds the blurry input window, the camera description and,
optionally, ground truth produced by the synthesizer:

  manifest.json           roles -> {path, sha256}, plus the frame mode
  camera.yaml             fx, fy, cx, cy, baseline
  blur_<view>.png         16-bit inputs, one per view of the mode
  sharp_<view>.png        optional GT latents
  gt_flow_<side>.png      optional GT forward flow at the reference frame
  gt_disp_<frame>.png     optional GT left disparity (curr, next)

Every file access goes through the manifest; a checksum or role mismatch
raises DataError so a stale or tampered bundle fails loudly.
"""

import hashlib
import json
from pathlib import Path

import yaml

from .errors import DataError
from .formats import (
    read_disparity_png,
    read_flow_png,
    read_image,
    write_disparity_png,
    write_flow_png,
    write_image,
)
from .geometry import CameraRig
from .window import MODE_VIEWS, StereoWindow

MANIFEST = "manifest.json"
CAMERA = "camera.yaml"


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _camera_dict(rig):
    return {
        "fx": float(rig.fx), "fy": float(rig.fy),
        "cx": float(rig.cx), "cy": float(rig.cy),
        "baseline": float(rig.baseline),
    }


def _rig_from_dict(data):
    try:
        return CameraRig(
            float(data["fx"]), float(data["fy"]),
            float(data["cx"]), float(data["cy"]),
            float(data["baseline"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"invalid camera file: {exc}") from exc


def write_bundle(directory, blurs, rig, sharp=None, flows=None,
                 disparities=None):
    """Write a bundle directory; returns the manifest dict.

    `blurs` (and optional `sharp`) are StereoWindows; `flows` maps side name
    to a FlowField at the reference frame; `disparities` maps frame index
    (0, 1) to a DisparityMap.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}

    def add(role, name, writer):
        writer(directory / name)
        files[role] = {"path": name, "sha256": _sha256(directory / name)}

    with open(directory / CAMERA, "w") as handle:
        yaml.safe_dump(_camera_dict(rig), handle, sort_keys=True)
    for view in blurs.views:
        name = f"blur_{view.name}.png"
        add(f"blur_{view.name}", name,
            lambda p, v=view: write_image(p, blurs.images[v], bit_depth=16))
    if sharp is not None:
        for view in sharp.views:
            name = f"sharp_{view.name}.png"
            add(f"sharp_{view.name}", name,
                lambda p, v=view: write_image(p, sharp.images[v], bit_depth=16))
    if flows is not None:
        for side, flow in sorted(flows.items()):
            name = f"gt_flow_{side}.png"
            add(f"gt_flow_{side}", name,
                lambda p, f=flow: write_flow_png(p, f))
    if disparities is not None:
        frame_names = {0: "curr", 1: "next"}
        for frame, disp in sorted(disparities.items()):
            label = frame_names[frame]
            name = f"gt_disp_{label}.png"
            add(f"gt_disp_{label}", name,
                lambda p, d=disp: write_disparity_png(p, d))
    manifest = {
        "format": "sfdeblur-bundle",
        "version": 1,
        "mode": blurs.mode,
        "camera": CAMERA,
        "files": files,
    }
    with open(directory / MANIFEST, "w") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")
    return manifest


def read_manifest(directory):
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.is_file():
        raise DataError(f"missing manifest: {path}")
    try:
        with open(path) as handle:
            manifest = json.load(handle)
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt manifest: {exc}") from exc
    if manifest.get("format") != "sfdeblur-bundle":
        raise DataError("not a dataset bundle (bad format marker)")
    if "files" not in manifest or "mode" not in manifest:
        raise DataError("manifest missing required keys")
    return manifest


def _verified_path(directory, manifest, role):
    entry = manifest["files"].get(role)
    if entry is None:
        raise DataError(f"bundle is missing required role {role!r}")
    path = Path(directory) / entry["path"]
    if not path.is_file():
        raise DataError(f"bundle file for role {role!r} not found: {path}")
    digest = _sha256(path)
    if digest != entry["sha256"]:
        raise DataError(f"checksum mismatch for role {role!r}")
    return path


def load_rig(directory):
    directory = Path(directory)
    path = directory / CAMERA
    if not path.is_file():
        raise DataError(f"missing camera file: {path}")
    try:
        with open(path) as handle:
            data = yaml.safe_load(handle)
    except yaml.YAMLError as exc:
        raise DataError(f"corrupt camera file: {exc}") from exc
    return _rig_from_dict(data or {})


def load_bundle(directory, mode=None):
    """Load the blurry window and camera; returns (blurs, rig, manifest).

    `mode` defaults to the bundle's own mode; requesting two_frame from a
    three_frame bundle loads the four-view subset.  A missing blur role for
    the requested mode raises DataError.
    """
    directory = Path(directory)
    manifest = read_manifest(directory)
    if mode is None:
        mode = manifest["mode"]
    if mode not in MODE_VIEWS:
        raise DataError(f"unknown frame mode {mode!r}")
    rig = load_rig(directory)
    images = {}
    for view in MODE_VIEWS[mode]:
        path = _verified_path(directory, manifest, f"blur_{view.name}")
        images[view] = read_image(path)
    return StereoWindow(images), rig, manifest


def load_sharp(directory, mode=None):
    """Load the GT sharp window if present, else None."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    if mode is None:
        mode = manifest["mode"]
    views = MODE_VIEWS[mode]
    if any(f"sharp_{v.name}" not in manifest["files"] for v in views):
        return None
    images = {}
    for view in views:
        path = _verified_path(directory, manifest, f"sharp_{view.name}")
        images[view] = read_image(path)
    return StereoWindow(images)


def load_gt_flow(directory, side):
    manifest = read_manifest(directory)
    role = f"gt_flow_{side}"
    if role not in manifest["files"]:
        return None
    return read_flow_png(_verified_path(directory, manifest, role))


def load_gt_disparity(directory, frame):
    manifest = read_manifest(directory)
    role = f"gt_disp_{'curr' if frame == 0 else 'next'}"
    if role not in manifest["files"]:
        return None
    return read_disparity_png(_verified_path(directory, manifest, role))
