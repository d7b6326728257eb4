"""Raster file IO: PNG images, float rasters, flow and disparity encodings.

PNG images are 8- or 16-bit, quantized from unit-range floats with
round-to-nearest. Flow fields use the 16-bit three-channel convention
R = u * 64 + 2^15, G = v * 64 + 2^15, B != 0 marking validity; the
quantization error is at most 1/128 px per component. Disparity maps use
16-bit single-channel values d * 256 with 0 reserved for invalid (max error
1/512 px). Arbitrary float stacks use the FRAS container: ASCII magic
"FRAS", width/height/channels as little-endian uint32, then row-major
(channel-interleaved) float32 data.
"""

import struct

import cv2
import numpy as np

from .errors import DataError
from .imageops import ensure_image
from .window import DisparityMap, FlowField

FRAS_MAGIC = b"FRAS"
_PNG_PARAMS = [cv2.IMWRITE_PNG_COMPRESSION, 6]


def _imwrite(path, arr):
    if not cv2.imwrite(str(path), arr, _PNG_PARAMS):
        raise DataError(f"failed to write {path}")


def _imread(path, flags=cv2.IMREAD_UNCHANGED):
    img = cv2.imread(str(path), flags)
    if img is None:
        raise DataError(f"failed to read image {path}")
    return img


def write_image(path, image, bit_depth=16):
    """Write a unit-range float image as an 8- or 16-bit PNG."""
    a = ensure_image(image)
    if bit_depth == 8:
        scale, dtype = 255.0, np.uint8
    elif bit_depth == 16:
        scale, dtype = 65535.0, np.uint16
    else:
        raise DataError(f"unsupported bit depth {bit_depth}")
    q = np.rint(np.clip(a, 0.0, 1.0) * scale).astype(dtype)
    if q.shape[2] == 1:
        _imwrite(path, q[:, :, 0])
    elif q.shape[2] == 3:
        _imwrite(path, q[:, :, ::-1])  # file stores RGB; cv2 wants BGR order
    else:
        raise DataError(f"cannot write {q.shape[2]}-channel PNG")


def read_image(path):
    """Read a PNG as float64 (H, W, C) in [0, 1]."""
    img = _imread(path)
    if img.dtype == np.uint8:
        scale = 255.0
    elif img.dtype == np.uint16:
        scale = 65535.0
    else:
        raise DataError(f"unsupported PNG dtype {img.dtype} in {path}")
    a = img.astype(np.float64) / scale
    if a.ndim == 2:
        a = a[:, :, None]
    elif a.shape[2] == 3:
        a = a[:, :, ::-1].copy()
    else:
        raise DataError(f"unsupported channel count {a.shape[2]} in {path}")
    return a


def write_label_png(path, labels):
    """Write an integer label raster as 16-bit grayscale."""
    lab = np.asarray(labels)
    if lab.min() < 0 or lab.max() > 65535:
        raise DataError("labels out of 16-bit range")
    _imwrite(path, lab.astype(np.uint16))


def read_label_png(path):
    img = _imread(path)
    if img.ndim != 2:
        raise DataError(f"label raster must be single-channel: {path}")
    return img.astype(np.int32)


def write_fras(path, array):
    """Write a float stack (H, W) or (H, W, C) as a FRAS container."""
    a = np.asarray(array, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise DataError(f"FRAS stores 2D/3D arrays, got shape {a.shape}")
    h, w, c = a.shape
    with open(path, "wb") as f:
        f.write(FRAS_MAGIC)
        f.write(struct.pack("<III", w, h, c))
        f.write(a.astype("<f4").tobytes(order="C"))


def read_fras(path):
    """Read a FRAS container as float64 (H, W, C)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16 or raw[:4] != FRAS_MAGIC:
        raise DataError(f"not a FRAS file: {path}")
    w, h, c = struct.unpack("<III", raw[4:16])
    expected = 16 + 4 * w * h * c
    if len(raw) != expected:
        raise DataError(
            f"FRAS payload size mismatch in {path}: {len(raw)} != {expected}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=16)
    return data.reshape(h, w, c).astype(np.float64)


def write_flow_png(path, flow):
    """Write a FlowField in the 16-bit quantized convention."""
    u = flow.vectors[:, :, 0]
    v = flow.vectors[:, :, 1]
    r = np.rint(np.clip(u * 64.0 + 32768.0, 0, 65535)).astype(np.uint16)
    g = np.rint(np.clip(v * 64.0 + 32768.0, 0, 65535)).astype(np.uint16)
    b = flow.valid.astype(np.uint16)
    _imwrite(path, np.stack([b, g, r], axis=2))  # BGR order on disk -> RGB layout


def read_flow_png(path):
    img = _imread(path)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint16:
        raise DataError(f"flow PNG must be 16-bit three-channel: {path}")
    b = img[:, :, 0]
    g = img[:, :, 1].astype(np.float64)
    r = img[:, :, 2].astype(np.float64)
    u = (r - 32768.0) / 64.0
    v = (g - 32768.0) / 64.0
    return FlowField(np.stack([u, v], axis=2), b != 0)


def write_disparity_png(path, disparity):
    """Write a DisparityMap as 16-bit d*256 with 0 = invalid."""
    q = np.rint(np.clip(disparity.values * 256.0, 0, 65535)).astype(np.uint16)
    q[~disparity.valid] = 0
    _imwrite(path, q)


def read_disparity_png(path):
    img = _imread(path)
    if img.ndim != 2 or img.dtype != np.uint16:
        raise DataError(f"disparity PNG must be 16-bit single-channel: {path}")
    valid = img > 0
    return DisparityMap(img.astype(np.float64) / 256.0, valid)
