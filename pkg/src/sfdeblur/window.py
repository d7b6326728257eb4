"""Containers for the six-image stereo window and dense per-pixel fields.

A processing window covers frames m-1, m, m+1 of a rectified stereo pair.
Views are addressed by View(side, frame) with side in {"left", "right"} and
frame in {-1, 0, +1}; the reference view is View("left", 0). two_frame mode
drops the previous frame and keeps the four views of frames {0, +1}.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .imageops import ensure_image

FRAME_NAMES = {-1: "prev", 0: "curr", 1: "next"}
NAME_FRAMES = {v: k for k, v in FRAME_NAMES.items()}


@dataclass(frozen=True, order=True)
class View:
    side: str
    frame: int

    def __post_init__(self):
        if self.side not in ("left", "right"):
            raise ValueError(f"bad side {self.side!r}")
        if self.frame not in (-1, 0, 1):
            raise ValueError(f"bad frame {self.frame!r}")

    @property
    def name(self):
        return f"{self.side}_{FRAME_NAMES[self.frame]}"

    @classmethod
    def from_name(cls, name):
        side, _, frame = name.partition("_")
        if frame not in NAME_FRAMES:
            raise ValueError(f"bad view name {name!r}")
        return cls(side, NAME_FRAMES[frame])

    def other_side(self):
        return View("right" if self.side == "left" else "left", self.frame)

    def shifted(self, df):
        return View(self.side, self.frame + df)


REFERENCE_VIEW = View("left", 0)

THREE_FRAME_VIEWS = tuple(
    View(side, frame) for frame in (-1, 0, 1) for side in ("left", "right")
)
TWO_FRAME_VIEWS = tuple(
    View(side, frame) for frame in (0, 1) for side in ("left", "right")
)

MODE_VIEWS = {"three_frame": THREE_FRAME_VIEWS, "two_frame": TWO_FRAME_VIEWS}

# Warp direction -> relative (side flip, frame delta) from any source view.
DIRECTION_STEPS = {
    "stereo": (True, 0),
    "flow_f": (False, 1),
    "flow_b": (False, -1),
    "cross_f": (True, 1),
    "cross_b": (True, -1),
}


def direction_target(view, direction):
    """Target View of a warp direction from `view`, or None if outside frames."""
    flip, df = DIRECTION_STEPS[direction]
    frame = view.frame + df
    if frame not in (-1, 0, 1):
        return None
    v = view.other_side() if flip else View(view.side, frame)
    return View(v.side, frame)


@dataclass
class StereoWindow:
    """Images of one processing window, keyed by View.

    All images share one (H, W, C) shape; optional per-view validity masks
    mark pixels that data terms should skip.
    """

    images: dict
    masks: dict = field(default_factory=dict)

    def __post_init__(self):
        if REFERENCE_VIEW not in self.images:
            raise DataError("window is missing the reference view (left, frame 0)")
        shape = None
        fixed = {}
        for view, img in self.images.items():
            a = ensure_image(img)
            if shape is None:
                shape = a.shape
            elif a.shape != shape:
                raise DataError(
                    f"view {view.name} shape {a.shape} != window shape {shape}"
                )
            fixed[view] = a
        self.images = fixed
        present = set(self.images)
        if present == set(THREE_FRAME_VIEWS):
            self.mode = "three_frame"
        elif present == set(TWO_FRAME_VIEWS):
            self.mode = "two_frame"
        else:
            raise DataError(
                "window must hold exactly the six three_frame views or the "
                f"four two_frame views, got {sorted(v.name for v in present)}"
            )

    @property
    def views(self):
        return MODE_VIEWS[self.mode]

    @property
    def shape(self):
        return self.images[REFERENCE_VIEW].shape

    @property
    def reference(self):
        return self.images[REFERENCE_VIEW]

    def __contains__(self, view):
        return view in self.images

    def __getitem__(self, view):
        return self.images[view]

    def mask(self, view):
        return self.masks.get(view)

    def directions(self):
        """Warp directions whose target view exists in this window."""
        out = []
        for d in ("stereo", "flow_f", "flow_b", "cross_f", "cross_b"):
            tgt = direction_target(REFERENCE_VIEW, d)
            if tgt is not None and tgt in self.images:
                out.append(d)
        return tuple(out)

    def map_images(self, fn):
        return StereoWindow({v: fn(img) for v, img in self.images.items()}, dict(self.masks))

    def copy(self):
        return StereoWindow(
            {v: img.copy() for v, img in self.images.items()}, dict(self.masks)
        )


@dataclass
class FlowField:
    """Dense pixel displacement field (H, W, 2) with a validity mask."""

    vectors: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] != 2:
            raise ValueError(f"flow must be (H, W, 2), got {v.shape}")
        self.vectors = v
        if self.valid is None:
            self.valid = np.ones(v.shape[:2], dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != v.shape[:2]:
                raise ValueError("valid mask shape mismatch")
        if not np.all(np.isfinite(v[self.valid])):
            raise ValueError("flow has non-finite valid entries")

    @property
    def shape(self):
        return self.vectors.shape[:2]

    def reflected(self):
        """Backward field synthesized by point reflection of the forward field."""
        return FlowField(-self.vectors, self.valid.copy())


@dataclass
class DisparityMap:
    """Dense stereo disparity (H, W) with a validity mask; valid values in (0, width)."""

    values: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        d = np.asarray(self.values, dtype=np.float64)
        if d.ndim != 2:
            raise ValueError(f"disparity must be (H, W), got {d.shape}")
        self.values = d
        if self.valid is None:
            self.valid = np.ones(d.shape, dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != d.shape:
                raise ValueError("valid mask shape mismatch")
        w = d.shape[1]
        ok = self.valid & np.isfinite(d) & (d > 0) & (d < w)
        self.valid = ok

    @property
    def shape(self):
        return self.values.shape
