"""Plane-induced homographies for a calibrated stereo rig.

Conventions
-----------
* Camera frame: X right, Y down, Z forward. Pixels x = (u, v) relate to rays
  by the pinhole intrinsics K; homogeneous pixels are column vectors
  (u, v, 1).
* A scene plane is parameterized by n with n . X = 1 for points X on the
  plane, so 1 / (n . K^-1 x~) is the depth of the surface seen at pixel x.
* A rigid motion (R, t) carries a camera-frame point at frame m to frame
  m+1 as X' = R X - t.
* The right camera sits at +baseline along X: X_right = X_left - b e_x.
* A view transform (R_T, c_T) maps reference-camera points into another
  view's frame as X_V = R_T X + c_T. The induced pixel warp for a plane n is
  exact for surface points:

      H = K (R_T + c_T n^T) K^-1

  which for the temporal motion above reads K (R - t n^T) K^-1.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BehindCameraError,
    GeometryError,
    PointAtInfinityError,
    SingularHomographyError,
)

# Named warp directions out of the reference image (left, frame m).
WARP_DIRECTIONS = ("stereo", "flow_f", "flow_b", "cross_f", "cross_b")


@dataclass(frozen=True)
class CameraRig:
    """Rectified stereo rig: shared intrinsics plus horizontal baseline (meters)."""

    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if self.baseline <= 0:
            raise GeometryError("baseline must be positive")

    def intrinsics(self):
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def intrinsics_inv(self):
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )


@dataclass(frozen=True)
class Plane:
    """Scene plane {X : n . X = 1}; n = (n1, n2, n3)."""

    n: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.n, dtype=np.float64).reshape(3).copy()
        v.flags.writeable = False
        object.__setattr__(self, "n", v)
        if not np.all(np.isfinite(v)):
            raise GeometryError("plane coefficients must be finite")

    @classmethod
    def fronto_parallel(cls, depth):
        if depth <= 0:
            raise GeometryError("depth must be positive")
        return cls(np.array([0.0, 0.0, 1.0 / depth]))

    def depth_at(self, rig, x):
        """Depth of the plane surface along the ray of pixel(s) x; no sign check."""
        rays = pixel_rays(rig, x)
        denom = rays @ self.n
        with np.errstate(divide="ignore"):
            return np.where(denom != 0, 1.0 / denom, np.inf)


@dataclass(frozen=True)
class RigidMotion:
    """Rigid motion X' = R X - t between consecutive frames of one object."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3).copy()
        t = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise GeometryError("motion entries must be finite")
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise GeometryError("rotation determinant must be +1")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def inverse(self):
        # X = R^T (X' + t) = R^T X' - (-R^T t)
        return RigidMotion(self.rotation.T, -(self.rotation.T @ self.translation))

    def compose(self, other):
        """Motion equal to applying `other` first, then self."""
        r = self.rotation @ other.rotation
        t = self.rotation @ other.translation + self.translation
        return RigidMotion(r, t)

    def apply(self, points):
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T - self.translation

    def is_identity(self, tol=1e-12):
        return (
            np.abs(self.rotation - np.eye(3)).max() <= tol
            and np.abs(self.translation).max() <= tol
        )


@dataclass(frozen=True)
class Homography:
    """3x3 projective pixel map with non-vanishing determinant."""

    matrix: np.ndarray
    _inv: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3).copy()
        det = np.linalg.det(m)
        if not np.isfinite(det) or abs(det) < 1e-12:
            raise SingularHomographyError(f"determinant {det:.3e}")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    def inverse(self):
        return Homography(np.linalg.inv(self.matrix))

    def apply(self, xy):
        """Map pixel positions (N, 2) -> (N, 2) with perspective division."""
        xy = np.asarray(xy, dtype=np.float64)
        squeeze = xy.ndim == 1
        pts = np.atleast_2d(xy)
        hom = np.concatenate([pts, np.ones((len(pts), 1))], axis=1)
        mapped = hom @ self.matrix.T
        w = mapped[:, 2]
        if np.any(np.abs(w) <= 1e-9):
            raise PointAtInfinityError("homogeneous scale vanished")
        out = mapped[:, :2] / w[:, None]
        return out[0] if squeeze else out


def pixel_grid(width, height):
    """(H, W, 2) array of pixel-center positions (x, y)."""
    xs, ys = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    return np.stack([xs, ys], axis=-1)


def pixel_rays(rig, x):
    """K^-1 x~ for pixel positions x (..., 2) -> rays (..., 3)."""
    x = np.asarray(x, dtype=np.float64)
    u = (x[..., 0] - rig.cx) / rig.fx
    v = (x[..., 1] - rig.cy) / rig.fy
    return np.stack([u, v, np.ones_like(u)], axis=-1)


def homography_from_transform(rig, r_t, c_t, plane):
    """H = K (R_T + c_T n^T) K^-1 for the view transform X_V = R_T X + c_T."""
    k = rig.intrinsics()
    k_inv = rig.intrinsics_inv()
    core = r_t + np.outer(c_t, plane.n)
    return Homography(k @ core @ k_inv)


def homography_from_plane_motion(rig, motion, plane):
    """Temporal warp K (R - t n^T) K^-1 of the reference onto the next frame."""
    return homography_from_transform(rig, motion.rotation, -motion.translation, plane)


def direction_transform(rig, motion, direction):
    """View transform (R_T, c_T) of a named warp direction from the reference.

    stereo:  right camera, same frame.
    flow_f:  left camera, next frame.      flow_b:  left camera, previous frame.
    cross_f: right camera, next frame.     cross_b: right camera, previous frame.
    """
    b = np.array([rig.baseline, 0.0, 0.0])
    r = motion.rotation
    t = motion.translation
    if direction == "stereo":
        return np.eye(3), -b
    if direction == "flow_f":
        return r, -t
    if direction == "flow_b":
        return r.T, r.T @ t
    if direction == "cross_f":
        return r, -t - b
    if direction == "cross_b":
        return r.T, r.T @ t - b
    raise ValueError(f"unknown warp direction {direction!r}")


def warp_homographies(rig, plane, motion, directions=WARP_DIRECTIONS):
    """Homographies of the requested warp directions for one plane/motion pair."""
    out = {}
    for d in directions:
        r_t, c_t = direction_transform(rig, motion, d)
        out[d] = homography_from_transform(rig, r_t, c_t, plane)
    return out


def flow_from_homography(hom, x):
    """Pixel displacement field u(x) = H(x) - x for positions x (..., 2)."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1, 2)
    return (hom.apply(flat) - flat).reshape(x.shape)


def disparity_from_plane(rig, plane, x):
    """Stereo disparity of the plane surface at pixel(s) x.

    d(x) = fx * baseline * (n . K^-1 x~). Raises BehindCameraError if any
    queried point has non-positive depth.
    """
    rays = pixel_rays(rig, x)
    inv_depth = rays @ plane.n
    if np.any(inv_depth <= 0):
        raise BehindCameraError("plane has non-positive depth at queried pixels")
    return rig.fx * rig.baseline * inv_depth


def plane_disparity_values(rig, plane, x):
    """Like disparity_from_plane but returns (values, positive_depth_mask)."""
    inv_depth = pixel_rays(rig, x) @ plane.n
    return rig.fx * rig.baseline * inv_depth, inv_depth > 0


def transform_plane(plane, r_t, c_t):
    """Plane coefficients in a view reached by X_V = R_T X + c_T.

    n_V = (R_T n) / (1 + n . R_T^T c_T); raises if the plane passes through
    the new origin (denominator ~ 0).
    """
    denom = 1.0 + plane.n @ (np.asarray(r_t).T @ np.asarray(c_t))
    if abs(denom) < 1e-12:
        raise SingularHomographyError("plane passes through target camera center")
    return Plane((np.asarray(r_t) @ plane.n) / denom)


def transform_motion(motion, r_t, c_t):
    """Conjugate a motion into a view's frame: M_V = T M T^-1 for T = (R_T, c_T)."""
    r_t = np.asarray(r_t, dtype=np.float64)
    c_t = np.asarray(c_t, dtype=np.float64)
    r_v = r_t @ motion.rotation @ r_t.T
    t_v = r_v @ c_t + r_t @ motion.translation - c_t
    return RigidMotion(r_v, t_v)


def plane_from_disparity_samples(rig, xy, disparities, weights=None):
    """Least-squares plane from (pixel, disparity) samples.

    Solves disparity = fx * b * (n . K^-1 x~) for n. Returns None when the
    normal system is singular (fewer than 3 well-spread samples).
    """
    rays = pixel_rays(rig, np.asarray(xy, dtype=np.float64))
    a = rig.fx * rig.baseline * rays
    d = np.asarray(disparities, dtype=np.float64)
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)
        a = a * w[:, None]
        d = d * w
    ata = a.T @ a
    if np.linalg.matrix_rank(ata) < 3 or np.linalg.cond(ata) > 1e12:
        return None
    n = np.linalg.solve(ata, a.T @ d)
    return Plane(n)
