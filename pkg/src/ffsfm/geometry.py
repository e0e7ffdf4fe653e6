"""Core geometric types and closed-form alignment primitives.

Conventions used throughout the package:

* 3D points are float64 arrays of shape (3,) or (N, 3).  Pixel coordinates
  are (u, v) with the origin at the top-left pixel center, u along width.
* Camera poses are stored camera-to-world; the world-to-camera map is
  obtained with :meth:`RigidTransform.inverse`.
* :func:`weighted_procrustes` returns the transform that maps ``src``
  onto ``dst``.

All types are immutable values after construction and all operations are
pure functions, so everything here is safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInput, ShapeMismatch

_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class RigidTransform:
    """Similarity transform ``x -> scale * rotation @ x + translation``.

    ``scale`` is 1.0 in rigid mode.  The rotation must be orthonormal with
    determinant +1.
    """

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        tra = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if rot.shape != (3, 3):
            raise ShapeMismatch(f"rotation must be 3x3, got {rot.shape}")
        if not np.isfinite(rot).all() or not np.isfinite(tra).all():
            raise ValueError("non-finite transform entries")
        err = np.linalg.norm(rot.T @ rot - np.eye(3))
        if err > _ORTHO_TOL or np.linalg.det(rot) < 0:
            raise ValueError(f"rotation is not proper orthonormal (|R^T R - I| = {err:g})")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply to a (3,) point or (N, 3) array of points."""
        pts = np.asarray(points, dtype=np.float64)
        return self.scale * (pts @ self.rotation.T) + self.translation

    def inverse(self) -> "RigidTransform":
        inv_rot = self.rotation.T
        inv_scale = 1.0 / self.scale
        return RigidTransform(inv_rot, -inv_scale * (inv_rot @ self.translation), inv_scale)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix (scale folded into the linear block)."""
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation
        m[:3, 3] = self.translation
        return m


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Composition ``(a o b)(x) = a(b(x))``; scales multiply."""
    return RigidTransform(
        a.rotation @ b.rotation,
        a.scale * (a.rotation @ b.translation) + a.translation,
        a.scale * b.scale,
    )


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels, zero skew."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def project(self, points: np.ndarray) -> np.ndarray:
        """Project (N, 3) camera-frame points to (N, 2) pixel coordinates.

        No cheirality handling; callers must mask non-positive depths.
        """
        pts = np.asarray(points, dtype=np.float64)
        z = pts[:, 2]
        return np.stack([self.fx * pts[:, 0] / z + self.cx, self.fy * pts[:, 1] / z + self.cy], axis=1)


@dataclass(frozen=True)
class Pointmap:
    """Dense per-pixel 3D points with a validity mask.

    ``points`` has shape (H, W, 3); ``valid`` is an (H, W) bool mask.
    Invalid entries may hold arbitrary values and are never interpreted.
    """

    points: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 3 or pts.shape[2] != 3 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise ShapeMismatch(f"points must be (H, W, 3), got {pts.shape}")
        if self.valid is None:
            mask = np.ones(pts.shape[:2], dtype=bool)
        else:
            mask = np.asarray(self.valid, dtype=bool)
            if mask.shape != pts.shape[:2]:
                raise ShapeMismatch("valid mask does not match points grid")
        if not np.isfinite(pts[mask]).all():
            raise ValueError("valid pointmap entries must be finite")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "valid", mask)

    @property
    def height(self) -> int:
        return self.points.shape[0]

    @property
    def width(self) -> int:
        return self.points.shape[1]

    def valid_points(self) -> np.ndarray:
        """Flat (M, 3) array of the valid points."""
        return self.points[self.valid]


@dataclass(frozen=True)
class ConfidenceMap:
    """Per-pixel confidence scores, one grid cell per pointmap pixel.

    Values are >= 1 so that log-confidence weights are >= 0.
    """

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ShapeMismatch(f"confidence must be (H, W), got {vals.shape}")
        if not np.isfinite(vals).all():
            raise ValueError("confidence values must be finite")
        if vals.min() < 1.0 - 1e-12:
            raise ValueError("confidence values must be >= 1")
        object.__setattr__(self, "values", vals)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def apply(t: RigidTransform, pm: Pointmap) -> Pointmap:
    """Transform every valid point of a pointmap; invalid entries pass through."""
    out = pm.points.copy()
    out[pm.valid] = t.transform(pm.points[pm.valid])
    return Pointmap(out, pm.valid.copy())


def pixel_centers(height: int, width: int) -> np.ndarray:
    """(H, W, 2) grid of (u, v) pixel-center coordinates."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([u, v], axis=-1)


def weighted_procrustes(
    src: np.ndarray,
    dst: np.ndarray,
    weights: np.ndarray = None,
    mode: str = "rigid",
) -> RigidTransform:
    """Least-squares transform T minimizing sum_p w_p ||T(src_p) - dst_p||^2.

    Closed-form weighted Umeyama solution.  ``mode`` selects "rigid"
    (scale fixed at 1) or "similarity" (least-squares scale).  The rotation
    determinant is forced to +1 by flipping the sign of the smallest
    singular value, so a reflection is never returned.

    Raises:
        DegenerateInput: fewer than 3 positively weighted points, or the
            weighted centered source covariance has rank < 2.
        ShapeMismatch: src/dst/weights shapes disagree.
    """
    if mode not in ("rigid", "similarity"):
        raise ValueError(f"unknown procrustes mode {mode!r}")
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.ndim != 2 or src.shape[1] != 3 or src.shape != dst.shape:
        raise ShapeMismatch(f"expected matching (N, 3) arrays, got {src.shape} / {dst.shape}")
    if weights is None:
        w = np.ones(len(src))
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if w.shape[0] != src.shape[0]:
            raise ShapeMismatch("weights length does not match points")
        if (w < 0).any():
            raise ValueError("weights must be nonnegative")
    if int((w > 0).sum()) < 3:
        raise DegenerateInput("need at least 3 positively weighted correspondences")

    wsum = w.sum()
    mu_s = (w[:, None] * src).sum(axis=0) / wsum
    mu_d = (w[:, None] * dst).sum(axis=0) / wsum
    cs = src - mu_s
    cd = dst - mu_d

    # rank of the weighted source scatter decides solvability
    src_cov = (w[:, None] * cs).T @ cs / wsum
    ev = np.linalg.eigvalsh(src_cov)
    if ev[1] <= 1e-12 * max(ev[2], 1e-30):
        raise DegenerateInput("source points are collinear or coincident")

    cov = (w[:, None] * cd).T @ cs / wsum
    u_mat, d_vals, vt = np.linalg.svd(cov)
    sign = np.ones(3)
    if np.linalg.det(u_mat) * np.linalg.det(vt) < 0:
        sign[2] = -1.0
    rot = u_mat @ np.diag(sign) @ vt
    if mode == "similarity":
        src_var = (w * (cs ** 2).sum(axis=1)).sum() / wsum
        scale = float((d_vals * sign).sum() / src_var)
        if not scale > 0:
            raise DegenerateInput("non-positive similarity scale")
    else:
        scale = 1.0
    tra = mu_d - scale * (rot @ mu_s)
    return RigidTransform(rot, tra, scale)


def rotation_angle_deg(rot: np.ndarray) -> float:
    """Rotation angle of a 3x3 rotation matrix, in degrees.

    atan2 of the skew part against the trace stays accurate near 0 where
    the plain arccos form loses half the significant digits.
    """
    axis = 0.5 * np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
    sin = np.linalg.norm(axis)
    cos = (np.trace(rot) - 1.0) / 2.0
    return float(np.degrees(np.arctan2(sin, cos)))
