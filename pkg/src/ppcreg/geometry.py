"""Rigid transforms, axis-angle motions and the C-arm projection model.

Conventions used throughout the package:

* Column vectors. A :class:`RigidTransform` ``T`` maps volume coordinates into
  the world (C-arm) frame: ``x_world = R @ x_vol + t``.
* A motion vector ``dv`` is a length-6 array ``(rx, ry, rz, tx, ty, tz)``;
  the first three entries are an axis-angle rotation in radians about the
  world origin, the last three a translation in mm.
* Detector pixel coordinates ``(u, v)`` are continuous; ``(0, 0)`` is the
  centre of the first detector pixel, ``u`` runs along ``row_axis`` and ``v``
  along ``col_axis``. Image arrays are indexed ``data[v, u]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BranchSingularityError, InvalidArgumentError, NoIntersectionError

ORTHO_TOL = 1e-9
SMALL_ANGLE = 1e-12
BRANCH_MARGIN = 1e-6


def skew(v):
    """Cross-product matrix, ``skew(a) @ b == cross(a, b)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _as_vec3(v, name):
    a = np.asarray(v, dtype=float).reshape(-1)
    if a.shape != (3,):
        raise InvalidArgumentError(f"{name} must be a 3-vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidArgumentError(f"{name} must be finite")
    return a


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rigid motion ``x -> R x + t`` (mm)."""

    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise InvalidArgumentError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidArgumentError("transform entries must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) >= ORTHO_TOL:
            raise InvalidArgumentError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) >= ORTHO_TOL:
            raise InvalidArgumentError("rotation must have determinant +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, t) -> RigidTransform:
        return cls(np.eye(3), _as_vec3(t, "translation"))

    @classmethod
    def from_matrix(cls, m) -> RigidTransform:
        """Build from a 4x4 homogeneous matrix (nested lists or array)."""
        m = np.asarray(m, dtype=float)
        if m.shape == (16,):
            m = m.reshape(4, 4)
        if m.shape != (4, 4):
            raise InvalidArgumentError(f"expected a 4x4 matrix, got shape {m.shape}")
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=0.0):
            raise InvalidArgumentError("last row of a rigid 4x4 matrix must be (0, 0, 0, 1)")
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def to_list(self) -> list:
        """Row-major 4x4 nested list, the manifest serialization."""
        return self.matrix.tolist()

    def apply(self, points) -> np.ndarray:
        """Transform a point ``(3,)`` or a batch ``(N, 3)``."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def apply_vector(self, vectors) -> np.ndarray:
        """Rotate direction vectors (no translation)."""
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    def __repr__(self):
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def exp_motion(dv) -> RigidTransform:
    """Convert a 6-dof axis-angle motion into a rigid transform.

    The rotation is the Rodrigues exponential of ``dv[:3]``; the translation is
    ``dv[3:]`` unchanged, so for small motions ``exp_motion(dv)`` moves a point
    ``x`` by ``cross(dv[:3], x) + dv[3:]``.
    """
    dv = np.asarray(dv, dtype=float).reshape(-1)
    if dv.shape != (6,):
        raise InvalidArgumentError(f"motion vector must have 6 entries, got {dv.shape}")
    if not np.all(np.isfinite(dv)):
        raise InvalidArgumentError("motion vector must be finite")
    return RigidTransform(rotvec_to_matrix(dv[:3]), dv[3:])


def rotvec_to_matrix(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = math.sqrt(float(w @ w))
    K = skew(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    R = np.eye(3) + a * K + b * (K @ K)
    # one polar step keeps det/orthonormality at machine precision
    return 1.5 * R - 0.5 * R @ R.T @ R


def matrix_to_rotvec(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    axis2s = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = 0.5 * np.linalg.norm(axis2s)
    c = 0.5 * (np.trace(R) - 1.0)
    theta = math.atan2(s, c)
    if theta > math.pi - BRANCH_MARGIN:
        raise BranchSingularityError(
            f"rotation angle {theta:.9f} rad is at the pi branch point; axis-angle is ambiguous"
        )
    if theta < 1e-8:
        # sin(theta)/theta ~ 1 - theta^2/6
        return 0.5 * axis2s * (1.0 + theta * theta / 6.0)
    return axis2s * (theta / (2.0 * s))


def log_transform(T: RigidTransform) -> np.ndarray:
    """Inverse of :func:`exp_motion`; raises near a rotation angle of pi."""
    return np.concatenate([matrix_to_rotvec(T.rotation), T.translation])


def compose(T_a: RigidTransform, T_b: RigidTransform) -> RigidTransform:
    """``T_a @ T_b``: apply ``T_b`` first, then ``T_a``."""
    R = T_a.rotation @ T_b.rotation
    # re-orthonormalize so long products stay within the invariant tolerance
    R = 1.5 * R - 0.5 * R @ R.T @ R
    return RigidTransform(R, T_a.rotation @ T_b.translation + T_a.translation)


def invert(T: RigidTransform) -> RigidTransform:
    Rt = T.rotation.T
    return RigidTransform(Rt, -Rt @ T.translation)


def relative_transform(T_i: RigidTransform, T_j: RigidTransform) -> RigidTransform:
    """Transform ``T_hat`` with ``compose(T_hat, T_j) == T_i``."""
    return compose(T_i, invert(T_j))


def rotation_about(axis, angle, center=(0.0, 0.0, 0.0)) -> RigidTransform:
    """Rotation by ``angle`` radians about a line through ``center``."""
    axis = _as_vec3(axis, "axis")
    axis = axis / np.linalg.norm(axis)
    R = rotvec_to_matrix(axis * angle)
    c = _as_vec3(center, "center")
    return RigidTransform(R, c - R @ c)


@dataclass(frozen=True, eq=False)
class ProjectionGeometry:
    """Point source and flat detector, all in world coordinates (mm)."""

    source: np.ndarray
    detector_origin: np.ndarray
    row_axis: np.ndarray
    col_axis: np.ndarray
    pixel_spacing: tuple[float, float]
    size: tuple[int, int]  # (width, height) in pixels

    def __post_init__(self):
        for name in ("source", "detector_origin", "row_axis", "col_axis"):
            v = _as_vec3(getattr(self, name), name)
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        su, sv = (float(s) for s in self.pixel_spacing)
        w, h = (int(n) for n in self.size)
        if su <= 0 or sv <= 0:
            raise InvalidArgumentError("pixel spacing must be positive")
        if w < 1 or h < 1:
            raise InvalidArgumentError("detector size must be at least 1x1")
        object.__setattr__(self, "pixel_spacing", (su, sv))
        object.__setattr__(self, "size", (w, h))
        r, c = self.row_axis, self.col_axis
        if abs(r @ r - 1.0) > ORTHO_TOL or abs(c @ c - 1.0) > ORTHO_TOL:
            raise InvalidArgumentError("detector axes must be unit vectors")
        if abs(r @ c) > ORTHO_TOL:
            raise InvalidArgumentError("detector axes must be orthogonal")
        if abs((self.source - self.detector_origin) @ self.normal) < 1e-9:
            raise InvalidArgumentError("source lies on the detector plane")

    @property
    def normal(self) -> np.ndarray:
        """Detector plane normal ``row_axis x col_axis``."""
        return np.cross(self.row_axis, self.col_axis)

    @property
    def width(self) -> int:
        return self.size[0]

    @property
    def height(self) -> int:
        return self.size[1]

    def pixel_to_world(self, pixels) -> np.ndarray:
        """World position of continuous detector coordinates ``(..., 2)``."""
        px = np.asarray(pixels, dtype=float)
        su, sv = self.pixel_spacing
        return (
            self.detector_origin
            + (px[..., 0:1] * su) * self.row_axis
            + (px[..., 1:2] * sv) * self.col_axis
        )

    def to_dict(self) -> dict:
        return {
            "source": self.source.tolist(),
            "detector_origin": self.detector_origin.tolist(),
            "row_axis": self.row_axis.tolist(),
            "col_axis": self.col_axis.tolist(),
            "pixel_spacing": list(self.pixel_spacing),
            "size": list(self.size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> ProjectionGeometry:
        return cls(
            source=d["source"],
            detector_origin=d["detector_origin"],
            row_axis=d["row_axis"],
            col_axis=d["col_axis"],
            pixel_spacing=tuple(d["pixel_spacing"]),
            size=tuple(d["size"]),
        )


def carm_geometry(
    source_isocenter=750.0,
    source_detector=1200.0,
    size=(256, 256),
    pixel_spacing=(1.2, 1.2),
) -> ProjectionGeometry:
    """C-arm looking along world +y with the isocentre at the world origin.

    The source sits at ``(0, -source_isocenter, 0)``, the detector is centred on
    the principal ray, ``u`` runs along +x and ``v`` along -z (head up).
    """
    if not 0 < source_isocenter < source_detector:
        raise InvalidArgumentError("need 0 < source-isocentre < source-detector distance")
    w, h = size
    su, sv = pixel_spacing
    row = np.array([1.0, 0.0, 0.0])
    col = np.array([0.0, 0.0, -1.0])
    center = np.array([0.0, source_detector - source_isocenter, 0.0])
    origin = center - 0.5 * (w - 1) * su * row - 0.5 * (h - 1) * sv * col
    return ProjectionGeometry(
        source=np.array([0.0, -source_isocenter, 0.0]),
        detector_origin=origin,
        row_axis=row,
        col_axis=col,
        pixel_spacing=(su, sv),
        size=(w, h),
    )


def project(point, geom: ProjectionGeometry) -> np.ndarray:
    """Perspective projection of world points ``(3,)`` or ``(N, 3)`` to pixels."""
    x = np.asarray(point, dtype=float)
    nrm = geom.normal
    d = x - geom.source
    denom = d @ nrm
    if np.any(np.abs(denom) < 1e-12):
        raise NoIntersectionError("ray from the source is parallel to the detector plane")
    lam = ((geom.detector_origin - geom.source) @ nrm) / denom
    hit = geom.source + lam[..., None] * d if d.ndim > 1 else geom.source + lam * d
    rel = hit - geom.detector_origin
    su, sv = geom.pixel_spacing
    return np.stack([rel @ geom.row_axis / su, rel @ geom.col_axis / sv], axis=-1)


def backproject_ray(pixel, geom: ProjectionGeometry):
    """Ray ``(origin, unit direction)`` from the source through a detector pixel.

    Accepts a single pixel ``(2,)`` or a batch ``(N, 2)``; for a batch the
    direction is ``(N, 3)``.
    """
    px = np.asarray(pixel, dtype=float)
    if not np.all(np.isfinite(px)):
        raise InvalidArgumentError("pixel coordinates must be finite")
    d = geom.pixel_to_world(px) - geom.source
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    return geom.source.copy(), d


def projection_jacobian(points, geom: ProjectionGeometry) -> np.ndarray:
    """d(pixel)/d(world point) for a batch of points, shape ``(N, 2, 3)``."""
    x = np.atleast_2d(np.asarray(points, dtype=float))
    nrm = geom.normal
    d = x - geom.source
    denom = d @ nrm
    k = (geom.detector_origin - geom.source) @ nrm
    su, sv = geom.pixel_spacing
    axes = np.stack([geom.row_axis / su, geom.col_axis / sv])  # (2, 3)
    # pixel = axes @ (s + k d / (d.n)) - const
    ad = d @ axes.T  # (N, 2)
    J = (k / denom)[:, None, None] * (
        axes[None, :, :] - ad[:, :, None] * nrm[None, None, :] / denom[:, None, None]
    )
    return J
