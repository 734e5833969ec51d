"""2D correspondences for projected contour points and their PPC plane normals.

Each projected contour point ``p`` of the moving image is matched by a 1D
zero-normalized cross-correlation search along its projected gradient in
the fixed image. The match ``p'`` and the point's gradient define the plane
through the X-ray source on which the moved 3D point has to lie.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import _kernels
from .contour import ContourPointSet
from .drr import Image2D
from .errors import InvalidArgumentError, NoCorrespondenceError
from .geometry import ProjectionGeometry, RigidTransform, project, projection_jacobian

DEGENERATE_GRADIENT = 1e-9


@dataclass(frozen=True)
class CorrespondenceParams:
    patch: int = 11  # px, odd
    search_range: float = 30.0  # px
    step: float = 0.5  # px
    min_score: float = 0.3
    # scores within tie_tol of the best count as ties; the smallest shift wins
    tie_tol: float = 0.01

    def __post_init__(self):
        if self.patch < 3 or self.patch % 2 == 0:
            raise InvalidArgumentError("patch size must be an odd integer >= 3")
        if not (self.search_range >= 0 and self.step > 0):
            raise InvalidArgumentError("search_range must be >= 0 and step > 0")
        if not -1.0 <= self.min_score <= 1.0:
            raise InvalidArgumentError("min_score must lie in [-1, 1]")
        if self.tie_tol < 0:
            raise InvalidArgumentError("tie_tol must be >= 0")

    def offsets(self) -> np.ndarray:
        n = int(np.floor(self.search_range / self.step + 1e-9))
        return np.arange(-n, n + 1) * self.step


class Correspondence(NamedTuple):
    index: int
    p: np.ndarray
    p_prime: np.ndarray
    dp: np.ndarray
    n: np.ndarray
    weight: float
    score: float


@dataclass(frozen=True, eq=False)
class Correspondences:
    """Struct-of-arrays batch of matches; ``index`` refers into the contour set used."""

    index: np.ndarray
    p: np.ndarray
    p_prime: np.ndarray
    normal: np.ndarray
    weight: np.ndarray
    score: np.ndarray
    plane_point: np.ndarray  # (3,) point shared by every plane: the X-ray source

    @property
    def dp(self) -> np.ndarray:
        return self.p_prime - self.p

    def __len__(self):
        return len(self.index)

    def __getitem__(self, k) -> Correspondence:
        return Correspondence(int(self.index[k]), self.p[k], self.p_prime[k], self.dp[k],
                              self.normal[k], float(self.weight[k]), float(self.score[k]))

    def __iter__(self):
        return (self[k] for k in range(len(self)))

    def mean_displacement(self) -> float:
        return float(np.mean(np.linalg.norm(self.dp, axis=1))) if len(self) else float("nan")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["index", "p_u", "p_v", "pp_u", "pp_v", "score"])
            for k in range(len(self)):
                wr.writerow([int(self.index[k]), *(repr(float(v)) for v in self.p[k]),
                             *(repr(float(v)) for v in self.p_prime[k]), repr(float(self.score[k]))])


def projected_gradient_directions(points_world, grads_world, geom: ProjectionGeometry):
    """Unit image-space direction of each projected 3D gradient and its raw length."""
    J = projection_jacobian(points_world, geom)
    d = np.einsum("nij,nj->ni", J, grads_world)
    length = np.linalg.norm(d, axis=1)
    scale = np.linalg.norm(grads_world, axis=1) * np.max(np.linalg.norm(J, axis=(1, 2)))
    ok = length > DEGENERATE_GRADIENT * np.maximum(scale, 1e-300)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(ok[:, None], d / length[:, None], 0.0)
    return unit, ok


def plane_normals(p_prime, dirs2d, grads_world, geom: ProjectionGeometry) -> np.ndarray:
    """Normals of the planes through the source and the detector line at ``p'``.

    The detector line runs perpendicular to the projected gradient
    ``dirs2d`` (unit, pixel units). Normals are oriented along the gradient.
    """
    su, sv = geom.pixel_spacing
    grad_det = dirs2d[:, :1] * su * geom.row_axis + dirs2d[:, 1:] * sv * geom.col_axis
    tangent = np.cross(geom.normal, grad_det)
    ray = geom.pixel_to_world(p_prime) - geom.source
    n = np.cross(ray, tangent)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    flip = np.einsum("ij,ij->i", n, grads_world) < 0
    n[flip] *= -1.0
    return n


def compute_plane_normal(w, g, dp, geom: ProjectionGeometry, T: RigidTransform) -> np.ndarray:
    """Unit PPC plane normal for a single contour point (volume-frame ``w``, ``g``)."""
    x = T.apply(np.asarray(w, dtype=float))[None]
    gw = T.apply_vector(np.asarray(g, dtype=float))[None]
    dirs, ok = projected_gradient_directions(x, gw, geom)
    if not ok[0]:
        raise InvalidArgumentError("projected gradient is degenerate")
    p_prime = project(x, geom) + np.asarray(dp, dtype=float)[None]
    return plane_normals(p_prime, dirs, gw, geom)[0]


def _refine_peak(scores, k):
    """Parabolic sub-sample offset of the peak at ``k`` (in samples, |.| <= 0.5)."""
    if k == 0 or k == len(scores) - 1 or scores[k] >= 1.0 - 1e-9:
        # a perfect sample match is already exact; skip the biased fit
        return 0.0
    a, b, c = scores[k - 1], scores[k], scores[k + 1]
    if not (np.isfinite(a) and np.isfinite(c)):
        return 0.0
    denom = a - 2.0 * b + c
    if denom >= 0:
        return 0.0
    return float(np.clip(0.5 * (a - c) / denom, -0.5, 0.5))


def find_correspondences(
    moving: Image2D,
    fixed: Image2D,
    points: ContourPointSet,
    geom: ProjectionGeometry,
    T: RigidTransform,
    params: CorrespondenceParams = CorrespondenceParams(),
) -> Correspondences:
    """Match every contour point of ``moving`` into ``fixed``.

    Points whose patch leaves the image, whose profile is undefined (flat
    patches) or whose best score is below ``min_score`` are dropped.
    """
    if moving.data.shape != fixed.data.shape:
        raise InvalidArgumentError("moving and fixed images must share dimensions")
    xw = T.apply(points.points)
    gw = T.apply_vector(points.gradients)
    p = project(xw, geom)
    dirs, ok = projected_gradient_directions(xw, gw, geom)
    offsets = params.offsets()
    half = params.patch // 2
    prof = _kernels.line_search_zncc(
        np.ascontiguousarray(moving.data), np.ascontiguousarray(fixed.data),
        np.ascontiguousarray(p), np.ascontiguousarray(dirs), half, offsets,
    )
    keep, shift, best = [], [], []
    for n in range(len(points)):
        if not ok[n]:
            continue
        row = prof[n]
        valid = np.isfinite(row)
        if not valid.any():
            continue
        top = np.max(row[valid])
        if top < params.min_score:
            continue
        ties = np.flatnonzero(valid & (row >= top - params.tie_tol - 1e-12))
        k = int(ties[np.argmin(np.abs(offsets[ties]))])
        # climb to the local maximum the chosen candidate belongs to
        while k + 1 < len(row) and np.isfinite(row[k + 1]) and row[k + 1] > row[k]:
            k += 1
        while k > 0 and np.isfinite(row[k - 1]) and row[k - 1] > row[k]:
            k -= 1
        keep.append(n)
        shift.append(offsets[k] + _refine_peak(row, k) * params.step)
        best.append(row[k])
    if not keep:
        raise NoCorrespondenceError("no contour point produced a valid match")
    keep = np.asarray(keep)
    shift = np.asarray(shift)
    score = np.asarray(best)
    p_prime = p[keep] + shift[:, None] * dirs[keep]
    normal = plane_normals(p_prime, dirs[keep], gw[keep], geom)
    return Correspondences(keep, p[keep], p_prime, normal, np.maximum(score, 0.0), score,
                           geom.source.copy())


def exact_correspondences(
    points: ContourPointSet,
    geom: ProjectionGeometry,
    T_current: RigidTransform,
    T_true: RigidTransform,
) -> Correspondences:
    """Noise-free matches: ``p'`` is the true projection of each point.

    Used as the oracle for convergence studies of the PPC solver.
    """
    xw = T_current.apply(points.points)
    gw = T_current.apply_vector(points.gradients)
    dirs, ok = projected_gradient_directions(xw, gw, geom)
    idx = np.flatnonzero(ok)
    p = project(xw[idx], geom)
    p_prime = project(T_true.apply(points.points[idx]), geom)
    normal = plane_normals(p_prime, dirs[idx], gw[idx], geom)
    ones = np.ones(len(idx))
    return Correspondences(idx, p, p_prime, normal, ones, ones.copy(), geom.source.copy())
