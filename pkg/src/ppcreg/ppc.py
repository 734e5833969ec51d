"""Point-to-plane correspondence solver and the iterative registration loop.

Every correspondence constrains the moved contour point ``w + cross(omega, w) + t``
to its plane through the X-ray source. With ``w`` in the current world frame
and ``q`` any point of the plane (the source), the constraint is the row

    [cross(n, w), -n] . dv = n.w - n.q

which is zero on the right-hand side when the point already lies on its plane.
The motion ``dv = (omega, t)`` is applied as ``T <- exp_motion(dv) @ T``.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .contour import ContourPointSet, select_apparent_contour
from .correspondence import (
    Correspondences,
    CorrespondenceParams,
    exact_correspondences,
    find_correspondences,
)
from .drr import BONE, Image2D, RenderStyle, render, to_uint8, write_pgm
from .errors import (
    InsufficientConstraintsError,
    InvalidArgumentError,
    PPCRegError,
    RegistrationError,
    SingularSystemError,
)
from .geometry import ProjectionGeometry, RigidTransform, compose, exp_motion, project
from .volume import Volume

MAX_CONDITION = 1e12
MIN_CONSTRAINTS = 6


@dataclass(frozen=True, eq=False)
class PPCSystem:
    A: np.ndarray  # (N, 6)
    b: np.ndarray  # (N,)
    weights: np.ndarray  # (N,)

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        b = np.asarray(self.b, dtype=float).reshape(-1)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if A.ndim != 2 or A.shape[1] != 6 or A.shape[0] != b.shape[0] or w.shape != b.shape:
            raise InvalidArgumentError("PPC system needs A (N, 6), b (N,), weights (N,)")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise InvalidArgumentError("PPC rows must be finite")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise InvalidArgumentError("weights must be finite and >= 0")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return len(self.b)

    def residual(self, dv) -> float:
        """Weighted squared residual ``sum_i W_i (A_i dv - b_i)^2``."""
        r = self.A @ np.asarray(dv, dtype=float) - self.b
        return float(self.weights @ (r * r))


def assemble_rows(points_world, normals, plane_points, weights) -> PPCSystem:
    """Rows for current-frame points, unit normals and one point on each plane."""
    x = np.asarray(points_world, dtype=float)
    n = np.asarray(normals, dtype=float)
    A = np.hstack([np.cross(n, x), -n])
    b = np.einsum("ij,ij->i", n, x) - np.einsum("ij,ij->i", n, np.broadcast_to(plane_points, x.shape))
    return PPCSystem(A, b, weights)


def assemble(corr: Correspondences, points: ContourPointSet, T_current: RigidTransform) -> PPCSystem:
    """PPC system for correspondences of ``points`` seen at pose ``T_current``."""
    if len(corr) < MIN_CONSTRAINTS:
        raise InsufficientConstraintsError(f"{len(corr)} correspondences, need {MIN_CONSTRAINTS}")
    x = T_current.apply(points.points[corr.index])
    return assemble_rows(x, corr.normal, corr.plane_point, corr.weight)


def solve(system: PPCSystem) -> np.ndarray:
    """Weighted least-squares motion ``argmin ||W^1/2 (A dv - b)||``.

    Uses an SVD of ``W^1/2 A``; the condition number of the normal matrix
    ``A^T W A`` is the square of its singular-value ratio.
    """
    if len(system) < MIN_CONSTRAINTS:
        raise InsufficientConstraintsError(f"{len(system)} rows, need {MIN_CONSTRAINTS}")
    sw = np.sqrt(system.weights)
    M = system.A * sw[:, None]
    y = system.b * sw
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    if s[0] == 0 or s[-1] <= s[0] * 1e-300:
        raise SingularSystemError("PPC system is rank deficient", float("inf"))
    cond = (s[0] / s[-1]) ** 2
    if not cond < MAX_CONDITION:
        raise SingularSystemError("PPC normal matrix is ill-conditioned", cond)
    return Vt.T @ ((U.T @ y) / s)


def solve_robust(system: PPCSystem, seed: int = 0, inlier_mm: float = 1.5,
                 n_hypotheses: int = 200, sample_size: int = 12, irls_steps: int = 5):
    """Outlier-resistant variant of :func:`solve` for noisy correspondences.

    A seeded RANSAC over ``sample_size``-row subsets finds the largest set of
    rows whose point-to-plane residual is below ``inlier_mm``; the inliers
    are refit with :func:`solve` and refined by Tukey-biweight IRLS. Returns
    ``(dv, weights)`` where ``weights`` are the effective row weights.
    """
    n = len(system)
    if n < MIN_CONSTRAINTS:
        raise InsufficientConstraintsError(f"{n} rows, need {MIN_CONSTRAINTS}")
    rng = np.random.Generator(np.random.PCG64(seed))
    A, b, w = system.A, system.b, system.weights
    best = None
    if n > sample_size:
        sw = np.sqrt(w)
        for _ in range(n_hypotheses):
            rows = rng.choice(n, size=sample_size, replace=False)
            try:
                dv, *_ = np.linalg.lstsq(A[rows] * sw[rows, None], b[rows] * sw[rows], rcond=None)
            except np.linalg.LinAlgError:
                continue
            inl = np.abs(A @ dv - b) < inlier_mm
            score = w[inl].sum()
            if best is None or score > best[0]:
                best = (score, inl)
    mask = best[1] if best is not None and best[1].sum() >= MIN_CONSTRAINTS else np.ones(n, bool)
    weights = np.where(mask, w, 0.0)
    dv = solve(PPCSystem(A, b, weights))
    for _ in range(irls_steps):
        r = A @ dv - b
        scale = max(1.4826 * np.median(np.abs(r[weights > 0])), 0.25 * inlier_mm)
        c = 4.685 * scale
        tukey = np.where(np.abs(r) < c, (1.0 - (r / c) ** 2) ** 2, 0.0)
        new_weights = w * tukey
        if np.count_nonzero(new_weights) < MIN_CONSTRAINTS:
            break
        weights = new_weights
        dv = solve(PPCSystem(A, b, weights))
    return dv, weights


def condition_number(system: PPCSystem) -> float:
    s = np.linalg.svd(system.A * np.sqrt(system.weights)[:, None], compute_uv=False)
    return float((s[0] / s[-1]) ** 2) if s[-1] > 0 else float("inf")


# ---------------------------------------------------------------------------
# iterative registration


@dataclass(frozen=True)
class RegistrationParams:
    max_iterations: int = 10
    style: RenderStyle = BONE
    correspondence: CorrespondenceParams = CorrespondenceParams()
    stop_tol: float = 0.1  # px, mean |dp|
    angle_tol: float = 20.0  # degrees
    max_points: int = 1024
    seed: int = 0
    robust: bool = True  # RANSAC + IRLS on top of the score weights

    def __post_init__(self):
        if self.max_iterations < 1:
            raise InvalidArgumentError("max_iterations must be >= 1")
        if self.stop_tol < 0:
            raise InvalidArgumentError("stop_tol must be >= 0")

    def to_dict(self) -> dict:
        c = self.correspondence
        return {
            "max_iterations": self.max_iterations,
            "style": self.style.to_dict(),
            "correspondence": {"patch": c.patch, "search_range": c.search_range,
                               "step": c.step, "min_score": c.min_score, "tie_tol": c.tie_tol},
            "stop_tol": self.stop_tol,
            "angle_tol": self.angle_tol,
            "max_points": self.max_points,
            "seed": self.seed,
            "robust": self.robust,
        }


@dataclass
class IterationRecord:
    dv: np.ndarray
    n_correspondences: int
    mean_dp: float
    residual: float

    def to_dict(self) -> dict:
        return {"dv": [float(v) for v in self.dv], "n_correspondences": self.n_correspondences,
                "mean_dp_px": self.mean_dp, "residual": self.residual}


@dataclass
class RegistrationResult:
    transform: RigidTransform
    iterations: list = field(default_factory=list)
    converged: bool = False
    wall_ms: float = 0.0
    initial: RigidTransform | None = None

    def to_dict(self) -> dict:
        return {
            "transform": self.transform.to_list(),
            "initial": None if self.initial is None else self.initial.to_list(),
            "converged": self.converged,
            "n_iterations": len(self.iterations),
            "wall_ms": self.wall_ms,
            "iterations": [it.to_dict() for it in self.iterations],
        }

    def to_json(self, path, extra: dict | None = None) -> None:
        doc = self.to_dict()
        if extra:
            doc.update(extra)
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> RegistrationResult:
        its = [IterationRecord(np.asarray(i["dv"]), i["n_correspondences"], i["mean_dp_px"], i["residual"])
               for i in d.get("iterations", [])]
        init = d.get("initial")
        return cls(RigidTransform.from_matrix(d["transform"]), its, bool(d["converged"]),
                   float(d.get("wall_ms", 0.0)), None if init is None else RigidTransform.from_matrix(init))


Matcher = Callable[[RigidTransform, ContourPointSet], Correspondences]


def iterate(
    T_init: RigidTransform,
    contours: ContourPointSet,
    geom: ProjectionGeometry,
    match: Matcher,
    params: RegistrationParams = RegistrationParams(),
) -> RegistrationResult:
    """Generic PPC loop: select contours, match, assemble, solve, update.

    ``match(T, selected)`` returns correspondences for the selected points at
    the current pose. Stops early once the mean 2D misalignment falls below
    ``params.stop_tol`` pixels.
    """
    start = time.perf_counter()
    T = T_init
    history = []
    converged = False
    for i in range(1, params.max_iterations + 1):
        try:
            sel = select_apparent_contour(contours, geom, T, params.angle_tol, params.max_points,
                                          params.seed + i)
            corr = match(T, sel)
            system = assemble(corr, sel, T)
            if params.robust:
                dv, _ = solve_robust(system, seed=params.seed + 7919 * i)
            else:
                dv = solve(system)
        except PPCRegError as exc:
            raise RegistrationError(i, exc) from exc
        mean_dp = corr.mean_displacement()
        history.append(IterationRecord(dv, len(corr), mean_dp, system.residual(dv)))
        T = compose(exp_motion(dv), T)
        if mean_dp < params.stop_tol:
            converged = True
            break
    return RegistrationResult(T, history, converged, 1e3 * (time.perf_counter() - start), T_init)


def register(
    vol: Volume,
    contours: ContourPointSet,
    fixed: Image2D,
    T_init: RigidTransform,
    geom: ProjectionGeometry,
    params: RegistrationParams = RegistrationParams(),
) -> RegistrationResult:
    """Register ``vol`` to the fixed projection starting from ``T_init``.

    Each iteration renders the moving DRR at the current pose and matches the
    apparent contour into ``fixed`` by ZNCC line search.
    """
    if fixed.data.shape != (geom.height, geom.width):
        raise InvalidArgumentError("fixed image size does not match the detector")

    def match(T, sel):
        moving = render(vol, geom, T, params.style)
        return find_correspondences(moving, fixed, sel, geom, T, params.correspondence)

    return iterate(T_init, contours, geom, match, params)


def register_exact(
    contours: ContourPointSet,
    T_init: RigidTransform,
    T_true: RigidTransform,
    geom: ProjectionGeometry,
    params: RegistrationParams = RegistrationParams(),
) -> RegistrationResult:
    """PPC loop driven by noise-free correspondences towards ``T_true``."""
    return iterate(T_init, contours, geom,
                   lambda T, sel: exact_correspondences(sel, geom, T, T_true), params)


def overlay(fixed: Image2D, before_px, after_px) -> np.ndarray:
    """8-bit overlay: windowed fixed image, start points black, final points white."""
    img = to_uint8(fixed.data).copy()
    h, w = img.shape
    for pts, value in ((before_px, 0), (after_px, 255)):
        q = np.rint(np.asarray(pts, dtype=float)).astype(int).reshape(-1, 2)
        ok = (q[:, 0] >= 0) & (q[:, 0] < w) & (q[:, 1] >= 0) & (q[:, 1] < h)
        img[q[ok, 1], q[ok, 0]] = value
    return img


def write_overlay(path, fixed: Image2D, contours: ContourPointSet, geom: ProjectionGeometry,
                  T_before: RigidTransform, T_after: RigidTransform) -> None:
    write_pgm(path, overlay(fixed, project(T_before.apply(contours.points), geom),
                            project(T_after.apply(contours.points), geom)))
