"""3D contour points and their view-dependent apparent-contour subsets."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InsufficientContourError, InvalidArgumentError
from .geometry import ProjectionGeometry, RigidTransform
from .volume import Volume

GAUSS_TRUNCATE = 4.0
MIN_POINTS = 6

# one representative of each +/- pair of the 26 neighbour offsets
NMS_DIRECTIONS = np.array(
    [d for d in itertools.product((-1, 0, 1), repeat=3) if d > (0, 0, 0)], dtype=int
)


@dataclass(frozen=True, eq=False)
class ContourPointSet:
    """Surface points ``points`` (mm, volume frame) with attenuation gradients."""

    points: np.ndarray
    gradients: np.ndarray
    volume_id: str = ""

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float).reshape(-1, 3)
        g = np.asarray(self.gradients, dtype=float).reshape(-1, 3)
        if p.shape != g.shape:
            raise InvalidArgumentError("points and gradients must have the same length")
        if np.any(np.linalg.norm(g, axis=1) == 0):
            raise InvalidArgumentError("stored gradients must be nonzero")
        p.setflags(write=False)
        g.setflags(write=False)
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "gradients", g)

    def __len__(self):
        return len(self.points)

    def subset(self, index) -> ContourPointSet:
        return ContourPointSet(self.points[index], self.gradients[index], self.volume_id)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["x", "y", "z", "gx", "gy", "gz"])
            for row in np.hstack([self.points, self.gradients]):
                wr.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path, volume_id: str = "") -> ContourPointSet:
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if rows.size == 0:
            rows = np.zeros((0, 6))
        return cls(rows[:, :3], rows[:, 3:], volume_id)


def canny3d(vol: Volume, sigma: float = 1.0, low: float = 0.0025, high: float = 0.005) -> ContourPointSet:
    """3D Canny edge points with their gradients.

    ``sigma`` is the Gaussian scale in mm; ``low``/``high`` are hysteresis
    thresholds on the gradient magnitude (mm^-1 per mm). Defaults separate the
    bone edges of the bundled phantoms from their faint soft tissue.
    """
    if not sigma > 0:
        raise InvalidArgumentError("sigma must be > 0")
    if not 0 <= low <= high:
        raise InvalidArgumentError("thresholds must satisfy 0 <= low <= high")
    sig_vox = sigma / vol.spacing
    radius = np.floor(GAUSS_TRUNCATE * sig_vox + 0.5).astype(int)
    if np.any(2 * radius + 1 > np.asarray(vol.dims)):
        raise InvalidArgumentError(
            f"sigma {sigma} mm gives a smoothing kernel larger than the volume {vol.dims}"
        )
    smooth = ndimage.gaussian_filter(vol.data.astype(float), sig_vox, mode="nearest",
                                     truncate=GAUSS_TRUNCATE)
    grad = np.stack(np.gradient(smooth, *vol.spacing), axis=-1)
    mag = np.linalg.norm(grad, axis=-1)

    keep = _non_max_suppression(grad, mag, vol.spacing)
    strong = keep & (mag >= high) & (mag > 0)
    weak = keep & (mag >= low) & (mag > 0)
    labels, n = ndimage.label(weak, structure=np.ones((3, 3, 3), dtype=bool))
    if n == 0 or not strong.any():
        return ContourPointSet(np.zeros((0, 3)), np.zeros((0, 3)), vol.name)
    good = np.zeros(n + 1, dtype=bool)
    good[np.unique(labels[strong])] = True
    good[0] = False
    edges = good[labels]
    idx = np.argwhere(edges)
    return ContourPointSet(vol.voxel_centers(idx), grad[edges], vol.name)


def _non_max_suppression(grad, mag, spacing):
    """Keep voxels whose magnitude peaks along the quantized gradient direction."""
    offsets = NMS_DIRECTIONS * spacing
    unit = offsets / np.linalg.norm(offsets, axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        ghat = grad / mag[..., None]
    choice = np.argmax(np.abs(ghat @ unit.T), axis=-1)
    padded = np.pad(mag, 1, mode="constant")
    nx, ny, nz = mag.shape
    keep = np.zeros(mag.shape, dtype=bool)
    for q, (di, dj, dk) in enumerate(NMS_DIRECTIONS):
        sel = choice == q
        if not sel.any():
            continue
        fwd = padded[1 + di:1 + di + nx, 1 + dj:1 + dj + ny, 1 + dk:1 + dk + nz]
        bwd = padded[1 - di:1 - di + nx, 1 - dj:1 - dj + ny, 1 - dk:1 - dk + nz]
        # asymmetric tie rule keeps plateaus one voxel thick
        keep |= sel & (mag > bwd) & (mag >= fwd)
    return keep


def contour_deviation(points_world, grads_world, source) -> np.ndarray:
    """Angle (degrees) between each gradient and the plane perpendicular to its ray."""
    ray = points_world - source
    cos = np.abs(np.einsum("ij,ij->i", ray, grads_world))
    cos /= np.linalg.norm(ray, axis=1) * np.linalg.norm(grads_world, axis=1)
    return np.degrees(np.arcsin(np.clip(cos, 0.0, 1.0)))


def select_apparent_contour(
    points: ContourPointSet,
    geom: ProjectionGeometry,
    T: RigidTransform,
    angle_tol: float = 20.0,
    max_points: int = 1024,
    seed: int = 0,
) -> ContourPointSet:
    """Points whose world gradient is within ``angle_tol`` of perpendicular to the view ray.

    Survivors beyond ``max_points`` are thinned by a seeded uniform draw
    (original order is preserved).
    """
    if not 0 < angle_tol <= 90:
        raise InvalidArgumentError("angle_tol must be in (0, 90] degrees")
    if max_points < MIN_POINTS:
        raise InvalidArgumentError(f"max_points must be >= {MIN_POINTS}")
    if angle_tol >= 90:
        idx = np.arange(len(points))
    else:
        dev = contour_deviation(T.apply(points.points), T.apply_vector(points.gradients), geom.source)
        idx = np.flatnonzero(dev <= angle_tol)
    if len(idx) > max_points:
        rng = np.random.Generator(np.random.PCG64(seed))
        idx = np.sort(rng.choice(idx, size=max_points, replace=False))
    if len(idx) < MIN_POINTS:
        raise InsufficientContourError(f"only {len(idx)} apparent-contour points (need {MIN_POINTS})")
    return points.subset(idx)
