import numpy as np
import pytest

from ppcreg.contour import (
    ContourPointSet,
    canny3d,
    contour_deviation,
    select_apparent_contour,
)
from ppcreg.errors import InsufficientContourError, InvalidArgumentError
from ppcreg.geometry import RigidTransform, carm_geometry
from ppcreg.volume import Volume, sphere_phantom

R = 15.0
SP = 0.75  # mm; finer than 1 mm so voxel staircasing stays well below 10 degrees


@pytest.fixture(scope="module")
def sphere():
    return sphere_phantom(R, 0.02, dims=(52, 52, 52), spacing=(SP,) * 3)


@pytest.fixture(scope="module")
def sphere_edges(sphere):
    return canny3d(sphere)


def angle_deg(a, b):
    c = np.einsum("ij,ij->i", a, b) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
    return np.degrees(np.arccos(np.clip(c, -1, 1)))


def test_uniform_volume_has_no_edges():
    assert len(canny3d(Volume(np.full((16, 16, 16), 0.02, np.float32)))) == 0


def test_sphere_points_on_shell(sphere_edges):
    r = np.linalg.norm(sphere_edges.points, axis=1)
    assert len(r) > 500
    assert np.all(np.abs(r - R) <= 2.0 * SP)


def test_sphere_gradients_along_normal(sphere_edges):
    # attenuation drops outward, so the gradient is the inward normal
    outward = sphere_edges.points / np.linalg.norm(sphere_edges.points, axis=1, keepdims=True)
    assert np.all(angle_deg(-sphere_edges.gradients, outward) <= 10.0)


def test_high_threshold_above_max_is_empty(sphere):
    assert len(canny3d(sphere, low=0.0, high=1.0)) == 0


def test_count_monotone_in_high_threshold(sphere):
    counts = [len(canny3d(sphere, low=0.0005, high=h)) for h in (0.001, 0.003, 0.006, 0.01, 1.0)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_canny_deterministic(sphere):
    a, b = canny3d(sphere), canny3d(sphere)
    assert np.array_equal(a.points, b.points) and np.array_equal(a.gradients, b.gradients)


def test_canny_argument_errors(sphere):
    with pytest.raises(InvalidArgumentError):
        canny3d(sphere, sigma=0)
    with pytest.raises(InvalidArgumentError):
        canny3d(sphere, low=0.01, high=0.001)
    with pytest.raises(InvalidArgumentError):
        canny3d(sphere, sigma=20.0)


def test_edges_are_thin(sphere_edges):
    # non-maximum suppression leaves about one voxel shell: count ~ sphere area
    area = 4 * np.pi * (R / SP) ** 2
    assert 0.5 * area < len(sphere_edges) < 2.0 * area


def test_vertebra_edges_inside_bounds(vertebra, vertebra_contours):
    lo, hi = vertebra.bounds()
    assert len(vertebra_contours) > 1000
    assert np.all(vertebra_contours.points >= lo) and np.all(vertebra_contours.points <= hi)
    assert np.all(np.linalg.norm(vertebra_contours.gradients, axis=1) > 0)


def test_selection_perpendicular_kept_parallel_rejected():
    g = carm_geometry()
    pts = np.array([[0.0, 0.0, float(k)] for k in range(6)] + [[0.0, 0.0, 0.0]])
    grads = np.array([[1, 0, 0]] * 6 + [[0, 1, 0]], dtype=float)  # the ray through the origin is +y
    sel = select_apparent_contour(ContourPointSet(pts, grads), g, RigidTransform.identity(), 20.0)
    assert len(sel) == 6 and np.all(sel.gradients[:, 1] == 0.0)
    dev = contour_deviation(pts, grads, g.source)
    assert dev[0] == pytest.approx(0.0, abs=1e-12) and dev[-1] == pytest.approx(90.0, abs=1e-9)


def test_sphere_silhouette_band(sphere_edges):
    g = carm_geometry()
    sel = select_apparent_contour(sphere_edges, g, RigidTransform.identity(), 20.0, max_points=100000)
    # exact silhouette: normals n with n.(c - s) = -R, a circle of polar angle theta0 about a
    c_s = -g.source
    a = c_s / np.linalg.norm(c_s)
    theta0 = np.arccos(-R / np.linalg.norm(c_s))
    n = sel.points / np.linalg.norm(sel.points, axis=1, keepdims=True)
    dist = np.degrees(np.abs(np.arccos(np.clip(n @ a, -1, 1)) - theta0))
    assert np.mean(dist <= 20.0) >= 0.9
    assert len(sel) < len(sphere_edges)


def test_selection_ninety_keeps_all(sphere_edges):
    sel = select_apparent_contour(sphere_edges, carm_geometry(), RigidTransform.identity(), 90.0,
                                  max_points=len(sphere_edges))
    assert np.array_equal(sel.points, sphere_edges.points)


def test_selection_subsample_seeded(sphere_edges):
    g, T = carm_geometry(), RigidTransform.identity()
    a = select_apparent_contour(sphere_edges, g, T, 20.0, max_points=50, seed=3)
    b = select_apparent_contour(sphere_edges, g, T, 20.0, max_points=50, seed=3)
    c = select_apparent_contour(sphere_edges, g, T, 20.0, max_points=50, seed=4)
    assert len(a) == 50 and np.array_equal(a.points, b.points)
    assert not np.array_equal(a.points, c.points)


def test_selection_errors(sphere_edges):
    g, T = carm_geometry(), RigidTransform.identity()
    with pytest.raises(InvalidArgumentError):
        select_apparent_contour(sphere_edges, g, T, 0.0)
    with pytest.raises(InvalidArgumentError):
        select_apparent_contour(sphere_edges, g, T, 20.0, max_points=5)
    with pytest.raises(InsufficientContourError):
        select_apparent_contour(sphere_edges.subset(slice(0, 5)), g, T, 90.0)


def test_csv_roundtrip(tmp_path, sphere_edges):
    sphere_edges.to_csv(tmp_path / "c.csv")
    back = ContourPointSet.from_csv(tmp_path / "c.csv")
    assert np.array_equal(back.points, sphere_edges.points)
    assert np.array_equal(back.gradients, sphere_edges.gradients)


def test_zero_gradient_rejected():
    with pytest.raises(InvalidArgumentError):
        ContourPointSet(np.zeros((1, 3)), np.zeros((1, 3)))
