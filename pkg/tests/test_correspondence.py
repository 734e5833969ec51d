import numpy as np
import pytest

from ppcreg.contour import ContourPointSet, canny3d, select_apparent_contour
from ppcreg.correspondence import (
    CorrespondenceParams,
    compute_plane_normal,
    exact_correspondences,
    find_correspondences,
    plane_normals,
    projected_gradient_directions,
)
from ppcreg.drr import BONE, Image2D, render
from ppcreg.errors import InvalidArgumentError, NoCorrespondenceError
from ppcreg.geometry import RigidTransform, backproject_ray, carm_geometry, exp_motion, project
from ppcreg.volume import PhantomSpec, Primitive, make_phantom


@pytest.fixture(scope="module")
def box_setup():
    vol = make_phantom(PhantomSpec((Primitive("box", (0, 0, 0), (30, 20, 40), 0.03),), (64, 64, 64)))
    g = carm_geometry(size=(192, 192), pixel_spacing=(1.2, 1.2))
    img = render(vol, g, RigidTransform.identity(), BONE)
    return vol, g, img, canny3d(vol)


def test_identical_images_zero_shift(box_setup):
    vol, g, img, cs = box_setup
    sel = select_apparent_contour(cs, g, RigidTransform.identity(), 20.0)
    corr = find_correspondences(img, img, sel, g, RigidTransform.identity())
    assert len(corr) > 10
    assert np.all(corr.dp == 0.0)
    np.testing.assert_allclose(corr.score, 1.0, atol=1e-9)
    np.testing.assert_allclose(corr.weight, 1.0, atol=1e-9)


def shifted(img, du):
    data = np.zeros_like(img.data)
    data[:, du:] = img.data[:, :-du]
    return Image2D(data, img.pixel_spacing, img.style)


def test_translated_image_recovers_shift(box_setup):
    vol, g, img, cs = box_setup
    xs = cs.subset(np.abs(cs.gradients[:, 0]) > 0.99 * np.linalg.norm(cs.gradients, axis=1))
    sel = select_apparent_contour(xs, g, RigidTransform.identity(), 20.0)
    corr = find_correspondences(img, shifted(img, 5), sel, g, RigidTransform.identity())
    assert len(corr) > 10
    assert np.all(np.abs(corr.dp[:, 0] - 5.0) <= 0.5)
    assert np.all(np.abs(corr.dp[:, 1]) <= 0.5)


def test_swap_negates_displacement(box_setup):
    vol, g, img, cs = box_setup
    T = RigidTransform.from_translation([2.0, 0.0, 1.5])
    moved = render(vol, g, T, BONE)
    sel = select_apparent_contour(cs, g, RigidTransform.identity(), 20.0)
    fwd = find_correspondences(img, moved, sel, g, RigidTransform.identity())
    # the reverse search starts from the moved projections of the same points
    bwd = find_correspondences(moved, img, sel, g, T)
    common, i, j = np.intersect1d(fwd.index, bwd.index, return_indices=True)
    assert len(common) > 10
    good = (fwd.score[i] > 0.9) & (bwd.score[j] > 0.9)
    assert np.median(np.linalg.norm(fwd.dp[i][good] + bwd.dp[j][good], axis=1)) <= 1.0


def test_constant_fixed_image_skips_all(box_setup):
    vol, g, img, cs = box_setup
    sel = select_apparent_contour(cs, g, RigidTransform.identity(), 20.0)
    flat = Image2D(np.full(img.data.shape, 0.5), img.pixel_spacing)
    with pytest.raises(NoCorrespondenceError):
        find_correspondences(img, flat, sel, g, RigidTransform.identity())


def test_scores_bounded(vertebra, vertebra_contours, geom):
    T0 = RigidTransform.identity()
    fixed = render(vertebra, geom, T0, BONE)
    T = exp_motion([0.02, -0.03, 0.01, 3, -2, 4])
    moving = render(vertebra, geom, T, BONE)
    sel = select_apparent_contour(vertebra_contours, geom, T, 20.0, 400)
    corr = find_correspondences(moving, fixed, sel, geom, T, CorrespondenceParams(min_score=-1.0))
    assert np.all(corr.score >= -1.0) and np.all(corr.score <= 1.0)
    assert np.all((corr.weight >= 0) & (corr.weight <= 1))
    np.testing.assert_allclose(np.linalg.norm(corr.normal, axis=1), 1.0, atol=1e-9)
    assert np.array_equal(corr.dp, corr.p_prime - corr.p)
    c0 = corr[0]
    assert np.array_equal(c0.dp, c0.p_prime - c0.p) and c0.index == corr.index[0]


def test_patch_outside_image_is_skipped():
    g = carm_geometry(size=(64, 64), pixel_spacing=(1.0, 1.0))
    rng = np.random.Generator(np.random.PCG64(0))
    img = Image2D(rng.random((64, 64)))
    # one point near the corner (patch leaves the image), six well inside
    pix = np.array([[1.0, 1.0]] + [[20.0 + 4 * k, 30.0] for k in range(6)])
    _, d = backproject_ray(pix, g)
    pts = g.source + 700.0 * d
    cs = ContourPointSet(pts, np.tile([1.0, 0.0, 0.0], (7, 1)))
    corr = find_correspondences(img, img, cs, g, RigidTransform.identity(),
                                CorrespondenceParams(search_range=3.0))
    assert 0 not in corr.index and len(corr) == 6


def test_tie_break_prefers_smallest_shift():
    g = carm_geometry(size=(96, 96), pixel_spacing=(1.0, 1.0))
    # a periodic stripe pattern along u gives equal NCC every 8 px
    u = np.arange(96)
    pattern = np.tile(np.sin(2 * np.pi * u / 8.0), (96, 1))
    img = Image2D(pattern)
    _, d = backproject_ray(np.array([[48.0, 48.0]]), g)
    cs = ContourPointSet(g.source + 700.0 * d, np.array([[1.0, 0.0, 0.0]]))
    corr = find_correspondences(img, img, cs, g, RigidTransform.identity(),
                                CorrespondenceParams(search_range=20.0, tie_tol=0.0))
    assert np.all(np.abs(corr.dp) < 1e-9)


def test_plane_normal_contains_ray_and_tangent(geom):
    rng = np.random.Generator(np.random.PCG64(5))
    T = exp_motion([0.1, -0.2, 0.05, 3, 1, -2])
    for _ in range(50):
        w = rng.uniform(-40, 40, 3)
        gvec = rng.standard_normal(3)
        dp = rng.uniform(-5, 5, 2)
        n = compute_plane_normal(w, gvec, dp, geom, T)
        x = T.apply(w)
        dirs, ok = projected_gradient_directions(x[None], T.apply_vector(gvec)[None], geom)
        p_prime = project(x, geom) + dp
        _, ray = backproject_ray(p_prime, geom)
        su, sv = geom.pixel_spacing
        grad_det = dirs[0, 0] * su * geom.row_axis + dirs[0, 1] * sv * geom.col_axis
        tangent = np.cross(geom.normal, grad_det)
        assert abs(np.linalg.norm(n) - 1) < 1e-12
        assert abs(n @ ray) < 1e-9
        assert abs(n @ tangent) / np.linalg.norm(tangent) < 1e-9
        if np.allclose(dp, 0):
            continue
        n0 = compute_plane_normal(w, gvec, [0.0, 0.0], geom, T)
        assert abs(n0 @ x - n0 @ geom.source) < 1e-6 * np.linalg.norm(w)


def test_normal_oriented_along_gradient(geom):
    rng = np.random.Generator(np.random.PCG64(9))
    pts = rng.uniform(-40, 40, (30, 3))
    grads = rng.standard_normal((30, 3))
    dirs, ok = projected_gradient_directions(pts, grads, geom)
    n = plane_normals(project(pts, geom), dirs, grads, geom)
    assert np.all(np.einsum("ij,ij->i", n, grads) >= 0)


def test_exact_correspondences_match_projection(vertebra_contours, geom):
    T_cur = exp_motion([0.01, 0.02, -0.01, 1, 2, 3])
    T_true = RigidTransform.identity()
    sel = select_apparent_contour(vertebra_contours, geom, T_cur, 20.0, 200)
    corr = exact_correspondences(sel, geom, T_cur, T_true)
    np.testing.assert_allclose(corr.p_prime, project(T_true.apply(sel.points[corr.index]), geom), atol=1e-9)


def test_params_validation():
    with pytest.raises(InvalidArgumentError):
        CorrespondenceParams(patch=10)
    with pytest.raises(InvalidArgumentError):
        CorrespondenceParams(step=0)
    with pytest.raises(InvalidArgumentError):
        CorrespondenceParams(min_score=2)
    p = CorrespondenceParams()
    assert (p.patch, p.search_range, p.step, p.min_score) == (11, 30.0, 0.5, 0.3)
    assert len(p.offsets()) == 121


def test_images_must_match(box_setup):
    vol, g, img, cs = box_setup
    with pytest.raises(InvalidArgumentError):
        find_correspondences(img, Image2D(np.zeros((10, 10))), cs, g, RigidTransform.identity())


def test_csv_export(tmp_path, box_setup):
    vol, g, img, cs = box_setup
    sel = select_apparent_contour(cs, g, RigidTransform.identity(), 20.0)
    corr = find_correspondences(img, img, sel, g, RigidTransform.identity())
    corr.to_csv(tmp_path / "c.csv")
    rows = (tmp_path / "c.csv").read_text().splitlines()
    assert rows[0] == "index,p_u,p_v,pp_u,pp_v,score" and len(rows) == len(corr) + 1
