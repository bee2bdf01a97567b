import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aaaseg import evalkit as ek
from aaaseg import postrecon as pr
from aaaseg.errors import DegeneracyError, ShapeError, ValidationError
from aaaseg.volio import Volume

from oracles import dsc_naive, point_triangle_dense


# -- DSC -------------------------------------------------------------------------

def test_dsc_slice_cases():
    a = np.zeros((4, 4), bool)
    a[0, :4] = True
    b = np.zeros((4, 4), bool)
    b[0, :2] = True
    assert ek.dsc_slice(a, a) == 1.0
    assert ek.dsc_slice(a, ~a) == 0.0
    assert ek.dsc_slice(a, b) == pytest.approx(2 * 2 / 6)
    assert ek.dsc_slice(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    with pytest.raises(ShapeError):
        ek.dsc_slice(a, np.zeros((4, 5)))


@pytest.mark.parametrize("seed", range(50))
def test_dsc_matches_counting_oracle(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 12, size=2))
    a = rng.random(shape) < rng.random()
    b = rng.random(shape) < rng.random()
    assert ek.dsc_slice(a, b) == pytest.approx(dsc_naive(a, b), rel=1e-12)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=50, deadline=None)
def test_dsc_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 6, 6)) < 0.4
    d = ek.dsc_slice(a, b)
    assert 0.0 <= d <= 1.0 and d == ek.dsc_slice(b, a)


def test_dsc_volume_identical_and_complement():
    g = np.zeros((3, 4, 4), np.uint8)
    g[:, :2] = 1
    r = ek.dsc_volume(g, g)
    assert (r.mean, r.std) == (1.0, 0.0)
    assert ek.dsc_volume(1 - g, g).mean == 0.0


def test_dsc_volume_hand_case():
    g = np.zeros((4, 2, 2), np.uint8)
    p = np.zeros_like(g)
    g[0, 0, 0] = p[0, 0, 0] = 1  # 1.0
    g[1, 0, :] = 1
    p[1, 0, 0] = 1
    p[1, 1, 1] = 1  # 2*1/(2+2) = 0.5
    g[2, 0, 0] = 1
    p[2, 1, 1] = 1  # 0.0
    r = ek.dsc_volume(Volume(p), Volume(g))  # slice 3 empty in both -> excluded
    assert r.per_slice == [1.0, 0.5, 0.0] and r.slice_index == [0, 1, 2]
    assert r.mean == pytest.approx(0.5)
    assert r.std == pytest.approx(math.sqrt(1 / 6))
    assert r.n_excluded == 1


# -- rigid transforms ------------------------------------------------------------

def test_rotation_about_and_transform_algebra():
    r = ek.rotation_about([0, 0, 1], math.pi / 2)
    np.testing.assert_allclose(r @ [1, 0, 0], [0, 1, 0], atol=1e-15)
    t = ek.RigidTransform(ek.rotation_about([1, 2, 3], 0.3), [1, -2, 0.5])
    pts = np.random.default_rng(0).normal(size=(5, 3))
    np.testing.assert_allclose(t.inverse().apply(t.apply(pts)), pts, atol=1e-12)
    np.testing.assert_allclose(t.compose(t).apply(pts), t.apply(t.apply(pts)), atol=1e-12)
    assert t.is_proper() and t.angle() == pytest.approx(0.3)


def test_fit_rigid_exact():
    rng = np.random.default_rng(1)
    src = rng.normal(size=(20, 3))
    t = ek.RigidTransform(ek.rotation_about(rng.normal(size=3), 1.1), rng.normal(size=3))
    fit = ek.fit_rigid(src, t.apply(src))
    np.testing.assert_allclose(fit.rotation, t.rotation, atol=1e-12)
    np.testing.assert_allclose(fit.translation, t.translation, atol=1e-12)


def test_fit_rigid_never_reflects():
    src = np.random.default_rng(2).normal(size=(30, 3))
    assert ek.fit_rigid(src, src * [1, 1, -1]).is_proper()


# -- point to triangle -----------------------------------------------------------

TRI = np.array([[0.0, 0.0, 0.0], [4.0, 0.0, 0.0], [0.0, 3.0, 0.0]])


def one(p, tri=TRI):
    return ek.closest_point_on_triangle(np.atleast_2d(p), *(np.atleast_2d(v) for v in tri))[0]


def test_closest_point_interior_and_above():
    np.testing.assert_allclose(one([1.0, 1.0, 0.0]), [1.0, 1.0, 0.0])
    centroid = TRI.mean(axis=0)
    q = one(centroid + [0, 0, 2.5])
    assert np.linalg.norm(centroid + [0, 0, 2.5] - q) == pytest.approx(2.5)


@pytest.mark.parametrize("p", [[-1, -1, 0], [6, -1, 1], [-1, 5, 0], [2, -3, 0.5], [-2, 1, 0], [3, 3, -1], [5, 0.5, 0]])
def test_closest_point_outside_regions_against_dense_sampling(p):
    p = np.array(p, dtype=float)
    d = np.linalg.norm(p - one(p))
    assert d == pytest.approx(point_triangle_dense(p, *TRI, n=800), abs=1e-2)
    assert d <= point_triangle_dense(p, *TRI, n=800) + 1e-12


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=60, deadline=None)
def test_closest_point_is_optimal(seed):
    rng = np.random.default_rng(seed)
    tri = rng.normal(size=(3, 3))
    p = rng.normal(scale=2, size=3)
    q = one(p, tri)
    d = np.linalg.norm(p - q)
    # q lies on the triangle: barycentric coordinates in [0, 1]
    m = np.column_stack([tri[1] - tri[0], tri[2] - tri[0]])
    uv = np.linalg.lstsq(m, q - tri[0], rcond=None)[0]
    assert uv.min() >= -1e-9 and uv.sum() <= 1 + 1e-9
    # and no sampled point beats it
    u, v = rng.random((2, 500))
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    samples = tri[0] + np.outer(u, tri[1] - tri[0]) + np.outer(v, tri[2] - tri[0])
    assert d <= np.linalg.norm(samples - p, axis=1).min() + 1e-9


def test_degenerate_triangle_is_handled():
    tri = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    q = one([1.5, 1.0, 0.0], tri)
    assert np.all(np.isfinite(q)) and np.linalg.norm(q - [1.5, 0, 0]) < 1e-9


# -- mesh queries, ICP, C2M ------------------------------------------------------

@pytest.fixture(scope="module")
def ellipsoid():
    n = 24
    z, y, x = np.mgrid[:n, :n, :n] - (n - 1) / 2
    m = ((x / 9) ** 2 + (y / 6) ** 2 + (z / 4) ** 2 <= 1).astype(np.uint8)
    return pr.marching_cubes(Volume(m, (0.645, 0.645, 1.0)))


def test_mesh_index_matches_brute_force(ellipsoid):
    rng = np.random.default_rng(0)
    c = ellipsoid.corners()
    pts = ellipsoid.vertices.mean(axis=0) + rng.normal(scale=5, size=(40, 3))
    d, _, _ = ek.MeshIndex(ellipsoid).closest(pts)
    for p, dist in zip(pts, d):
        q = ek.closest_point_on_triangle(np.tile(p, (len(c), 1)), c[:, 0], c[:, 1], c[:, 2])
        assert dist == pytest.approx(np.linalg.norm(q - p, axis=1).min(), abs=1e-12)


def test_c2m_on_surface_is_zero(ellipsoid):
    rep = ek.c2m_distances(ellipsoid.vertices, ellipsoid)
    assert rep.max_mm < 1e-12
    assert rep.to_dict()["n_points"] == len(ellipsoid.vertices)


def test_c2m_offset_and_pixels():
    mesh = pr.Mesh(TRI, [[0, 1, 2]])
    p = TRI.mean(axis=0) + [0, 0, 1.29]
    rep = ek.c2m_distances([p], mesh, bins=4)
    assert rep.mean_mm == pytest.approx(1.29)
    assert rep.distances_px[0] == pytest.approx(2.0)
    assert rep.hist_counts.sum() == 1 and len(rep.hist_edges) == 5
    shifted = ek.c2m_distances([p], mesh, transform=ek.RigidTransform(np.eye(3), [0, 0, -1.29]))
    assert shifted.mean_mm == pytest.approx(0.0, abs=1e-12)


def test_c2m_empty_mesh():
    with pytest.raises(ValidationError):
        ek.c2m_distances(np.zeros((3, 3)), pr.Mesh(np.zeros((0, 3)), np.zeros((0, 3), int)))


def test_icp_identity_on_surface(ellipsoid):
    t = ek.icp_align(ellipsoid.vertices, ellipsoid)
    np.testing.assert_allclose(t.rotation, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(t.translation, 0, atol=1e-9)


@pytest.mark.parametrize("truth", [
    ek.RigidTransform(np.eye(3), [5.0, -3.0, 2.0]),
    ek.RigidTransform(ek.rotation_about([0, 0, 1], math.radians(10)), [0.0, 0.0, 0.0]),
], ids=["translate", "rotate10"])
def test_icp_recovers_known_motion(ellipsoid, truth):
    pts = truth.apply(ellipsoid.vertices)
    est, hist = ek.icp_align(pts, ellipsoid, max_iter=600, tol=1e-12, return_history=True)
    residual = est.compose(truth)
    assert np.linalg.norm(residual.translation) <= 1e-3
    assert residual.angle() <= 1e-3
    assert hist[-1] <= min(hist)


def test_icp_rms_never_worse_than_start(ellipsoid):
    pts = ek.RigidTransform(ek.rotation_about([1, 1, 0], 0.2), [1, 2, 0]).apply(ellipsoid.vertices)
    est, hist = ek.icp_align(pts, ellipsoid, max_iter=10, return_history=True)
    d = ek.c2m_distances(pts, ellipsoid, transform=est).distances_mm
    assert np.sqrt(np.mean(d ** 2)) == pytest.approx(min(hist))
    assert min(hist) <= hist[0]


@pytest.mark.parametrize("pts", [np.zeros((5, 3)), np.outer(np.arange(6), [1.0, 2.0, 3.0]), np.zeros((2, 3))])
def test_icp_degenerate_cloud(ellipsoid, pts):
    with pytest.raises(DegeneracyError):
        ek.icp_align(pts, ellipsoid)


def test_dsc_monotone_in_true_positives():
    gt = np.zeros(20, bool)
    gt[:10] = True
    scores = []
    for tp in range(11):
        pred = np.zeros(20, bool)
        pred[:tp] = True
        pred[10:20 - tp] = True  # fixed size 10
        scores.append(ek.dsc_slice(pred, gt))
    assert all(b > a for a, b in zip(scores, scores[1:]))


def test_dsc_volume_matches_counting_oracle():
    rng = np.random.default_rng(77)
    for _ in range(100):
        shape = tuple(rng.integers(1, 6, size=3))
        a, b = rng.random((2,) + shape) < rng.random()
        rep = ek.dsc_volume(a, b)
        ref = [dsc_naive(a[k], b[k]) for k in range(shape[0]) if a[k].any() or b[k].any()]
        assert len(rep.per_slice) == len(ref)
        for got, want in zip(rep.per_slice, ref):
            assert abs(got - want) <= 1e-12


def test_icp_rms_non_increasing(ellipsoid):
    pts = ek.RigidTransform(ek.rotation_about([0.2, 1, 0.3], 0.15), [1.5, -1.0, 0.5]).apply(ellipsoid.vertices)
    _, hist = ek.icp_align(pts, ellipsoid, max_iter=60, tol=0, return_history=True)
    assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))


def test_icp_transforms_are_orthonormal(ellipsoid):
    pts = ek.RigidTransform(ek.rotation_about([1, 0, 0], 0.1), [0.3, 0.2, 0.1]).apply(ellipsoid.vertices)
    assert ek.icp_align(pts, ellipsoid, max_iter=20).is_proper(1e-9)


def test_c2m_invariant_under_shared_motion(ellipsoid):
    rng = np.random.default_rng(5)
    pts = ellipsoid.vertices.mean(axis=0) + rng.normal(scale=4, size=(60, 3))
    t = ek.RigidTransform(ek.rotation_about(rng.normal(size=3), 0.7), rng.normal(size=3) * 10)
    a = ek.c2m_distances(pts, ellipsoid).distances_mm
    b = ek.c2m_distances(t.apply(pts), ellipsoid.transformed(t.rotation, t.translation)).distances_mm
    np.testing.assert_allclose(a, b, atol=1e-9)
