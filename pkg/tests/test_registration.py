import math

import numpy as np
import pytest
from conftest import pose_error, random_pose
from hypothesis import given, settings
from hypothesis import strategies as st

from hallmap import synth
from hallmap.geometry import PoseSE3, Rotation, Sim3Transform
from hallmap.io import PointCloud
from hallmap.registration import (
    DegenerateInputError,
    IcpConfig,
    KdTree,
    NoOverlapError,
    alignment_residual,
    build_kdtree,
    estimate_normals,
    icp,
    nearest,
    overlap_ratio,
    umeyama_align,
    voxel_downsample,
)


@pytest.fixture(scope="module")
def hall_cloud():
    hall = synth.build_hall(0)
    pts = synth.surface_cloud(hall, spacing=0.25).points
    # a 20 m patch around the origin keeps the test quick and still holds walls, floor and boxes
    keep = np.all(np.abs(pts[:, :2]) < 10.0, axis=1) | (np.abs(pts[:, 0]) > 19.5)
    return pts[keep]


# ---------------------------------------------------------------- nearest neighbours


def test_nearest_two_points():
    tree = build_kdtree(PointCloud([[0, 0, 0], [1, 0, 0]]))
    i, d = nearest(tree, (0.4, 0, 0))
    assert i == 0 and d == pytest.approx(0.4)


def test_nearest_on_cloud_point_is_zero(rng):
    pts = rng.normal(size=(50, 3))
    i, d = nearest(build_kdtree(pts), pts[17])
    assert i == 17 and d == 0.0


def test_nearest_matches_linear_scan(rng):
    pts = rng.uniform(-1, 1, (1000, 3))
    q = rng.uniform(-1.2, 1.2, (100, 3))
    d, i = KdTree(pts).query(q)
    brute = np.linalg.norm(q[:, None, :] - pts[None, :, :], axis=2)
    np.testing.assert_array_equal(i, brute.argmin(axis=1))
    np.testing.assert_allclose(d, brute.min(axis=1), rtol=0, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 300), st.integers(0, 2**32 - 1))
def test_nearest_property_exact(n, seed):
    r = np.random.default_rng(seed)
    pts = r.normal(size=(n, 3))
    q = r.normal(size=(20, 3))
    d, _ = KdTree(pts).query(q)
    brute = np.linalg.norm(q[:, None, :] - pts[None, :, :], axis=2).min(axis=1)
    np.testing.assert_allclose(d, brute, rtol=0, atol=1e-12)


def test_empty_tree_rejected():
    with pytest.raises(ValueError):
        KdTree(np.zeros((0, 3)))


def test_voxel_downsample_one_point_per_cell(rng):
    pts = rng.uniform(0, 1, (5000, 3))
    out = voxel_downsample(pts, 0.25)[0]
    cells = np.floor(out / 0.25).astype(int)
    assert len(np.unique(cells, axis=0)) == len(out) == 64


# ---------------------------------------------------------------- umeyama


def test_umeyama_identity(rng):
    pts = rng.normal(size=(20, 3))
    s = umeyama_align(pts, pts)
    assert s.scale == pytest.approx(1.0, abs=1e-12)
    assert s.rotation.angle < 1e-9 and np.abs(s.translation).max() < 1e-12


def test_umeyama_recovers_down_scaling(rng):
    pts = rng.normal(size=(200, 3)) * 5
    s = umeyama_align(pts, 0.95 * pts)
    assert abs(s.scale - 0.95) < 1e-12


def test_umeyama_random_similarities(rng):
    for _ in range(50):
        src = rng.normal(size=(30, 3)) * 3
        truth = Sim3Transform(rng.uniform(0.5, 2.0), random_pose(rng).rotation, rng.uniform(-5, 5, 3))
        est = umeyama_align(src, truth.apply(src))
        assert abs(est.scale - truth.scale) < 1e-9
        assert np.abs(est.rotation.as_matrix() - truth.rotation.as_matrix()).max() < 1e-9
        assert np.abs(est.translation - truth.translation).max() < 1e-9


def test_umeyama_without_scale(rng):
    src = rng.normal(size=(30, 3))
    est = umeyama_align(src, 2.0 * src, with_scale=False)
    assert est.scale == 1.0


def test_umeyama_never_reflects(rng):
    src = rng.normal(size=(30, 3))
    est = umeyama_align(src, src * np.array([1, 1, -1]))
    assert np.linalg.det(est.rotation.as_matrix()) == pytest.approx(1.0)


def test_umeyama_degenerate():
    with pytest.raises(DegenerateInputError):
        umeyama_align([[0, 0, 0], [1, 1, 1]], [[0, 0, 0], [1, 1, 1]])
    line = np.outer(np.arange(10.0), [1, 2, 3])
    with pytest.raises(DegenerateInputError):
        umeyama_align(line, line)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_umeyama_is_global_minimum(seed):
    r = np.random.default_rng(seed)
    src = r.normal(size=(25, 3))
    truth = Sim3Transform(r.uniform(0.5, 2), random_pose(r).rotation, r.normal(size=3))
    dst = truth.apply(src) + r.normal(scale=0.05, size=src.shape)
    best = umeyama_align(src, dst)
    f0 = alignment_residual(src, dst, best)
    for _ in range(20):
        d = random_pose(r, max_angle=0.05, max_trans=0.05)
        cand = Sim3Transform(best.scale * r.uniform(0.97, 1.03), d.rotation * best.rotation,
                             best.translation + d.translation)
        assert alignment_residual(src, dst, cand) >= f0 - 1e-12


# ---------------------------------------------------------------- normals and overlap


def test_normals_plane(rng):
    pts = np.column_stack([rng.uniform(-1, 1, (300, 2)), np.zeros(300)])
    n = estimate_normals(pts, k=8, viewpoint=(0, 0, 5))
    np.testing.assert_allclose(n, np.tile([0, 0, 1.0], (300, 1)), atol=1e-6)


def test_normals_sphere_are_radial(rng):
    v = rng.normal(size=(100_000, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    n = estimate_normals(v, k=10, viewpoint=(0, 0, 0))
    cosang = np.abs(np.einsum("ij,ij->i", n, v))
    assert np.degrees(np.arccos(np.clip(cosang.min(), -1, 1))) < 2.0
    # oriented toward the viewpoint at the centre
    assert np.all(np.einsum("ij,ij->i", n, v) < 0)


def test_normals_k_too_large():
    with pytest.raises(ValueError):
        estimate_normals(np.zeros((5, 3)) + np.arange(5)[:, None], k=8)


def test_normals_collinear_flagged_zero():
    line = np.outer(np.linspace(0, 1, 30), [1, 0, 0])
    assert np.all(estimate_normals(line, k=5) == 0)


def test_overlap_ratio(rng):
    a = rng.uniform(0, 1, (101, 3))
    assert overlap_ratio(a, a, 0.01) == 1.0
    assert overlap_ratio(a, a + 100, 0.5) == 0.0
    b = a.copy()
    b[:50] += 100
    assert abs(overlap_ratio(b, a, 0.01) - 0.5) <= 1 / len(a)


# ---------------------------------------------------------------- ICP


def test_icp_self_alignment(hall_cloud):
    r = icp(hall_cloud, hall_cloud, PoseSE3.identity(), IcpConfig())
    assert r.transform == PoseSE3.identity()
    assert r.rmse == 0.0 and r.converged and r.iterations <= 2


def test_icp_recovers_hall_offset(hall_cloud):
    # point-to-point slides slowly along the regular surface grid, so the hall case uses planes
    moved = PoseSE3(Rotation.rot_z(math.radians(5)), (0.3, 0.0, 0.0))
    src = moved.apply(hall_cloud)
    r = icp(src, hall_cloud, PoseSE3.identity(), IcpConfig(variant="point2plane"))
    dt, da = pose_error(r.transform, moved.inverse())
    assert dt < 0.005 and math.degrees(da) < 0.1


def test_icp_point_to_point_small_offset(rng):
    pts = rng.uniform(-3, 3, (3000, 3))
    moved = PoseSE3(Rotation.rot_z(math.radians(5)), (0.3, 0.0, 0.0))
    r = icp(moved.apply(pts), pts, None, IcpConfig(max_iterations=100))
    dt, da = pose_error(r.transform, moved.inverse())
    assert dt < 0.005 and math.degrees(da) < 0.1


def test_icp_point_to_plane_tilted(hall_cloud):
    moved = PoseSE3(Rotation.from_rotvec([0.05, -0.03, 0.08]), (0.2, -0.1, 0.05))
    r = icp(moved.apply(hall_cloud), hall_cloud, None, IcpConfig(max_iterations=60, variant="point2plane"))
    dt, da = pose_error(r.transform, moved.inverse())
    assert dt < 0.005 and math.degrees(da) < 0.1


def test_icp_disjoint_clouds(rng):
    a = rng.normal(size=(100, 3))
    with pytest.raises(NoOverlapError):
        icp(a, a + 100.0, PoseSE3.identity(), IcpConfig())


def test_icp_rmse_non_increasing(hall_cloud, rng):
    moved = PoseSE3(Rotation.rot_z(0.05), (0.2, 0.1, 0.0))
    noisy = moved.apply(hall_cloud) + rng.normal(scale=0.01, size=hall_cloud.shape)
    # fixed gate: the accepted set can only grow or keep its residuals shrinking
    r = icp(noisy, hall_cloud, None, IcpConfig(max_iterations=40, max_corr_dist=1.0, corr_dist_decay=1.0))
    h = np.array(r.rmse_history)
    assert np.all(np.diff(h) <= 1e-9)


def test_icp_equivariance(hall_cloud, rng):
    sub = hall_cloud[::3]
    moved = PoseSE3(Rotation.rot_z(0.04), (0.15, -0.1, 0.02))
    src = moved.apply(sub)
    cfg = IcpConfig(max_iterations=30)
    T = icp(src, sub, None, cfg).transform
    G = random_pose(rng, max_angle=1.0, max_trans=3.0)
    T2 = icp(G.apply(src), G.apply(sub), None, cfg).transform
    expect = G @ T @ G.inverse()
    assert np.abs(T2.as_matrix() - expect.as_matrix()).max() < 1e-6


def test_icp_config_validation():
    with pytest.raises(ValueError):
        IcpConfig(convergence_eps=0)
    with pytest.raises(ValueError):
        IcpConfig(corr_dist_decay=1.5)
    with pytest.raises(ValueError):
        IcpConfig(variant="gicp")
