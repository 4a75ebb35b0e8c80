import math

import numpy as np
import pytest
from conftest import pose_error, random_pose
from hypothesis import given, settings
from hypothesis import strategies as st

from hallmap import synth
from hallmap.geometry import PoseSE3, Rotation, Sim3Transform
from hallmap.io import CalibrationError, PointCloud, Trajectory
from hallmap.rigfusion import (
    AlignmentError,
    CameraKeyframe,
    Edge,
    PoseGraph,
    PoseGraphError,
    ScaleCorrectionError,
    align_streams,
    backproject,
    build_pose_graph,
    correct_global_scale,
    detect_loop_closures,
    fuse_depth_maps,
    graph_cost,
    keyframe_select,
    optimize_pose_graph,
    to_body_frame,
)

INTR = {"fx": 100.0, "fy": 100.0, "cx": 49.5, "cy": 29.5, "width": 100, "height": 60}


def _rig():
    return synth.SensorSpec().rig()


def _traj(n=20, dt=0.5, seed=0):
    r = np.random.default_rng(seed)
    poses = [PoseSE3.identity()]
    for _ in range(n - 1):
        poses.append(poses[-1] @ PoseSE3(Rotation.rot_z(r.uniform(-0.2, 0.2)), (r.uniform(0.2, 0.5), 0, 0)))
    return Trajectory(np.arange(n) * dt, poses)


# ---------------------------------------------------------------- keyframes and frames


def test_keyframe_select_static():
    assert keyframe_select(np.zeros(30)) == [0]


def test_keyframe_select_constant_flow():
    assert keyframe_select(np.full(21, 4.0), 16.0) == [0, 4, 8, 12, 16, 20]


def test_keyframe_select_simulated_spacing():
    hall = synth.furnished_room(12, 4, seed=0)
    traj = synth.sample_trajectory(hall, [(-3, -3), (3, -3), (3, 3)])
    spec = synth.SensorSpec(cam_width=160, cam_height=90)
    ts = np.arange(0, traj.duration, 0.05)
    flows = [0.0] + [synth.mean_flow(hall, traj, spec, "front", a, b) * 4 for a, b in zip(ts[:-1], ts[1:])]
    kf = keyframe_select(flows, 16.0)
    gaps = [sum(flows[a + 1 : b + 1]) for a, b in zip(kf[:-1], kf[1:])]
    assert len(kf) > 5
    assert 16.0 <= np.median(gaps) <= 32.0


def test_to_body_frame_front_unchanged():
    p = PoseSE3(Rotation.rot_z(0.4), (1, 2, 3))
    kf = CameraKeyframe("front", 0.0, p, None, INTR)
    assert to_body_frame(kf, _rig()) == p


def test_to_body_frame_rear_half_turn():
    # rear camera turned by pi about the optical y axis (down) relative to the front one
    rig = {"front": PoseSE3.identity(), "rear": PoseSE3(Rotation.rot_y(math.pi), (0, 0, -0.3))}
    body = to_body_frame(CameraKeyframe("rear", 0.0, PoseSE3.identity(), None, INTR), rig)
    expect = PoseSE3(Rotation.rot_y(-math.pi), Rotation.rot_y(-math.pi).apply([0, 0, 0.3]))
    np.testing.assert_allclose(body.as_matrix(), expect.as_matrix(), atol=1e-12)


def test_to_body_frame_round_trip(rng):
    rig = _rig()
    for cam in rig:
        p = random_pose(rng)
        body = to_body_frame(CameraKeyframe(cam, 0.0, p, None, INTR), rig)
        assert np.abs((body @ rig[cam]).as_matrix() - p.as_matrix()).max() < 1e-12


def test_to_body_frame_unknown_camera():
    with pytest.raises(CalibrationError):
        to_body_frame(CameraKeyframe("top", 0.0, PoseSE3.identity(), None, INTR), _rig())


def test_depth_shape_checked():
    with pytest.raises(ValueError):
        CameraKeyframe("front", 0.0, PoseSE3.identity(), np.ones((10, 10)), INTR)


# ---------------------------------------------------------------- stream alignment


def test_align_identical_streams():
    tr = _traj()
    a = align_streams({"front": tr, "left": tr})
    assert abs(a["left"].scale - 1) < 1e-12 and a["left"].rotation.angle < 1e-9
    assert a["front"].scale == 1.0


def test_align_rigid_offset():
    tr = _traj()
    G = Sim3Transform(1.0, Rotation.rot_z(0.7), (3, -2, 0.5))
    moved = Trajectory(tr.times, [G.inverse().apply_pose(p) for p in tr.poses])
    a = align_streams({"front": tr, "rear": moved}, with_scale=False)["rear"]
    np.testing.assert_allclose(a.as_matrix(), G.as_matrix(), atol=1e-9)


def test_align_scaled_stream():
    tr = _traj()
    scaled = Trajectory(tr.times, [PoseSE3(p.rotation, p.translation / 0.95) for p in tr.poses])
    a = align_streams({"front": tr, "left": scaled})["left"]
    assert abs(a.scale - 0.95) < 1e-9


def test_align_needs_overlap():
    tr = _traj()
    late = Trajectory(tr.times + 100, tr.poses)
    with pytest.raises(AlignmentError):
        align_streams({"front": tr, "left": late})
    with pytest.raises(AlignmentError):
        align_streams({"left": tr})


# ---------------------------------------------------------------- graph construction


def test_graph_single_stream():
    tr = _traj(10)
    g = build_pose_graph({"front": tr}, {"front": list(tr.times)})
    assert len(g) == 10 and len(g.edges) == 9
    assert all(e.kind == "odometry" for e in g.edges)


def test_graph_shared_nodes():
    tr = _traj(10)
    g = build_pose_graph({"front": tr, "rear": tr}, {"front": list(tr.times), "rear": list(tr.times)})
    assert len(g) == 10 and len(g.edges) == 18
    assert all(c == {"front", "rear"} for c in g.cameras)


def test_graph_merge_tolerance():
    tr = _traj(10, dt=0.5)
    near = build_pose_graph({"front": tr, "left": tr}, {"front": [0.0, 1.0], "left": [0.005, 1.005]})
    far = build_pose_graph({"front": tr, "left": tr}, {"front": [0.0, 1.0], "left": [0.015, 1.015]})
    assert len(near) == 2
    assert len(far) == 4
    # the unshared stream is tied to the rest by a rig edge
    assert [e.kind for e in far.edges].count("rig") == 1
    assert len(far.components()) == 1


def test_graph_empty():
    with pytest.raises(PoseGraphError):
        build_pose_graph({"front": _traj()}, {"front": []})


def test_edge_information_must_be_spd():
    with pytest.raises(ValueError):
        Edge("loop", 0, 1, PoseSE3.identity(), -np.eye(6))


# ---------------------------------------------------------------- optimization


def _chain(truth, noise=None, rng=None):
    """Graph over ``truth`` with odometry edges; ``noise`` perturbs each measured step by a yaw."""
    times = list(range(len(truth)))
    g = PoseGraph(times, [PoseSE3.identity()] * len(truth), [{"front"}] * len(truth))
    est = [truth[0]]
    for k in range(len(truth) - 1):
        Z = truth[k].inverse() @ truth[k + 1]
        if noise:
            Z = PoseSE3(Rotation.rot_z(noise), [0, 0, 0]) @ Z
        g.add_edge(Edge("odometry", k, k + 1, Z, np.eye(6)))
        est.append(est[-1] @ Z)
    g.poses = est
    return g


def _square_loop(n=40):
    poses = []
    for k in range(n):
        a = 2 * math.pi * k / n
        poses.append(PoseSE3(Rotation.rot_z(a + math.pi / 2), (5 * math.cos(a), 5 * math.sin(a), 0)))
    return poses


def test_zero_noise_chain_unchanged():
    truth = _square_loop()
    g = _chain(truth)
    rep = optimize_pose_graph(g)
    assert rep.costs[-1] < 1e-20
    for p, q in zip(g.poses, truth):
        assert pose_error(p, q)[0] < 1e-9


def test_loop_edge_removes_yaw_drift():
    truth = _square_loop()
    g = _chain(truth, noise=0.01)
    n = len(truth)
    g.add_edge(Edge("loop", 0, n - 1, truth[0].inverse() @ truth[-1], np.eye(6) * 100))
    before = pose_error(g.poses[-1], truth[-1])[0]
    rep = optimize_pose_graph(g)
    after = pose_error(g.poses[-1], truth[-1])[0]
    assert after <= 0.2 * before
    assert all(b <= a + 1e-12 for a, b in zip(rep.costs, rep.costs[1:]))


def test_duplicate_edges_same_optimum():
    truth = _square_loop(12)
    loop = Edge("loop", 0, 11, truth[0].inverse() @ truth[-1], np.eye(6))
    g1, g2 = _chain(truth, noise=0.02), _chain(truth, noise=0.02)
    g1.add_edge(loop)
    g2.add_edge(loop)
    g2.add_edge(Edge("loop", 0, 11, loop.Z, np.eye(6)))
    g3 = _chain(truth, noise=0.02)
    g3.add_edge(Edge("loop", 0, 11, loop.Z, 2 * np.eye(6)))
    for g in (g1, g2, g3):
        optimize_pose_graph(g, delta=1e9)
    for p, q in zip(g2.poses, g3.poses):
        assert pose_error(p, q)[0] < 1e-7
    # with only one loop edge the optimum differs: doubling is not a no-op on the weighting
    assert any(pose_error(p, q)[0] > 1e-6 for p, q in zip(g1.poses, g2.poses))


def test_optimum_invariant_under_rigid_pretransform(rng):
    truth = _square_loop(16)
    G = random_pose(rng)
    g1 = _chain(truth, noise=0.01)
    g2 = _chain([G @ p for p in truth], noise=0.01)
    for g, tr in ((g1, truth), (g2, [G @ p for p in truth])):
        g.add_edge(Edge("loop", 0, 15, tr[0].inverse() @ tr[-1], np.eye(6) * 10))
    optimize_pose_graph(g1)
    optimize_pose_graph(g2)
    for p, q in zip(g1.poses, g2.poses):
        assert np.abs((G @ p).as_matrix() - q.as_matrix()).max() < 1e-6


def test_disconnected_graph_reports_components():
    g = PoseGraph([0, 1, 2], [PoseSE3.identity()] * 3, [{"front"}] * 3)
    g.add_edge(Edge("odometry", 0, 1, PoseSE3.identity(), np.eye(6)))
    with pytest.raises(PoseGraphError, match="2 disconnected"):
        optimize_pose_graph(g)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_graph_cost_never_increases(seed):
    r = np.random.default_rng(seed)
    truth = _square_loop(10)
    g = _chain(truth)
    g.poses = [p @ random_pose(r, 0.05, 0.2) if k else p for k, p in enumerate(g.poses)]
    g.add_edge(Edge("loop", 0, 9, random_pose(r, 0.3, 1.0), np.eye(6)))
    c0 = graph_cost(g, g.poses, 0.1)
    rep = optimize_pose_graph(g)
    assert rep.costs[-1] <= c0
    assert all(b <= a for a, b in zip(rep.costs, rep.costs[1:]))


# ---------------------------------------------------------------- loop detection


def _room_keyframe(hall, spec, robot, cam, t):
    depth = synth.simulate_depth_camera(hall, lambda _: robot, spec, t, cameras=(cam,), seed=3, index=int(t))[cam]
    return depth


def test_cross_camera_loop_is_verified():
    hall = synth.furnished_room(12, 4, seed=0)
    spec = synth.SensorSpec(cam_width=160, cam_height=90, cam_disparity_noise=0.0625)
    rig = spec.rig()
    front_in_robot = spec.camera_in_robot("front")
    # node 0 faces a corner with its front camera; node 1 stands 0.3 m away turned around, rear camera on the same corner
    r0 = PoseSE3(Rotation.identity(), (3.0, -3.0, 0.5))
    r1 = PoseSE3(Rotation.rot_z(math.pi), (3.3, -2.9, 0.5))
    b0, b1 = r0 @ front_in_robot, r1 @ front_in_robot
    drift = PoseSE3(Rotation.rot_z(0.03), (0.15, -0.1, 0.0))
    g = PoseGraph([0.0, 60.0], [b0, b1 @ drift], [{"front"}, {"rear"}])
    intr = spec.intrinsics
    kfs = {
        ("front", 0): CameraKeyframe("front", 0.0, b0, _room_keyframe(hall, spec, r0, "front", 0), intr),
        ("rear", 1): CameraKeyframe("rear", 60.0, b1 @ rig["rear"], _room_keyframe(hall, spec, r1, "rear", 60), intr),
    }
    edges = detect_loop_closures(g, kfs, rig)
    assert len(edges) == 1
    e = edges[0]
    assert e.cameras == ("front", "rear")
    truth = b0.inverse() @ b1
    assert np.linalg.norm(e.Z.translation - truth.translation) < 0.05


def test_no_revisit_no_loops():
    tr = _traj(10)
    g = build_pose_graph({"front": tr}, {"front": list(tr.times)})
    flat = np.full((60, 100), 3.0)
    kfs = {("front", n): CameraKeyframe("front", float(tr.times[n]), tr.poses[n], flat, INTR) for n in range(10)}
    assert detect_loop_closures(g, kfs, {"front": PoseSE3.identity()}) == []


# ---------------------------------------------------------------- scale correction


def _cloud(rng, n=3000):
    hall = synth.furnished_room(12, 4, seed=0)
    pts = synth.surface_cloud(hall, spacing=0.1).points
    return pts[rng.choice(len(pts), n, replace=False)], pts


def test_scale_true_map(rng):
    src, ref = _cloud(rng)
    S = correct_global_scale(src, ref)
    assert abs(S.scale - 1.0) < 0.005


def test_scale_five_percent(rng):
    src, ref = _cloud(rng)
    S = correct_global_scale(0.95 * src, ref)
    assert abs(S.scale - 1 / 0.95) / (1 / 0.95) < 0.005
    again = correct_global_scale(S.apply(0.95 * src), ref)
    assert abs(again.scale - 1.0) < 0.005


def test_scale_from_trajectories():
    tr = _traj()
    small = Trajectory(tr.times, [PoseSE3(p.rotation, 0.95 * p.translation) for p in tr.poses])
    S = correct_global_scale(small, tr)
    assert abs(S.scale - 1 / 0.95) < 1e-9


def test_scale_rejects_reflection(rng):
    src, ref = _cloud(rng)
    mirrored = src * np.array([-1.0, 1.0, 1.0]) + [3.0, 0, 0]
    with pytest.raises(ScaleCorrectionError):
        correct_global_scale(mirrored, ref, max_residual=0.05)


# ---------------------------------------------------------------- fusion


def test_backproject_principal_point():
    d = np.zeros((60, 100))
    d[29, 49] = 2.5
    intr = dict(INTR, cx=49.0, cy=29.0)
    pts, _ = backproject(d, intr)
    np.testing.assert_allclose(pts, [[0, 0, 2.5]])


def test_fuse_plane_at_five_metres():
    kf = CameraKeyframe("front", 0.0, PoseSE3.identity(), np.full((60, 100), 5.0), INTR)
    cloud = fuse_depth_maps([kf], [PoseSE3.identity()], {"front": PoseSE3.identity()}, voxel=0.02)
    np.testing.assert_allclose(cloud.points[:, 2], 5.0, atol=1e-12)
    # pinhole footprint: width 100 px at f=100 spans 0.99 * 5 m between the outer pixel centres
    assert cloud.points[:, 0].max() - cloud.points[:, 0].min() == pytest.approx(4.95, abs=0.02)


def test_fused_size_monotone_in_voxel(rng):
    depth = rng.uniform(1, 8, (60, 100))
    kf = CameraKeyframe("front", 0.0, PoseSE3.identity(), depth, INTR)
    rig = {"front": PoseSE3.identity()}
    sizes = [len(fuse_depth_maps([kf, kf], [PoseSE3.identity(), PoseSE3.translate(0.3, 0, 0)], rig, voxel=v))
             for v in (0.01, 0.02, 0.05, 0.1, 0.5)]
    assert all(b <= a for a, b in zip(sizes, sizes[1:]))


def test_fused_colors_carried():
    rgb = np.zeros((60, 100, 3), dtype=np.uint8)
    rgb[..., 0] = 200
    kf = CameraKeyframe("front", 0.0, PoseSE3.identity(), np.full((60, 100), 2.0), INTR, rgb=rgb)
    c = fuse_depth_maps([kf], [PoseSE3.identity()], {"front": PoseSE3.identity()})
    assert isinstance(c, PointCloud) and np.all(c.colors[:, 0] == 200)
