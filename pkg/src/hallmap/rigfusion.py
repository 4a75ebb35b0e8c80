"""Fusion of four per-camera keyframe streams into one trajectory and dense map.

Each camera stream comes with its own trajectory (in its own world frame) and
per-frame depth maps. Streams are converted to body poses through the rig
extrinsics, anchored into the front stream's frame, joined in a pose graph
with ICP-verified loop closures (also across cameras), optimized with a robust
cost, optionally rescaled against a reference and fused into one cloud.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from hallmap.geometry import PoseSE3, Sim3Transform, hat, se3_log
from hallmap.io import (
    CalibrationError,
    PointCloud,
    RigCalibration,
    Trajectory,
    load_depth_png,
    load_rig_calibration,
    load_trajectory,
    read_json,
)
from hallmap.optim import levenberg_marquardt
from hallmap.registration import (
    DegenerateInputError,
    IcpConfig,
    KdTree,
    NoOverlapError,
    icp,
    umeyama_align,
    voxel_downsample,
)

log = logging.getLogger(__name__)


class AlignmentError(ValueError):
    pass


class PoseGraphError(ValueError):
    pass


class ScaleCorrectionError(ValueError):
    pass


@dataclass
class CameraKeyframe:
    camera_id: str
    t: float
    pose_cam_in_stream_world: PoseSE3
    depth: np.ndarray | None
    intrinsics: dict
    rgb: np.ndarray | None = None

    def __post_init__(self):
        if self.depth is not None:
            d = np.asarray(self.depth, dtype=float)
            if d.shape != (self.intrinsics["height"], self.intrinsics["width"]):
                raise ValueError(
                    f"depth of {self.camera_id}@{self.t:.3f} is {d.shape}, intrinsics say "
                    f"{self.intrinsics['height']}x{self.intrinsics['width']}"
                )
            if not np.all(np.isfinite(d)) or np.any(d < 0):
                raise ValueError(f"depth of {self.camera_id}@{self.t:.3f} has negative or non-finite values")
            self.depth = d


@dataclass
class RigFusionConfig:
    flow_threshold_px: float = 16.0
    merge_tolerance_s: float = 0.010
    loop_max_distance: float = 2.0
    loop_min_time_gap: float = 30.0
    loop_min_time_gap_cross: float = 5.0
    loop_max_view_angle_deg: float = 45.0
    loop_max_rmse: float = 0.1
    loop_min_inliers: float = 0.5
    loop_max_depth: float = 6.0
    loop_voxel: float = 0.1
    loop_max_candidates: int = 200
    loop_info_per_inlier: float = 0.01
    loop_icp_gate: float = 0.5
    loop_icp_variant: str = "point2plane"
    huber_delta: float = 0.1
    max_iterations: int = 100
    step_tol: float = 1e-6
    fuse_voxel: float = 0.02
    fuse_max_depth: float = 20.0
    fuse_stride: int = 1
    anchor_scale: bool = True

    def __post_init__(self):
        for name in (
            "flow_threshold_px", "loop_max_distance", "loop_max_rmse", "loop_max_depth",
            "loop_voxel", "loop_icp_gate", "huber_delta", "fuse_voxel", "fuse_max_depth", "step_tol",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.loop_min_inliers <= 1.0:
            raise ValueError("loop_min_inliers must lie in [0, 1]")
        if self.merge_tolerance_s < 0:
            raise ValueError("merge_tolerance_s must be non-negative")
        if self.loop_icp_variant not in ("point2point", "point2plane"):
            raise ValueError(f"unknown loop_icp_variant {self.loop_icp_variant!r}")
        if self.fuse_stride < 1 or self.max_iterations < 1:
            raise ValueError("fuse_stride and max_iterations must be at least 1")


# ---------------------------------------------------------------------------
# streams


def keyframe_select(flows, threshold: float = 16.0) -> list[int]:
    """Greedy keyframing on per-frame mean pixel displacement.

    ``flows[k]`` is the displacement between frames ``k-1`` and ``k`` (``flows[0]``
    is ignored). Frame 0 is always admitted; a frame is admitted once the
    displacement accumulated since the last keyframe reaches ``threshold``.
    """
    flows = np.asarray(flows, dtype=float)
    if len(flows) == 0:
        return []
    keep = [0]
    acc = 0.0
    for k in range(1, len(flows)):
        acc += flows[k]
        if acc >= threshold:
            keep.append(k)
            acc = 0.0
    return keep


def to_body_frame(kf: CameraKeyframe, rig: RigCalibration) -> PoseSE3:
    """Body pose in the stream's world: ``T_world_cam * T_body_cam^-1``."""
    if kf.camera_id not in rig:
        raise CalibrationError(f"camera {kf.camera_id!r} not in rig calibration ({sorted(rig)})")
    return kf.pose_cam_in_stream_world @ rig[kf.camera_id].inverse()


def body_trajectory(traj: Trajectory, camera_id: str, rig: RigCalibration) -> Trajectory:
    if camera_id not in rig:
        raise CalibrationError(f"camera {camera_id!r} not in rig calibration ({sorted(rig)})")
    inv = rig[camera_id].inverse()
    return Trajectory(traj.times, [p @ inv for p in traj.poses])


def _time_matched(a: Trajectory, b: Trajectory):
    """Positions of ``a`` at its own times and of ``b`` interpolated there (overlap only)."""
    lo, hi = max(a.times[0], b.times[0]), min(a.times[-1], b.times[-1])
    m = (a.times >= lo - 1e-9) & (a.times <= hi + 1e-9)
    ta = a.times[m]
    pa = a.positions()[m]
    pb = np.array([b.pose_at(t).translation for t in ta]).reshape(-1, 3)
    return pa, pb


def align_streams(streams: dict, with_scale: bool = True) -> dict:
    """Anchor transforms taking each stream's body trajectory into the front stream's frame.

    ``streams`` maps camera id to body ``Trajectory``. The front anchor is the
    identity; others come from Umeyama alignment of time-matched positions.
    """
    if "front" not in streams:
        raise AlignmentError("front stream missing; it defines the reference frame")
    front = streams["front"]
    anchors = {"front": Sim3Transform.identity()}
    for cam, tr in streams.items():
        if cam == "front":
            continue
        src, dst = _time_matched(tr, front)
        if len(src) < 3:
            raise AlignmentError(f"stream {cam!r} has {len(src)} time-matched samples with the front stream, need 3")
        try:
            anchors[cam] = umeyama_align(src, dst, with_scale=with_scale)
        except DegenerateInputError as e:
            raise AlignmentError(f"stream {cam!r}: {e}") from e
    return anchors


# ---------------------------------------------------------------------------
# pose graph


@dataclass
class Edge:
    kind: str  # odometry | rig | loop
    i: int
    j: int
    Z: PoseSE3
    information: np.ndarray
    cameras: tuple = ()

    def __post_init__(self):
        L = np.asarray(self.information, dtype=float)
        if L.shape != (6, 6) or not np.allclose(L, L.T) or np.linalg.eigvalsh(L)[0] <= 0:
            raise ValueError(f"{self.kind} edge ({self.i}, {self.j}): information must be 6x6 SPD")
        self.information = L


@dataclass
class PoseGraph:
    times: list
    poses: list
    cameras: list  # set of camera ids per node
    edges: list = field(default_factory=list)
    fixed: int = 0
    members: dict = field(default_factory=dict)  # (camera, keyframe index) -> node

    def __len__(self) -> int:
        return len(self.poses)

    def add_edge(self, e: Edge) -> None:
        if not (0 <= e.i < len(self) and 0 <= e.j < len(self)):
            raise PoseGraphError(f"edge ({e.i}, {e.j}) references a missing node")
        self.edges.append(e)

    def components(self) -> list:
        parent = list(range(len(self)))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for e in self.edges:
            ra, rb = find(e.i), find(e.j)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
        groups: dict = {}
        for n in range(len(self)):
            groups.setdefault(find(n), []).append(n)
        return sorted(groups.values(), key=lambda g: g[0])

    def trajectory(self) -> Trajectory:
        return Trajectory(np.asarray(self.times), list(self.poses))

    def to_json(self) -> dict:
        return {
            "fixed": self.fixed,
            "nodes": [
                {"id": k, "t": float(t), "cameras": sorted(c), "translation": p.translation.tolist(), "quaternion_wxyz": p.rotation.q.tolist()}
                for k, (t, p, c) in enumerate(zip(self.times, self.poses, self.cameras))
            ],
            "edges": [
                {
                    "kind": e.kind, "i": e.i, "j": e.j, "cameras": list(e.cameras),
                    "Z": {"translation": e.Z.translation.tolist(), "quaternion_wxyz": e.Z.rotation.q.tolist()},
                    "information_diag": np.diag(e.information).tolist(),
                    "residual": edge_residual(e, self.poses).tolist(),
                }
                for e in self.edges
            ],
        }


def edge_residual(e: Edge, poses: list) -> np.ndarray:
    return se3_log(e.Z.inverse() @ (poses[e.i].inverse() @ poses[e.j]))


def build_pose_graph(
    streams: dict,
    keyframe_times: dict,
    anchors: dict | None = None,
    merge_tolerance: float = 0.010,
    odometry_information=None,
) -> PoseGraph:
    """Graph over keyframe body poses of all streams.

    ``streams`` maps camera id to body ``Trajectory`` (stream frame);
    ``keyframe_times`` maps camera id to the keyframe timestamps. Keyframes of
    different cameras within ``merge_tolerance`` share a node. Consecutive
    keyframes of a stream are joined by odometry edges measured from that stream.
    A stream none of whose nodes is shared gets one rig edge, to the temporally
    nearest node of another stream, so the graph stays connected.
    """
    anchors = anchors or {c: Sim3Transform.identity() for c in streams}
    info = np.eye(6) if odometry_information is None else np.asarray(odometry_information, dtype=float)
    cams = ["front"] + sorted(c for c in streams if c != "front") if "front" in streams else sorted(streams)
    obs = []  # (t, priority, camera, pose in the anchored frame, k)
    for pri, cam in enumerate(cams):
        tr = streams[cam]
        a = anchors[cam]
        for k, t in enumerate(keyframe_times[cam]):
            obs.append((float(t), pri, cam, a.apply_pose(tr.pose_at(t)), k))
    if not obs:
        raise PoseGraphError("no keyframes in any stream")
    obs.sort(key=lambda o: (o[0], o[1]))
    times, poses, cam_sets = [], [], []
    members = {}
    for t, pri, cam, pose, k in obs:
        if times and t - times[-1] <= merge_tolerance + 1e-12 and cam not in cam_sets[-1]:
            cam_sets[-1].add(cam)
        else:
            times.append(t)
            poses.append(pose)
            cam_sets.append({cam})
        members[(cam, k)] = len(times) - 1
    g = PoseGraph(times, poses, cam_sets, members=members)
    for cam in cams:
        tr = streams[cam]
        s = anchors[cam].scale
        nodes = [members[(cam, k)] for k in range(len(keyframe_times[cam]))]
        kts = keyframe_times[cam]
        for a_, b_, ta, tb in zip(nodes[:-1], nodes[1:], kts[:-1], kts[1:]):
            rel = tr.pose_at(ta).inverse() @ tr.pose_at(tb)
            g.add_edge(Edge("odometry", a_, b_, PoseSE3(rel.rotation, s * rel.translation), info, (cam, cam)))
        shared = any(len(cam_sets[n]) > 1 for n in nodes)
        if nodes and not shared and len(cams) > 1:
            comp = next(c for c in g.components() if nodes[0] in c)
            others = [n for n in range(len(g)) if cam not in cam_sets[n] and n not in comp]
            if others:
                n0 = nodes[0]
                near = min(others, key=lambda n: (abs(times[n] - times[n0]), n))
                rel = tr.pose_at(times[near]).inverse() @ tr.pose_at(times[n0])
                g.add_edge(Edge("rig", near, n0, PoseSE3(rel.rotation, s * rel.translation), info, (cam, cam)))
    return g


def _ad(xi: np.ndarray) -> np.ndarray:
    """Small adjoint of a twist ordered (rotation, translation)."""
    A = np.zeros((6, 6))
    A[:3, :3] = hat(xi[:3])
    A[3:, 3:] = hat(xi[:3])
    A[3:, :3] = hat(xi[3:])
    return A


def huber_weight(s: np.ndarray, delta: float) -> np.ndarray:
    """IRLS weight of the Huber loss on the whitened residual norm ``sqrt(s)``."""
    n = np.sqrt(s)
    return np.where(n <= delta, 1.0, delta / np.maximum(n, 1e-300))


def huber_cost(s: np.ndarray, delta: float) -> np.ndarray:
    n = np.sqrt(s)
    return np.where(n <= delta, s, 2.0 * delta * n - delta * delta)


@dataclass
class GraphReport:
    costs: list
    iterations: int
    converged: bool
    singular: bool


def graph_cost(graph: PoseGraph, poses: list, delta: float) -> float:
    total = 0.0
    for e in graph.edges:
        r = edge_residual(e, poses)
        total += float(huber_cost(np.array(r @ e.information @ r), delta))
    return total


def optimize_pose_graph(graph: PoseGraph, delta: float = 0.1, max_iterations: int = 100, step_tol: float = 1e-6) -> GraphReport:
    """Robust (Huber) pose-graph adjustment, in place; the fixed node sets the gauge."""
    comps = graph.components()
    if len(comps) > 1:
        sizes = [len(c) for c in comps]
        raise PoseGraphError(f"pose graph has {len(comps)} disconnected components (sizes {sizes}; first nodes {[c[0] for c in comps]})")
    n = len(graph)
    free = [k for k in range(n) if k != graph.fixed]
    slot = {k: s for s, k in enumerate(free)}

    def cost(poses):
        return graph_cost(graph, poses, delta)

    def linearize(poses):
        rows, cols, vals = [], [], []
        g = np.zeros(6 * len(free))
        for e in graph.edges:
            r = edge_residual(e, poses)
            w = float(huber_weight(np.array(r @ e.information @ r), delta))
            Jj = (np.eye(6) + 0.5 * _ad(r)) @ poses[e.j].inverse().adjoint()
            blocks = []
            if e.i in slot:
                blocks.append((slot[e.i], -Jj))
            if e.j in slot:
                blocks.append((slot[e.j], Jj))
            L = w * e.information
            for a, Ja in blocks:
                g[6 * a : 6 * a + 6] += Ja.T @ L @ r
                for b, Jb in blocks:
                    blk = Ja.T @ L @ Jb
                    ii, jj = np.meshgrid(np.arange(6 * a, 6 * a + 6), np.arange(6 * b, 6 * b + 6), indexing="ij")
                    rows.append(ii.ravel())
                    cols.append(jj.ravel())
                    vals.append(blk.ravel())
        m = 6 * len(free)
        if rows:
            H = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m, m)).tocsc()
        else:
            H = sp.csc_matrix((m, m))
        return H, g

    rep = levenberg_marquardt(graph.poses, free, linearize, cost, max_iterations=max_iterations, step_tol=step_tol)
    if rep.singular:
        log.warning("pose graph: singular normal equations, poses unchanged")
    graph.poses = list(rep.poses)
    return GraphReport(rep.costs, rep.iterations, rep.converged, rep.singular)


# ---------------------------------------------------------------------------
# loop closures


def backproject(depth: np.ndarray, intr: dict, max_depth: float = np.inf, stride: int = 1, rgb=None):
    """Camera-frame points of the valid pixels of a depth map (optionally with their colors)."""
    d = depth[::stride, ::stride]
    v, u = np.mgrid[0 : depth.shape[0] : stride, 0 : depth.shape[1] : stride]
    ok = (d > 0) & (d <= max_depth)
    z = d[ok]
    pts = np.stack([(u[ok] - intr["cx"]) / intr["fx"] * z, (v[ok] - intr["cy"]) / intr["fy"] * z, z], axis=1)
    cols = None
    if rgb is not None:
        cols = np.asarray(rgb)[::stride, ::stride][ok]
    return pts, cols


def _view_dir(pose_body: PoseSE3, extr: PoseSE3) -> np.ndarray:
    return (pose_body @ extr).rotation.apply(np.array([0.0, 0.0, 1.0]))


def detect_loop_closures(graph: PoseGraph, keyframes: dict, rig: RigCalibration, cfg: RigFusionConfig | None = None,
                         node_cloud=None) -> list:
    """ICP-verified loop edges, proposed by pairs of (node, camera) observations.

    ``keyframes`` maps ``(camera, node)`` to a ``CameraKeyframe`` with depth.
    Candidates: observations closer than ``loop_max_distance`` with optical axes
    within ``loop_max_view_angle_deg``, and either a time gap above
    ``loop_min_time_gap`` or different cameras with a gap above
    ``loop_min_time_gap_cross``. A candidate is verified by registering the
    rig's whole depth snapshot at one node onto the other's: ``node_cloud(n)``
    returns those body-frame points, by default the union of the keyframes
    stored for node ``n``. Each node pair yields at most one edge, labelled
    with the camera pair of its closest candidate.
    """
    cfg = cfg or RigFusionConfig()
    keys = sorted(keyframes, key=lambda k: (k[1], k[0]))
    if not keys:
        return []
    pos = np.array([graph.poses[n].translation for _, n in keys])
    dirs = np.array([_view_dir(graph.poses[n], rig[c]) for c, n in keys])
    ts = np.array([graph.times[n] for _, n in keys])
    cos_max = math.cos(math.radians(cfg.loop_max_view_angle_deg))
    cands = []
    tree = KdTree(pos)
    for a, (ca, na) in enumerate(keys):
        for b in tree._tree.query_ball_point(pos[a], cfg.loop_max_distance):
            if b <= a:
                continue
            cb, nb = keys[b]
            if nb == na:
                continue
            gap = abs(ts[b] - ts[a])
            if not (gap > cfg.loop_min_time_gap or (ca != cb and gap > cfg.loop_min_time_gap_cross)):
                continue
            if float(dirs[a] @ dirs[b]) < cos_max:
                continue
            cands.append((float(np.linalg.norm(pos[a] - pos[b])), a, b))
    cands.sort()

    by_node: dict = {}
    for c, n in keys:
        by_node.setdefault(n, []).append(c)
    clouds: dict = {}

    def default_cloud(n):
        parts = []
        for c in by_node.get(n, []):
            kf = keyframes[(c, n)]
            pts, _ = backproject(kf.depth, kf.intrinsics, cfg.loop_max_depth)
            parts.append(rig[c].apply(pts) if len(pts) else pts.reshape(0, 3))
        return np.concatenate(parts) if parts else np.zeros((0, 3))

    def cloud(n):
        if n not in clouds:
            pts = node_cloud(n) if node_cloud is not None else default_cloud(n)
            clouds[n] = voxel_downsample(pts, cfg.loop_voxel)[0] if len(pts) else pts
        return clouds[n]

    edges = []
    tried = set()
    icfg = IcpConfig(max_iterations=80, max_corr_dist=cfg.loop_icp_gate, min_corr_dist=min(0.1, cfg.loop_icp_gate),
                     variant=cfg.loop_icp_variant)
    for _, a, b in cands:
        ka, kb = keys[a], keys[b]
        ni, nj = ka[1], kb[1]
        if (ni, nj) in tried:
            continue
        if len(tried) >= cfg.loop_max_candidates:
            break
        tried.add((ni, nj))
        src, tgt = cloud(nj), cloud(ni)
        if len(src) < 50 or len(tgt) < 50:
            continue
        init = graph.poses[ni].inverse() @ graph.poses[nj]
        try:
            res = icp(src, tgt, init=init, cfg=icfg)
        except (NoOverlapError, DegenerateInputError):
            continue
        if res.converged and res.rmse < cfg.loop_max_rmse and res.inlier_fraction > cfg.loop_min_inliers:
            n_in = res.inlier_fraction * len(src)
            info = np.eye(6) * cfg.loop_info_per_inlier * n_in
            edges.append(Edge("loop", ni, nj, res.transform, info, (ka[0], kb[0])))
            log.info("loop %s@%d <-> %s@%d rmse %.3f inliers %.2f", ka[0], ni, kb[0], nj, res.rmse, res.inlier_fraction)
    return edges


# ---------------------------------------------------------------------------
# scale and fusion


def correct_global_scale(source, reference, init: Sim3Transform | None = None, max_residual: float = 0.5,
                         max_corr_dist: float = 1.0, iterations: int = 30, max_points: int = 20_000) -> Sim3Transform:
    """Similarity transform taking ``source`` onto ``reference``; its scale is the correction.

    Trajectories are matched by time. Clouds are matched by nearest neighbours
    starting from ``init`` (coarse alignment), re-estimating the similarity
    each round. Raises ``ScaleCorrectionError`` on too few matches or when the
    final RMS residual exceeds ``max_residual`` (e.g. a mirrored input, which
    no proper rotation can fit). Clouds larger than ``max_points`` are fitted
    on an evenly strided subset.
    """
    if isinstance(source, Trajectory) and isinstance(reference, Trajectory):
        src, dst = _time_matched(source, reference)
        if len(src) < 3:
            raise ScaleCorrectionError(f"only {len(src)} time-matched poses")
        try:
            S = umeyama_align(src, dst, with_scale=True)
        except DegenerateInputError as e:
            raise ScaleCorrectionError(str(e)) from e
        rms = float(np.sqrt(np.mean(np.sum((S.apply(src) - dst) ** 2, axis=1))))
    else:
        src = source.points if isinstance(source, PointCloud) else np.asarray(source, dtype=float)
        src = src[:: max(1, -(-len(src) // max_points))]
        ref = reference.points if isinstance(reference, PointCloud) else np.asarray(reference, dtype=float)
        tree = KdTree(ref)
        S = init or Sim3Transform.identity()
        gate = max_corr_dist
        prev = math.inf
        rms = math.inf
        for _ in range(iterations):
            x = S.apply(src)
            d, idx = tree.query(x, max_distance=gate)
            ok = np.isfinite(d)
            if ok.sum() < 3:
                raise ScaleCorrectionError(f"only {int(ok.sum())} matches within {gate:.3g} m")
            try:
                step = umeyama_align(x[ok], ref[idx[ok]], with_scale=True)
            except DegenerateInputError as e:
                raise ScaleCorrectionError(str(e)) from e
            S = step @ S
            rms = float(np.sqrt(np.mean(d[ok] ** 2)))
            if abs(prev - rms) < 1e-7:
                break
            prev = rms
            gate = max(0.9 * gate, 0.05)
        d, _ = tree.query(S.apply(src))
        rms = float(np.sqrt(np.mean(d**2)))
    if not np.isfinite(rms) or rms > max_residual:
        raise ScaleCorrectionError(f"residual {rms:.3f} m after scale alignment exceeds {max_residual} m")
    return S


class VoxelAccumulator:
    """Running per-voxel sums, so large point streams fuse in bounded memory.

    Batches are reduced per voxel on arrival and merged into the totals once
    the pending rows outgrow them, which keeps the merging cost amortized.
    """

    def __init__(self, voxel: float):
        self.voxel = voxel
        self.keys = np.zeros((0, 3), dtype=np.int64)
        self.sums = np.zeros((0, 3))
        self.csum = np.zeros((0, 3))
        self.counts = np.zeros(0, dtype=np.int64)
        self.has_color = None
        self._pending: list = []
        self._pending_rows = 0

    @staticmethod
    def _reduce(keys, sums, csum, counts):
        u, inv = np.unique(keys, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        n = len(u)
        out_s = np.zeros((n, 3))
        out_c = np.zeros((n, 3))
        for k in range(3):
            out_s[:, k] = np.bincount(inv, sums[:, k], minlength=n)
            out_c[:, k] = np.bincount(inv, csum[:, k], minlength=n)
        return u, out_s, out_c, np.bincount(inv, counts, minlength=n).astype(np.int64)

    def add(self, pts: np.ndarray, colors=None) -> None:
        if len(pts) == 0:
            return
        if self.has_color is None:
            self.has_color = colors is not None
        keys = np.floor(pts / self.voxel).astype(np.int64)
        cols = np.asarray(colors, dtype=float) if self.has_color and colors is not None else np.zeros_like(pts)
        batch = self._reduce(keys, pts, cols, np.ones(len(pts), dtype=np.int64))
        self._pending.append(batch)
        self._pending_rows += len(batch[0])
        if self._pending_rows > max(len(self.keys), 1_000_000):
            self._merge()

    def _merge(self) -> None:
        if not self._pending:
            return
        parts = [(self.keys, self.sums, self.csum, self.counts)] + self._pending
        self.keys, self.sums, self.csum, self.counts = self._reduce(
            *[np.concatenate([p[i] for p in parts]) for i in range(4)]
        )
        self._pending, self._pending_rows = [], 0

    def cloud(self) -> PointCloud:
        self._merge()
        if len(self.counts) == 0:
            return PointCloud(np.zeros((0, 3)))
        c = self.counts[:, None]
        colors = np.rint(self.csum / c).astype(np.uint8) if self.has_color else None
        return PointCloud(self.sums / c, colors=colors)


def fuse_depth_maps(keyframes, body_poses, rig: RigCalibration, voxel: float = 0.02, max_depth: float = 20.0, stride: int = 1) -> PointCloud:
    """Back-project every valid depth pixel to the world and voxel-average (one centroid per voxel).

    ``keyframes`` and ``body_poses`` are parallel sequences.
    """
    acc = VoxelAccumulator(voxel)
    for kf, pose in zip(keyframes, body_poses):
        if kf.depth is None:
            continue
        pts, cols = backproject(kf.depth, kf.intrinsics, max_depth, stride, kf.rgb)
        if len(pts) == 0:
            continue
        acc.add((pose @ rig[kf.camera_id]).apply(pts), cols)
    return acc.cloud()


# ---------------------------------------------------------------------------
# dataset pipeline


@dataclass
class StreamData:
    camera_id: str
    intrinsics: dict
    trajectory: Trajectory  # camera poses in the stream's own world
    times: np.ndarray
    flows: np.ndarray
    depth_files: list
    root: Path

    def depth(self, k: int) -> np.ndarray | None:
        f = self.depth_files[k]
        return None if f is None else load_depth_png(self.root / f)


def load_streams(dataset_dir) -> tuple[dict, RigCalibration]:
    root = Path(dataset_dir)
    index = read_json(root / "index.json")
    rig = load_rig_calibration(root / index.get("rig", "rig.json"))
    streams = {}
    for cam, rel in sorted(index.get("cameras", {}).items()):
        cidx = read_json(root / rel)
        cdir = (root / rel).parent
        frames = cidx["frames"]
        streams[cam] = StreamData(
            cam,
            cidx["intrinsics"],
            load_trajectory(cdir / cidx["trajectory"]),
            np.array([f["t"] for f in frames]),
            np.array([f.get("flow_px", 0.0) for f in frames]),
            [f.get("depth") for f in frames],
            cdir,
        )
    if not streams:
        raise AlignmentError(f"no camera streams listed in {root / 'index.json'}")
    return streams, rig


@dataclass
class RigFusionResult:
    graph: PoseGraph
    anchors: dict
    loops: list
    report: GraphReport
    cloud: PointCloud | None
    initial_poses: list
    keyframe_counts: dict


def run_rig_fusion(streams: dict, rig: RigCalibration, cfg: RigFusionConfig | None = None, fuse: bool = True) -> RigFusionResult:
    """Keyframe selection, anchoring, graph construction, loop detection, optimization and depth fusion."""
    cfg = cfg or RigFusionConfig()
    kf_idx = {c: keyframe_select(s.flows, cfg.flow_threshold_px) for c, s in streams.items()}
    body = {c: body_trajectory(s.trajectory, c, rig) for c, s in streams.items()}
    anchors = align_streams(body, with_scale=cfg.anchor_scale)
    kf_times = {c: [float(streams[c].times[k]) for k in kf_idx[c]] for c in streams}
    graph = build_pose_graph(body, kf_times, anchors, cfg.merge_tolerance_s)
    keyframes = {}
    for c, s in streams.items():
        for j, k in enumerate(kf_idx[c]):
            d = s.depth(k)
            if d is None:
                continue
            node = graph.members[(c, j)]
            keyframes[(c, node)] = CameraKeyframe(c, float(s.times[k]), s.trajectory.pose_at(s.times[k]), d, s.intrinsics)

    def node_cloud(n):
        # every camera's depth frame at the node's time, not only the keyframes
        parts = []
        t = graph.times[n]
        for c, s in streams.items():
            k = int(np.argmin(np.abs(s.times - t)))
            if abs(s.times[k] - t) > cfg.merge_tolerance_s:
                continue
            d = keyframes[(c, n)].depth if (c, n) in keyframes else s.depth(k)
            if d is None:
                continue
            pts, _ = backproject(d, s.intrinsics, cfg.loop_max_depth)
            parts.append(rig[c].apply(pts) if len(pts) else pts.reshape(0, 3))
        return np.concatenate(parts) if parts else np.zeros((0, 3))

    loops = detect_loop_closures(graph, keyframes, rig, cfg, node_cloud)
    for e in loops:
        graph.add_edge(e)
    initial = list(graph.poses)
    report = optimize_pose_graph(graph, cfg.huber_delta, cfg.max_iterations, cfg.step_tol)
    cloud = None
    if fuse:
        items = sorted(keyframes.items(), key=lambda kv: (kv[0][1], kv[0][0]))
        cloud = fuse_depth_maps(
            [kf for _, kf in items], [graph.poses[n] for (_, n), _ in items], rig, cfg.fuse_voxel, cfg.fuse_max_depth, cfg.fuse_stride
        )
    return RigFusionResult(graph, anchors, loops, report, cloud, initial, {c: len(v) for c, v in kf_idx.items()})
