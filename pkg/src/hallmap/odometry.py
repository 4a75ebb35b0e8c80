"""Sliding-window LiDAR-inertial odometry with keyframe mapping.

Processing order per sweep: adaptive downsampling, deskewing with the
constant-velocity prediction, point-to-plane registration against the keyframe
map, joint refinement of all sweeps inside the time window, keyframe decision
and, for a new keyframe, joint refinement of all keyframes overlapping it.

The IMU enters through per-sweep gravity directions (an attitude residual) and
the motion model is a constant-velocity prior between consecutive sweeps.
Sweeps are assumed contiguous: the start pose of a sweep is the end pose of
the previous one.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from hallmap.geometry import PoseSE3, Rotation, hat, interpolate_poses, se3_log
from hallmap.io import ImuSample, PointCloud, ScanFrame, Trajectory
from hallmap.optim import levenberg_marquardt
from hallmap.registration import IcpResult, KdTree, estimate_normals, voxel_downsample, voxel_labels

log = logging.getLogger(__name__)

UP = np.array([0.0, 0.0, 1.0])


class TrackingLostError(RuntimeError):
    """Registration found no overlap with the map; carries the last good state."""

    def __init__(self, message: str, trajectory: Trajectory | None = None, keyframes=None):
        super().__init__(message)
        self.trajectory = trajectory
        self.keyframes = keyframes or []


@dataclass
class OdometryConfig:
    horizon_s: float = 0.8
    target_points_per_scan: int = 2000
    keyframe_overlap_thresh: float = 0.7
    keyframe_dist_thresh: float = 0.5
    refine_overlap_thresh: float = 0.3
    overlap_radius: float = 0.3
    gravity_weight: float = 100.0
    motion_prior_weight: float = 10.0
    keyframe_voxel: float = 0.1
    local_map_voxel: float = 0.1
    local_map_keyframes: int = 8
    normal_k: int = 20
    min_planarity: float = 0.05
    corr_gate: float = 1.0
    robust_scale: float = 0.03
    register_iterations: int = 15
    window_iterations: int = 10
    refine_iterations: int = 10
    refine_max_keyframes: int = 12
    refine_neighbours: int = 3
    refine_points: int = 600
    refine_max_distance: float = 10.0
    refine_map: bool = True
    gravity_window_s: float = 0.5

    def __post_init__(self):
        if self.horizon_s <= 0:
            raise ValueError("horizon_s must be positive")
        if self.target_points_per_scan < 10:
            raise ValueError("target_points_per_scan must be at least 10")
        for name in ("keyframe_overlap_thresh", "refine_overlap_thresh"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("keyframe_dist_thresh", "overlap_radius", "keyframe_voxel", "local_map_voxel", "corr_gate", "robust_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.gravity_weight < 0 or self.motion_prior_weight < 0:
            raise ValueError("weights must be non-negative")
        if self.normal_k < 3:
            raise ValueError("normal_k must be at least 3")


@dataclass(eq=False)
class LidarKeyframe:
    id: int
    pose: PoseSE3
    points: PointCloud  # body frame, voxel-downsampled
    gravity_dir: np.ndarray
    t: float
    normals: np.ndarray = None  # body frame; zero rows mark non-planar neighbourhoods
    tree: KdTree = None
    created_pose: PoseSE3 = None  # pose before any keyframe-map refinement

    def __post_init__(self):
        g = np.asarray(self.gravity_dir, dtype=float)
        self.gravity_dir = g / np.linalg.norm(g)
        if self.tree is None:
            self.tree = KdTree(self.points)
        if self.normals is None:
            k = min(20, len(self.points) - 1)
            self.normals = estimate_normals(self.points, k=k, tree=self.tree, min_planarity=0.05)
        if self.created_pose is None:
            self.created_pose = self.pose

    def world_points(self) -> np.ndarray:
        return self.pose.apply(self.points.points)


# ---------------------------------------------------------------------------
# preprocessing


def choose_voxel(points: np.ndarray, target: int, lo: float = 0.01, hi: float = 2.0, hint: float | None = None) -> float:
    """Voxel edge whose occupied-voxel count is within 10% of ``target`` (or the closest reachable)."""

    def count(v):
        return len(voxel_labels(points, v)[1])

    lo_n, hi_n = 0.9 * target, 1.1 * target
    best_v, best_err = hi, math.inf
    if hint is not None and lo <= hint <= hi:
        c = count(hint)
        if lo_n <= c <= hi_n:
            return hint
        best_v, best_err = hint, abs(c - target)
    a, b = math.log(lo), math.log(hi)
    for _ in range(30):
        mid = 0.5 * (a + b)
        v = math.exp(mid)
        c = count(v)
        if abs(c - target) < best_err:
            best_v, best_err = v, abs(c - target)
        if lo_n <= c <= hi_n:
            return v
        if c > hi_n:
            a = mid
        else:
            b = mid
    return best_v


def adaptive_downsample(scan: ScanFrame, target: int, voxel_hint: float | None = None) -> ScanFrame:
    """Voxel-grid filter with the voxel edge tuned so roughly ``target`` points survive.

    One centroid per occupied voxel; each centroid carries the earliest
    timestamp of its voxel. Scans within 10% of ``target`` pass through.
    """
    if len(scan) <= 1.1 * target:
        return scan
    pts = scan.points.points
    v = choose_voxel(pts, target, hint=voxel_hint)
    cent, times, _ = voxel_downsample(pts, v, scan.points.times)
    out = ScanFrame(PointCloud(cent, times=times), scan.sweep_start, scan.sweep_end)
    out.voxel = v
    return out


def sweep_fraction(scan: ScanFrame) -> np.ndarray:
    dur = scan.sweep_end - scan.sweep_start
    if dur <= 0:
        return np.ones(len(scan))
    return np.clip((scan.points.times - scan.sweep_start) / dur, 0.0, 1.0)


def deskew_points(points: np.ndarray, tau: np.ndarray, pose_start: PoseSE3, pose_end: PoseSE3) -> np.ndarray:
    if pose_start is pose_end or pose_start == pose_end:
        return pose_end.apply(points)
    R, t = interpolate_poses(pose_start, pose_end, tau)
    return np.einsum("nij,nj->ni", R, points) + t


def deskew_scan(scan: ScanFrame, pose_start: PoseSE3, pose_end: PoseSE3) -> PointCloud:
    """World-frame points, each moved with the pose interpolated at its timestamp."""
    pts = deskew_points(scan.points.points, sweep_fraction(scan), pose_start, pose_end)
    return PointCloud(pts, scan.points.colors, scan.points.times)


def estimate_gravity(imu, window_s: float = 0.5, t_end: float | None = None, var_thresh: float = 0.05):
    """Unit gravity ("up") direction in the body frame and a confidence in (0, 1].

    Uses the mean accelerometer reading over the last ``window_s`` seconds before
    ``t_end``. The confidence drops below 1 when the total accelerometer variance
    exceeds ``var_thresh`` (platform not quasi-static).
    """
    if isinstance(imu, tuple):
        ts, acc = imu
    else:
        ts = np.array([s.t for s in imu])
        acc = np.array([s.accel for s in imu]).reshape(-1, 3)
    if t_end is None:
        if len(ts) == 0:
            raise ValueError("no IMU samples")
        t_end = ts[-1]
    m = (ts >= t_end - window_s - 1e-12) & (ts <= t_end + 1e-12)
    if not np.any(m):
        raise ValueError(f"no IMU samples in window [{t_end - window_s}, {t_end}]")
    a = acc[m]
    mean = a.mean(axis=0)
    n = np.linalg.norm(mean)
    if n < 1e-9:
        raise ValueError("zero mean specific force, gravity undefined")
    var = float(a.var(axis=0).sum())
    conf = 1.0 if var <= var_thresh else var_thresh / var
    if len(a) < 10:
        conf *= len(a) / 10.0
    return mean / n, conf


def gravity_alignment(g_body: np.ndarray) -> Rotation:
    """Smallest rotation taking the measured body "up" direction onto world +z."""
    g = g_body / np.linalg.norm(g_body)
    axis = np.cross(g, UP)
    s = np.linalg.norm(axis)
    c = float(np.dot(g, UP))
    if s < 1e-12:
        return Rotation.identity() if c > 0 else Rotation.rot_x(math.pi)
    return Rotation.about_axis(axis, math.atan2(s, c))


# ---------------------------------------------------------------------------
# point-to-plane map


def cauchy(r: np.ndarray, c: float):
    """Cauchy loss ``log(1 + r^2/c^2)`` of residuals whitened by ``c``, and the IRLS weight on ``r^2``."""
    q = (r / c) ** 2
    return np.log1p(q), 1.0 / (c * c * (1.0 + q))


class PlaneMap:
    """Points with normals and a kd-tree, in the world frame.

    Residuals are point-to-plane distances under a Cauchy loss of scale
    ``robust_scale``; points without a match inside the gate pay the loss of
    the gate distance, so the cost stays continuous in the pose.
    """

    def __init__(self, points: np.ndarray, normals: np.ndarray, tree: KdTree | None = None, robust_scale: float = 0.03):
        valid = np.any(normals != 0.0, axis=1)
        self.points = np.asarray(points)[valid]
        self.normals = np.asarray(normals)[valid]
        self.tree = tree if tree is not None and valid.all() else (KdTree(self.points) if len(self.points) else None)
        self.robust_scale = robust_scale

    def __len__(self) -> int:
        return len(self.points)

    def match(self, x: np.ndarray, gate: float):
        """Point-to-plane residuals of ``x`` with their matched normals; ``ok`` marks gated inliers."""
        d, idx = self.tree.query(x, max_distance=gate)
        ok = np.isfinite(d)
        idx = np.minimum(idx, len(self.points) - 1)
        n = self.normals[idx]
        r = np.einsum("ij,ij->i", n, x - self.points[idx])
        ok &= np.abs(r) < gate
        return r, n, ok

    def cost(self, x: np.ndarray, gate: float, matched=None) -> float:
        r, _, ok = matched if matched is not None else self.match(x, gate)
        return float(np.sum(cauchy(np.where(ok, r, gate), self.robust_scale)[0]))

    def normal_equations(self, x: np.ndarray, gate: float, blocks, matched=None):
        """Weighted ``(J^T W J, J^T W r)`` contributions of the matched points.

        ``blocks`` lists ``(slot, scale)`` pairs: the point Jacobian with respect
        to a left twist on pose ``slot`` is ``scale[:, None] * [x × n, n]``.
        Returns ``{(a, b): H_ab}`` and ``{a: g_a}``. ``matched`` reuses a
        previous ``match(x, gate)`` result.
        """
        r, n, ok = matched if matched is not None else self.match(x, gate)
        base = np.hstack([np.cross(x[ok], n[ok]), n[ok]])
        r = r[ok]
        w = cauchy(r, self.robust_scale)[1]
        Js = [(a, base * np.asarray(s)[ok][:, None]) for a, s in blocks]
        H, g = {}, {}
        for a, Ja in Js:
            Jw = Ja * w[:, None]
            g[a] = Jw.T @ r
            for b, Jb in Js:
                H[(a, b)] = Jw.T @ Jb
        return H, g


def build_plane_map(cloud, k: int = 20, min_planarity: float = 0.05, robust_scale: float = 0.03) -> PlaneMap:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    tree = KdTree(pts)
    normals = estimate_normals(pts, k=min(k, len(pts) - 1), tree=tree, min_planarity=min_planarity)
    return PlaneMap(pts, normals, tree, robust_scale)


# ---------------------------------------------------------------------------
# registration


def motion_residual(prev_motion: PoseSE3, start: PoseSE3, end: PoseSE3) -> np.ndarray:
    """Deviation from constant velocity: ``log(prev_motion^-1 (start^-1 end))``."""
    return se3_log(prev_motion.inverse() @ (start.inverse() @ end))


def smoothness_terms(pa: PoseSE3 | None, pb: PoseSE3, pc: PoseSE3, prev_motion: PoseSE3 | None = None):
    """Constant-velocity residual of the motions ``pa -> pb`` and ``pb -> pc`` with left-twist Jacobians.

    With ``prev_motion`` given, it replaces ``pa^-1 pb`` and ``pa`` is unused.
    Returns ``(r, J_a, J_b, J_c)`` (``J_a`` is None for a fixed previous motion);
    Jacobians use the small-residual approximation ``Jr^-1(r) = I``.
    """
    A = prev_motion if prev_motion is not None else pa.inverse() @ pb
    E = A.inverse() @ (pb.inverse() @ pc)
    r = se3_log(E)
    Jc = pc.inverse().adjoint()
    Jb = -Jc
    Ja = None
    if prev_motion is None:
        Ja = (E.inverse() @ pb.inverse()).adjoint()
        Jb = Jb - Ja
    return r, Ja, Jb, Jc


def gravity_terms(pose: PoseSE3, g_meas: np.ndarray):
    """Residual ``R^T z - g`` between predicted and measured body-frame up direction, and its Jacobian."""
    Rt = pose.rotation.as_matrix().T
    J = np.zeros((3, 6))
    J[:, :3] = Rt @ hat(UP)
    return Rt @ UP - g_meas, J


def register_scan(
    scan_ds: ScanFrame,
    local_map: PlaneMap | None,
    init: PoseSE3,
    pose_start: PoseSE3 | None = None,
    prev_motion: PoseSE3 | None = None,
    motion_prior_weight: float = 10.0,
    gate: float = 1.0,
    max_iterations: int = 15,
) -> IcpResult:
    """Point-to-plane registration of a sweep against the map, estimating its end pose.

    With ``pose_start`` the sweep is deskewed between ``pose_start`` and the
    estimate while iterating; otherwise it is treated as rigid. ``prev_motion``
    (the previous sweep's start-to-end motion) adds the constant-velocity prior.
    An empty or missing map bootstraps: the initial pose is returned unchanged.
    """
    if local_map is None or len(local_map) == 0:
        return IcpResult(init, 0.0, 0, True, 1.0)
    pts = scan_ds.points.points
    tau = sweep_fraction(scan_ds) if pose_start is not None else np.ones(len(pts))
    start = pose_start if pose_start is not None else None

    def world(T):
        return deskew_points(pts, tau, start, T) if start is not None else T.apply(pts)

    x0 = world(init)
    _, _, ok0 = local_map.match(x0, gate)
    if not np.any(ok0):
        raise TrackingLostError(f"sweep at t={scan_ds.sweep_end:.3f}s has no correspondence with the map")

    use_prior = prev_motion is not None and start is not None and motion_prior_weight > 0

    w2 = motion_prior_weight**2

    last = {"poses": None}

    def matched(poses):
        if last["poses"] is not poses:
            x = world(poses[0])
            last.update(poses=poses, x=x, m=local_map.match(x, gate))
        return last["x"], last["m"]

    def cost(poses):
        x, m = matched(poses)
        c = local_map.cost(x, gate, m)
        if use_prior:
            c += w2 * float(np.sum(motion_residual(prev_motion, start, poses[0]) ** 2))
        return c

    def linearize(poses):
        x, m = matched(poses)
        Hb, gb = local_map.normal_equations(x, gate, [(0, tau)], m)
        H, g = Hb[(0, 0)], gb[0]
        if use_prior:
            r, _, _, Jc = smoothness_terms(None, start, poses[0], prev_motion)
            H += w2 * Jc.T @ Jc
            g += w2 * Jc.T @ r
        return H, g

    rep = levenberg_marquardt(
        [init], [0], linearize, cost, max_iterations=max_iterations, step_tol=1e-6, max_tries=4, cost_tol=1e-6
    )
    T = rep.poses[0]
    r, _, ok = local_map.match(world(T), gate)
    rmse = float(np.sqrt(np.mean(r[ok] ** 2))) if ok.any() else math.inf
    return IcpResult(T, rmse, rep.iterations, rep.converged, float(ok.mean()), rep.costs)


# ---------------------------------------------------------------------------
# sliding window


@dataclass(eq=False)
class WindowEntry:
    scan: ScanFrame  # downsampled
    end: PoseSE3
    gravity: np.ndarray | None = None  # measured body-frame up direction


@dataclass(eq=False)
class SlidingWindow:
    """Sweeps inside the time horizon plus the frozen boundary pose before the oldest one."""

    horizon: float = 0.8
    entries: deque = field(default_factory=deque)
    anchor: PoseSE3 = field(default_factory=PoseSE3.identity)
    prev_motion: PoseSE3 | None = None

    def push(self, entry: WindowEntry) -> list:
        """Append a sweep and evict those falling out of the horizon; returns the evicted entries."""
        self.entries.append(entry)
        evicted = []
        newest = entry.scan.sweep_end
        while len(self.entries) > 1 and newest - self.entries[0].scan.sweep_start > self.horizon + 1e-9:
            old = self.entries.popleft()
            self.prev_motion = self.anchor.inverse() @ old.end
            self.anchor = old.end
            evicted.append(old)
        return evicted

    def starts(self, ends=None) -> list:
        ends = ends if ends is not None else [e.end for e in self.entries]
        return [self.anchor] + ends[:-1]

    def span(self) -> float:
        if not self.entries:
            return 0.0
        return self.entries[-1].scan.sweep_end - self.entries[0].scan.sweep_start


@dataclass
class WindowReport:
    poses: list
    costs: list
    converged: bool
    singular: bool


def window_refine(
    window: SlidingWindow,
    keyframe_map: PlaneMap,
    gravity=None,
    gravity_weight: float = 100.0,
    motion_prior_weight: float = 10.0,
    gate: float = 1.0,
    max_iterations: int = 10,
) -> WindowReport:
    """Jointly refine the end poses of every sweep in the window.

    Residuals: point-to-plane of each deskewed sweep against the keyframe map,
    constant-velocity smoothness between consecutive sweeps, and
    ``R^T z - g`` gravity residuals. ``gravity`` is a list of measured body-frame
    up directions (``None`` entries skip the term); defaults to the ones stored
    in the window entries. Returns the previous poses with ``singular=True``
    when the normal equations are singular.
    """
    entries = list(window.entries)
    K = len(entries)
    if K == 0:
        return WindowReport([], [0.0], True, False)
    if gravity is None:
        gravity = [e.gravity for e in entries]
    pts = [e.scan.points.points for e in entries]
    taus = [sweep_fraction(e.scan) for e in entries]
    anchor = window.anchor
    # variable layout: poses[0] = anchor (fixed), poses[1 + i] = end of sweep i
    init = [anchor] + [e.end for e in entries]
    free = list(range(1, K + 1))

    wm2 = motion_prior_weight**2
    wg2 = gravity_weight**2

    def smooth(poses):
        # (pose indices a, b, c; r, J_a, J_b, J_c) for every consecutive motion pair
        out = []
        if window.prev_motion is not None:
            out.append(((None, 0, 1), smoothness_terms(None, poses[0], poses[1], window.prev_motion)))
        for i in range(1, K):
            out.append(((i - 1, i, i + 1), smoothness_terms(poses[i - 1], poses[i], poses[i + 1])))
        return out

    # the solver linearizes at the poses whose cost it evaluated last; keep those matches
    last = {"poses": None}

    def matches(poses):
        if last["poses"] is not poses:
            xs = [deskew_points(pts[i], taus[i], poses[i], poses[i + 1]) for i in range(K)]
            last.update(poses=poses, xs=xs, m=[keyframe_map.match(x, gate) for x in xs])
        return last["xs"], last["m"]

    def cost(poses):
        c = 0.0
        xs, ms = matches(poses)
        for i in range(K):
            c += keyframe_map.cost(xs[i], gate, ms[i])
        if motion_prior_weight > 0:
            for _, (r, *_) in smooth(poses):
                c += wm2 * float(r @ r)
        if gravity_weight > 0:
            for i in range(K):
                if gravity[i] is not None:
                    r, _ = gravity_terms(poses[i + 1], gravity[i])
                    c += wg2 * float(r @ r)
        return c

    def linearize(poses):
        n = 6 * K
        H = np.zeros((n, n))
        g = np.zeros(n)

        def add(blocks, r, w):
            # blocks: (pose index, Jacobian); pose 0 is the fixed anchor
            blocks = [(k - 1, J) for k, J in blocks if k is not None and k >= 1 and J is not None]
            for a, Ja in blocks:
                g[6 * a : 6 * a + 6] += w * Ja.T @ r
                for b, Jb in blocks:
                    H[6 * a : 6 * a + 6, 6 * b : 6 * b + 6] += w * Ja.T @ Jb

        xs, ms = matches(poses)
        for i in range(K):
            blocks = [(i - 1, 1.0 - taus[i]), (i, taus[i])] if i > 0 else [(i, taus[i])]
            Hb, gb = keyframe_map.normal_equations(xs[i], gate, blocks, ms[i])
            for a, ga in gb.items():
                g[6 * a : 6 * a + 6] += ga
            for (a, b), Hab in Hb.items():
                H[6 * a : 6 * a + 6, 6 * b : 6 * b + 6] += Hab
        if motion_prior_weight > 0:
            for (ia, ib, ic), (r, Ja, Jb, Jc) in smooth(poses):
                add([(ia, Ja), (ib, Jb), (ic, Jc)], r, wm2)
        if gravity_weight > 0:
            for i in range(K):
                if gravity[i] is not None:
                    r, J = gravity_terms(poses[i + 1], gravity[i])
                    add([(i + 1, J)], r, wg2)
        return H, g

    rep = levenberg_marquardt(
        init, free, linearize, cost, max_iterations=max_iterations, step_tol=1e-5, max_tries=4, cost_tol=1e-5
    )
    if rep.singular:
        log.warning("window refinement: singular normal equations, keeping previous poses")
    return WindowReport(rep.poses[1:], rep.costs, rep.converged, rep.singular)


# ---------------------------------------------------------------------------
# keyframes


def keyframe_decision(current_pose: PoseSE3, scan_world: np.ndarray, last_kf: LidarKeyframe | None, cfg: OdometryConfig) -> bool:
    """New keyframe when overlap with the last keyframe drops below threshold or the platform moved far enough."""
    if last_kf is None:
        return True
    if np.linalg.norm(current_pose.translation - last_kf.pose.translation) > cfg.keyframe_dist_thresh:
        return True
    local = last_kf.pose.inverse().apply(scan_world)
    d, _ = last_kf.tree.query(local, max_distance=cfg.overlap_radius)
    overlap = float(np.count_nonzero(np.isfinite(d))) / max(len(local), 1)
    return overlap < cfg.keyframe_overlap_thresh


def _kf_overlap(a: LidarKeyframe, b: LidarKeyframe, radius: float) -> float:
    """Fraction of ``a``'s points with a neighbour in ``b`` (both placed at their current poses)."""
    step = max(1, len(a.points) // 2000)
    local = (b.pose.inverse() @ a.pose).apply(a.points.points[::step])
    d, _ = b.tree.query(local, max_distance=radius)
    return float(np.count_nonzero(np.isfinite(d))) / len(local)


def overlapping_keyframes(keyframes: list, new_kf_id: int, cfg: OdometryConfig) -> list:
    """Ids of keyframes overlapping the new one above ``refine_overlap_thresh``, best first (capped)."""
    new = next(kf for kf in keyframes if kf.id == new_kf_id)
    scored = []
    for kf in keyframes:
        if kf.id == new_kf_id:
            continue
        if np.linalg.norm(kf.pose.translation - new.pose.translation) > cfg.refine_max_distance:
            continue
        ov = _kf_overlap(new, kf, cfg.overlap_radius)
        if ov > cfg.refine_overlap_thresh:
            scored.append((-ov, kf.id))
    scored.sort()
    return [i for _, i in scored[: cfg.refine_max_keyframes]]


@dataclass
class RefineReport:
    selected: list
    costs: list
    converged: bool


def keyframe_map_refine(keyframes: list, new_kf_id: int, cfg: OdometryConfig | None = None) -> RefineReport:
    """Jointly realign every keyframe overlapping the new one (in place).

    Selection: overlap ratio to the new keyframe above ``refine_overlap_thresh``
    (at most ``refine_max_keyframes``, highest overlap first). The oldest selected
    keyframe stays fixed as gauge; unselected keyframes are untouched. Residuals
    are symmetric point-to-plane terms between each selected keyframe and its
    nearest selected neighbours plus the new keyframe.
    """
    cfg = cfg or OdometryConfig()
    by_id = {kf.id: kf for kf in keyframes}
    sel_ids = sorted(overlapping_keyframes(keyframes, new_kf_id, cfg) + [new_kf_id])
    if len(sel_ids) < 2:
        return RefineReport([], [0.0], True)
    sel = [by_id[i] for i in sel_ids]
    M = len(sel)
    new_slot = sel_ids.index(new_kf_id)
    pos = np.array([kf.pose.translation for kf in sel])
    pairs = set()
    for a in range(M):
        order = np.argsort(np.linalg.norm(pos - pos[a], axis=1), kind="stable")
        for b in order[1 : 1 + cfg.refine_neighbours]:
            pairs.add((min(a, int(b)), max(a, int(b))))
        if a != new_slot:
            pairs.add((min(a, new_slot), max(a, new_slot)))
    # directed terms grouped by the keyframe whose planes are used
    sources = {t: sorted({s for p in pairs for s, t2 in (p, p[::-1]) if t2 == t}) for t in range(M)}
    sub = []
    for kf in sel:
        step = max(1, len(kf.points) // cfg.refine_points)
        sub.append(kf.points.points[::step])
    gate = cfg.corr_gate

    last = {"poses": None}

    def terms(poses):
        if last["poses"] is not poses:
            last.update(poses=poses, out=_terms(poses))
        return last["out"]

    def _terms(poses):
        """``(s, t, r, ok, idx)``: points of ``s`` against planes of ``t``, one query per ``t``."""
        out = []
        for t, srcs in sources.items():
            if not srcs:
                continue
            inv_t = poses[t].inverse()
            xs = [(inv_t @ poses[s]).apply(sub[s]) for s in srcs]
            d, idx = sel[t].tree.query(np.concatenate(xs), max_distance=gate)
            idx = np.minimum(idx, len(sel[t].points) - 1)
            nt = sel[t].normals[idx]
            xt = np.concatenate(xs)
            r = np.einsum("ij,ij->i", nt, xt - sel[t].points.points[idx])
            ok = np.isfinite(d) & np.any(nt != 0.0, axis=1) & (np.abs(r) < gate)
            start = 0
            for s_, x in zip(srcs, xs):
                sl = slice(start, start + len(x))
                out.append((s_, t, r[sl], ok[sl], idx[sl]))
                start += len(x)
        return out

    def cost(poses):
        c = 0.0
        for _, _, r, ok, _ in terms(poses):
            c += float(np.sum(cauchy(np.where(ok, r, gate), cfg.robust_scale)[0]))
        return c

    free_idx = list(range(1, M))

    def linearize(poses):
        n = 6 * (M - 1)
        H = np.zeros((n, n))
        g = np.zeros(n)
        for s_, t, r, ok, idx in terms(poses):
            if not ok.any():
                continue
            x = poses[s_].apply(sub[s_][ok])
            nw = poses[t].rotation.apply(sel[t].normals[idx[ok]])
            J = np.hstack([np.cross(x, nw), nw])
            rr = r[ok]
            w = cauchy(rr, cfg.robust_scale)[1]
            blocks = []
            if s_ > 0:
                blocks.append((s_ - 1, J))
            if t > 0:
                blocks.append((t - 1, -J))
            for i, Ji in blocks:
                Jw = Ji * w[:, None]
                g[6 * i : 6 * i + 6] += Jw.T @ rr
                for j, Jj in blocks:
                    H[6 * i : 6 * i + 6, 6 * j : 6 * j + 6] += Jw.T @ Jj
        return H, g

    init = [kf.pose for kf in sel]
    rep = levenberg_marquardt(
        init, free_idx, linearize, cost, max_iterations=cfg.refine_iterations, step_tol=1e-6, max_tries=4, cost_tol=1e-6
    )
    if not rep.singular:
        for kf, p in zip(sel, rep.poses):
            kf.pose = p
    return RefineReport(sel_ids, rep.costs, rep.converged)


# ---------------------------------------------------------------------------
# pipeline


def keyframe_normals(body_pts: np.ndarray, context_world: np.ndarray | None, pose: PoseSE3, cfg: OdometryConfig):
    """Normals of a new keyframe's points, with neighbourhoods drawn from it and ``context_world``.

    A single sweep samples surfaces along sparse rings; adding the points of
    the preceding keyframes fills the gaps between rings.
    """
    cloud = body_pts
    if context_world is not None and len(context_world):
        cloud = np.concatenate([body_pts, pose.inverse().apply(context_world)])
    k = min(cfg.normal_k, len(cloud) - 1)
    return estimate_normals(cloud, k=k, min_planarity=cfg.min_planarity, at=body_pts)


def _local_map(keyframes: list, extra_ids, cfg: OdometryConfig) -> PlaneMap:
    """Plane map over the most recent keyframes plus ``extra_ids`` (e.g. revisited ones).

    One point per voxel of edge ``local_map_voxel``; the newest keyframe wins.
    """
    ids = {kf.id for kf in keyframes[-cfg.local_map_keyframes :]} | set(extra_ids)
    sel = [kf for kf in keyframes if kf.id in ids][::-1]
    pts = np.concatenate([kf.world_points() for kf in sel])
    nrm = np.concatenate([kf.pose.rotation.apply(kf.normals) for kf in sel])
    keep = np.any(nrm != 0.0, axis=1)
    pts, nrm = pts[keep], nrm[keep]
    keys = np.floor(pts / cfg.local_map_voxel).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    first.sort()
    return PlaneMap(pts[first], nrm[first], robust_scale=cfg.robust_scale)


def keyframe_map_cloud(keyframes: list, voxel: float | None = None) -> PointCloud:
    """World-frame concatenation of keyframe points, optionally deduplicated by voxel."""
    if not keyframes:
        return PointCloud(np.zeros((0, 3)))
    pts = np.concatenate([kf.world_points() for kf in keyframes])
    if voxel:
        pts = voxel_downsample(pts, voxel)[0]
    return PointCloud(pts)


@dataclass
class _ImuArrays:
    t: np.ndarray
    accel: np.ndarray

    @classmethod
    def from_samples(cls, imu) -> _ImuArrays:
        if not imu:
            return cls(np.zeros(0), np.zeros((0, 3)))
        return cls(np.array([s.t for s in imu]), np.array([s.accel for s in imu]))

    def mean_accel(self, t0: float, t1: float):
        m = (self.t >= t0 - 1e-9) & (self.t <= t1 + 1e-9)
        if not np.any(m):
            return None
        return self.accel[m].mean(axis=0)


def _gravity_measurement(imu: _ImuArrays, scan: ScanFrame, R_body: np.ndarray, acc_world: np.ndarray | None):
    # without an acceleration estimate the specific force is not a gravity measurement
    a = imu.mean_accel(scan.sweep_start, scan.sweep_end)
    if a is None or acc_world is None:
        return None
    a = a - R_body.T @ acc_world
    n = np.linalg.norm(a)
    return a / n if n > 1e-6 else None


def _world_accel(ends: list, times: list, span: int = 3):
    """Acceleration from end positions over two consecutive spans (None if too short)."""
    if len(ends) < 2 * span + 1:
        return None
    p2, p1, p0 = ends[-1].translation, ends[-1 - span].translation, ends[-1 - 2 * span].translation
    t2, t1, t0 = times[-1], times[-1 - span], times[-1 - 2 * span]
    v_now = (p2 - p1) / (t2 - t1)
    v_prev = (p1 - p0) / (t1 - t0)
    return (v_now - v_prev) / (0.5 * (t2 - t0))


def run_lidar_odometry(scans, imu, cfg: OdometryConfig | None = None):
    """Full pipeline. Returns ``(trajectory, map_cloud, keyframes)``.

    The trajectory holds body poses at sweep ends; the first pose has zero
    translation and yaw, with roll/pitch aligning measured gravity to +z.
    """
    cfg = cfg or OdometryConfig()
    scans = list(scans)
    if not scans:
        raise ValueError("no scans")
    imu_arr = _ImuArrays.from_samples(imu)
    times: list = []
    ends: list = []
    keyframes: list[LidarKeyframe] = []
    window = SlidingWindow(cfg.horizon_s)
    voxel_hint = None

    def fail(msg):
        traj = Trajectory(np.array(times), ends) if ends else None
        raise TrackingLostError(msg, traj, keyframes)

    # bootstrap from the first sweep
    first = scans[0]
    if len(imu_arr.t):
        try:
            g0, _ = estimate_gravity((imu_arr.t, imu_arr.accel), cfg.gravity_window_s, first.sweep_end)
        except ValueError:
            g0 = UP
    else:
        g0 = UP
    anchor = PoseSE3(gravity_alignment(g0))
    window.anchor = anchor
    local_map = None
    for k, scan in enumerate(scans):
        ds = adaptive_downsample(scan, cfg.target_points_per_scan, voxel_hint)
        voxel_hint = getattr(ds, "voxel", voxel_hint)
        start = window.anchor if not window.entries else window.entries[-1].end
        if window.entries:
            last_motion = window.starts()[-1].inverse() @ window.entries[-1].end
        else:
            last_motion = window.prev_motion
        if k == 0:
            end = anchor
        else:
            pred = start @ last_motion if last_motion is not None else start
            try:
                res = register_scan(
                    ds, local_map, pred, pose_start=start, prev_motion=last_motion,
                    motion_prior_weight=cfg.motion_prior_weight, gate=cfg.corr_gate,
                    max_iterations=cfg.register_iterations,
                )
            except TrackingLostError as e:
                fail(str(e))
            end = res.transform
        acc_w = _world_accel(ends + [end], times + [scan.sweep_end])
        grav = _gravity_measurement(imu_arr, scan, end.rotation.as_matrix(), acc_w)
        window.push(WindowEntry(ds, end, grav))
        if k > 0 and len(window.entries) >= 1 and local_map is not None:
            rep = window_refine(
                window, local_map, gravity_weight=cfg.gravity_weight,
                motion_prior_weight=cfg.motion_prior_weight, gate=cfg.corr_gate,
                max_iterations=cfg.window_iterations,
            )
            if not rep.singular:
                for e, p in zip(window.entries, rep.poses):
                    e.end = p
        # sync the trajectory with the (possibly refined) window
        n_win = len(window.entries)
        ends.append(window.entries[-1].end)
        times.append(scan.sweep_end)
        for j, e in enumerate(window.entries):
            ends[len(ends) - n_win + j] = e.end
        end = ends[-1]
        start = window.starts()[-1]
        world = deskew_scan(scan, start, end).points if k > 0 else end.apply(scan.points.points)
        last_kf = keyframes[-1] if keyframes else None
        if keyframe_decision(end, world if last_kf is None else deskew_points(ds.points.points, sweep_fraction(ds), start, end), last_kf, cfg):
            body_pts = end.inverse().apply(world)
            kf_pts = voxel_downsample(body_pts, cfg.keyframe_voxel)[0]
            if len(kf_pts) <= cfg.normal_k:
                fail(f"keyframe at t={scan.sweep_end:.3f}s has too few points")
            gdir = grav if grav is not None else end.rotation.inverse().apply(UP)
            ctx = np.concatenate([kf.world_points() for kf in keyframes[-2:]]) if keyframes else None
            normals = keyframe_normals(kf_pts, ctx, end, cfg)
            kf = LidarKeyframe(len(keyframes), end, PointCloud(kf_pts), gdir, scan.sweep_end, normals)
            keyframes.append(kf)
            extra = []
            if cfg.refine_map and len(keyframes) >= 2:
                extra = keyframe_map_refine(keyframes, kf.id, cfg).selected
            else:
                extra = overlapping_keyframes(keyframes, kf.id, cfg)
            local_map = _local_map(keyframes, extra, cfg)
    traj = Trajectory(np.array(times), ends)
    return traj, keyframe_map_cloud(keyframes, cfg.keyframe_voxel), keyframes
