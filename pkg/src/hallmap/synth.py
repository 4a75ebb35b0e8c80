"""Synthetic hall scenes and sensor simulation.

The scene is an axis-aligned shell (floor, ceiling, four walls) seen from the
inside plus solid axis-aligned boxes (pillars, partition walls, equipment).
Partition walls are thin boxes, so "finite planes" are boxes too. Ray casting
is analytic (slab test), which keeps every simulated measurement auditable.

Randomness is drawn from counter-based Philox generators keyed by
``(seed, stream, index)`` so every frame is reproducible on its own.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from hallmap.geometry import PoseSE3, Rotation, quats_to_matrices, se3_log
from hallmap.io import (
    ImuSample,
    PointCloud,
    ScanFrame,
    Trajectory,
    save_depth_png,
    save_imu,
    save_point_cloud,
    save_rig_calibration,
    save_trajectory,
    write_json,
)

log = logging.getLogger(__name__)

GRAVITY = 9.81
CAMERA_IDS = ("front", "left", "rear", "right")
CAMERA_YAWS = {"front": 0.0, "left": math.pi / 2, "rear": math.pi, "right": -math.pi / 2}

# optical frame (x right, y down, z forward) expressed in the robot frame (x fwd, y left, z up)
OPTICAL_IN_ROBOT = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])

# Philox stream identifiers
STREAM_LIDAR = 1
STREAM_IMU = 2
STREAM_CAMERA = 10
STREAM_DROPOUT = 20
STREAM_DRIFT = 30


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))


# ---------------------------------------------------------------------------
# scene


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    name: str = ""

    def contains(self, p, eps: float = 0.0) -> np.ndarray:
        p = np.atleast_2d(p)
        return np.all((p >= np.asarray(self.lo) - eps) & (p <= np.asarray(self.hi) + eps), axis=1)


@dataclass(frozen=True)
class SemiStaticObject:
    box: Box
    t0: float
    t1: float

    def present(self, t: float) -> bool:
        return self.t0 <= t <= self.t1


@dataclass
class HallModel:
    """Shell ``[shell_lo, shell_hi]`` plus solid obstacles and optional semi-static boxes."""

    shell_lo: np.ndarray
    shell_hi: np.ndarray
    boxes: list
    semistatic: list = field(default_factory=list)

    def __post_init__(self):
        self.shell_lo = np.asarray(self.shell_lo, dtype=float)
        self.shell_hi = np.asarray(self.shell_hi, dtype=float)

    def active_boxes(self, t: float | None = None) -> list:
        boxes = list(self.boxes)
        if t is not None:
            boxes += [o.box for o in self.semistatic if o.present(t)]
        return boxes

    def to_json(self) -> dict:
        return {
            "shell": {"lo": self.shell_lo.tolist(), "hi": self.shell_hi.tolist()},
            "boxes": [{"name": b.name, "lo": list(b.lo), "hi": list(b.hi)} for b in self.boxes],
            "semistatic": [
                {"name": o.box.name, "lo": list(o.box.lo), "hi": list(o.box.hi), "t0": o.t0, "t1": o.t1}
                for o in self.semistatic
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> HallModel:
        return cls(
            d["shell"]["lo"],
            d["shell"]["hi"],
            [Box(tuple(b["lo"]), tuple(b["hi"]), b.get("name", "")) for b in d["boxes"]],
            [SemiStaticObject(Box(tuple(o["lo"]), tuple(o["hi"]), o.get("name", "")), o["t0"], o["t1"]) for o in d.get("semistatic", [])],
        )

    # -- queries ----------------------------------------------------------

    def clearance_2d(self, xy) -> np.ndarray:
        """Horizontal distance from ``xy`` points to the nearest wall or obstacle footprint."""
        xy = np.atleast_2d(np.asarray(xy, dtype=float))[:, :2]
        lo, hi = self.shell_lo[:2], self.shell_hi[:2]
        d = np.minimum(xy - lo, hi - xy).min(axis=1)
        for b in self.boxes:
            blo, bhi = np.asarray(b.lo[:2]), np.asarray(b.hi[:2])
            outside = np.maximum(np.maximum(blo - xy, 0.0), xy - bhi)
            inside = np.all((xy > blo) & (xy < bhi), axis=1)
            db = np.where(inside, -np.minimum(xy - blo, bhi - xy).min(axis=1), np.linalg.norm(outside, axis=1))
            d = np.minimum(d, db)
        return d

    def distance_to_surface(self, points, t: float | None = None, chunk: int = 200_000) -> np.ndarray:
        """Exact unsigned distance from points to the scene surfaces (static, plus semi-static active at ``t``)."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        out = np.empty(len(pts))
        boxes = self.active_boxes(t)
        for s in range(0, len(pts), chunk):
            p = pts[s : s + chunk]
            out[s : s + chunk] = _dist_to_boxes(p, self.shell_lo, self.shell_hi, boxes)
        return out

    def raycast(self, origins, dirs, t: float | None = None, chunk: int = 20_000):
        """Distances along ``dirs`` to the first hit and the hit normal (facing the ray)."""
        return raycast_boxes(origins, dirs, self.shell_lo, self.shell_hi, self.active_boxes(t), chunk)


def _box_arrays(boxes):
    if not boxes:
        return np.zeros((0, 3)), np.zeros((0, 3))
    return np.array([b.lo for b in boxes], dtype=float), np.array([b.hi for b in boxes], dtype=float)


def _dist_to_boxes(p, shell_lo, shell_hi, boxes) -> np.ndarray:
    inside_shell = np.all((p >= shell_lo) & (p <= shell_hi), axis=1)
    d_in = np.minimum(p - shell_lo, shell_hi - p).min(axis=1)
    d_out = np.linalg.norm(np.maximum(np.maximum(shell_lo - p, 0.0), p - shell_hi), axis=1)
    d = np.where(inside_shell, d_in, d_out)
    lo, hi = _box_arrays(boxes)
    for k in range(len(lo)):
        outside = np.maximum(np.maximum(lo[k] - p, 0.0), p - hi[k])
        inside = np.all((p >= lo[k]) & (p <= hi[k]), axis=1)
        db = np.where(inside, np.minimum(p - lo[k], hi[k] - p).min(axis=1), np.linalg.norm(outside, axis=1))
        d = np.minimum(d, db)
    return d


def raycast_boxes(origins, dirs, shell_lo, shell_hi, boxes, chunk: int = 20_000):
    """Slab-test ray casting against the shell interior and solid boxes.

    Returns ``(t, normals)``; ``t`` is ``inf`` for rays that miss everything
    (only possible for origins outside the shell).
    """
    origins = np.asarray(origins, dtype=float).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    if len(origins) == 1 and len(dirs) > 1:
        origins = np.broadcast_to(origins, dirs.shape)
    n = len(dirs)
    t_out = np.empty(n)
    nrm_out = np.zeros((n, 3))
    lo, hi = _box_arrays(boxes)
    for s in range(0, n, chunk):
        o = origins[s : s + chunk]
        d = dirs[s : s + chunk]
        d_safe = np.where(d == 0.0, 1e-300, d)
        inv = 1.0 / d_safe
        m = len(d)
        # exit through the shell
        ta = (shell_lo - o) * inv
        tb = (shell_hi - o) * inv
        tmax = np.maximum(ta, tb)
        axis = np.argmin(tmax, axis=1)
        best = tmax[np.arange(m), axis]
        best_axis = axis
        if len(lo):
            t1 = (lo[None, :, :] - o[:, None, :]) * inv[:, None, :]
            t2 = (hi[None, :, :] - o[:, None, :]) * inv[:, None, :]
            tmin = np.minimum(t1, t2)
            tfar = np.maximum(t1, t2).min(axis=2)
            near_axis = np.argmax(tmin, axis=2)
            tnear = np.take_along_axis(tmin, near_axis[:, :, None], axis=2)[:, :, 0]
            hit = (tnear <= tfar) & (tnear > 1e-9)
            tnear = np.where(hit, tnear, np.inf)
            k = np.argmin(tnear, axis=1)
            tb_best = tnear[np.arange(m), k]
            use = tb_best < best
            best = np.where(use, tb_best, best)
            best_axis = np.where(use, near_axis[np.arange(m), k], best_axis)
        t_out[s : s + chunk] = best
        nrm = np.zeros((m, 3))
        nrm[np.arange(m), best_axis] = -np.sign(d[np.arange(m), best_axis])
        nrm_out[s : s + chunk] = nrm
    return t_out, nrm_out


def build_hall(seed: int = 0) -> HallModel:
    """Deterministic 40 x 40 x 8 m hall with a narrow corridor, pillars, equipment and an open centre."""
    rng = rng_for(seed, 0)
    shell_lo = np.array([-20.0, -20.0, 0.0])
    shell_hi = np.array([20.0, 20.0, 8.0])
    boxes = []
    # corridor along x in the south-west quadrant, clear width 1.4-1.8 m
    width = float(rng.uniform(1.4, 1.8))
    y0 = float(rng.uniform(-15.0, -13.0))
    x0, x1 = -17.0, float(rng.uniform(-9.0, -8.0))
    boxes.append(Box((x0, y0 - 0.3, 0.0), (x1, y0, 3.0), "corridor_wall_south"))
    boxes.append(Box((x0, y0 + width, 0.0), (x1, y0 + width + 0.3, 3.0), "corridor_wall_north"))
    # floor-to-ceiling pillars
    for i, (px, py) in enumerate([(-10.0, 10.0), (10.0, 10.0), (10.0, -10.0), (-10.0, 0.0)]):
        jx, jy = rng.uniform(-0.5, 0.5, 2)
        cx, cy = px + jx, py + jy
        boxes.append(Box((cx - 0.3, cy - 0.3, 0.0), (cx + 0.3, cy + 0.3, 8.0), f"pillar_{i}"))
    # equipment outside the open centre [-7, 7]^2 and away from the corridor
    n_equipment = int(rng.integers(0, 7))
    slots = [(-15.0, 12.0), (14.0, 15.0), (15.0, 2.0), (3.0, 15.0), (-14.0, -5.0), (4.0, -15.0), (15.0, -15.0)]
    for i in range(n_equipment):
        cx, cy = slots[i]
        sx, sy = rng.uniform(1.0, 3.0, 2)
        h = float(rng.uniform(1.0, 2.5))
        boxes.append(Box((cx - sx / 2, cy - sy / 2, 0.0), (cx + sx / 2, cy + sy / 2, h), f"equipment_{i}"))
    return HallModel(shell_lo, shell_hi, boxes)


def room(size: float = 10.0, height: float | None = None) -> HallModel:
    """Empty cube-like room centred on the origin in x/y (floor at z = -height/2)."""
    h = size if height is None else height
    return HallModel((-size / 2, -size / 2, -h / 2), (size / 2, size / 2, h / 2), [])


def furnished_room(size: float = 12.0, height: float = 4.0, seed: int = 0, n_boxes: int = 8, pillars=()) -> HallModel:
    """Room like ``room`` (floor at z = 0 here) with boxes of random size standing along the walls.

    ``pillars`` lists (x, y) centres of 0.4 m square floor-to-ceiling pillars.
    """
    rng = rng_for(seed, 3)
    half = size / 2
    boxes = []
    for i in range(n_boxes):
        side = i % 4
        along = float(rng.uniform(-half + 1.0, half - 1.0))
        w, d, h = rng.uniform(0.4, 1.2), rng.uniform(0.3, 0.8), rng.uniform(0.5, min(2.5, height - 0.2))
        lo = [along - w / 2, -half, 0.0]
        hi = [along + w / 2, -half + d, h]
        if side == 1:  # east wall
            lo, hi = [half - d, along - w / 2, 0.0], [half, along + w / 2, h]
        elif side == 2:  # north wall
            lo, hi = [along - w / 2, half - d, 0.0], [along + w / 2, half, h]
        elif side == 3:  # west wall
            lo, hi = [-half, along - w / 2, 0.0], [-half + d, along + w / 2, h]
        boxes.append(Box(tuple(map(float, lo)), tuple(map(float, hi)), f"box_{i}"))
    for i, (px, py) in enumerate(pillars):
        boxes.append(Box((px - 0.2, py - 0.2, 0.0), (px + 0.2, py + 0.2, height), f"pillar_{i}"))
    return HallModel((-half, -half, 0.0), (half, half, height), boxes)


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class _Segment:
    t0: float
    t1: float
    kind: str  # "move" | "turn" | "hold"
    p0: np.ndarray
    p1: np.ndarray
    yaw0: float
    yaw1: float
    vmax: float
    amax: float


def _trapezoid(dist: float, vmax: float, amax: float):
    """Duration and phase times of a rest-to-rest trapezoidal profile covering ``dist``."""
    t_acc = vmax / amax
    d_acc = 0.5 * amax * t_acc**2
    if 2 * d_acc >= dist:
        t_acc = math.sqrt(dist / amax)
        return 2 * t_acc, t_acc, 0.0, amax * t_acc
    t_cruise = (dist - 2 * d_acc) / vmax
    return 2 * t_acc + t_cruise, t_acc, t_cruise, vmax


def _profile(tau: np.ndarray, dist: float, vmax: float, amax: float):
    """Arc length, speed and acceleration along a trapezoidal profile at local times ``tau``."""
    T, ta, tc, vpk = _trapezoid(dist, vmax, amax)
    tau = np.clip(tau, 0.0, T)
    s = np.empty_like(tau)
    v = np.empty_like(tau)
    a = np.empty_like(tau)
    acc = tau < ta
    dec = tau > ta + tc
    cru = ~acc & ~dec
    s[acc] = 0.5 * amax * tau[acc] ** 2
    v[acc] = amax * tau[acc]
    a[acc] = amax
    d_a = 0.5 * amax * ta**2
    s[cru] = d_a + vpk * (tau[cru] - ta)
    v[cru] = vpk
    a[cru] = 0.0
    r = T - tau[dec]
    s[dec] = dist - 0.5 * amax * r**2
    v[dec] = amax * r
    a[dec] = -amax
    return s, v, a


class SimTrajectory:
    """Continuous robot pose: piecewise-linear path, trapezoidal speed, in-place turns.

    Calling the object with a time returns the body pose (x forward, z up).
    """

    def __init__(self, segments: list, height: float):
        self.segments = segments
        self.height = height
        self._starts = np.array([s.t0 for s in segments])

    @property
    def duration(self) -> float:
        return self.segments[-1].t1

    def _eval(self, ts):
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        idx = np.clip(np.searchsorted(self._starts, ts, side="right") - 1, 0, len(self.segments) - 1)
        pos = np.empty((len(ts), 3))
        yaw = np.empty(len(ts))
        vel = np.zeros((len(ts), 3))
        acc = np.zeros((len(ts), 3))
        yaw_rate = np.zeros(len(ts))
        for k in np.unique(idx):
            seg = self.segments[k]
            m = idx == k
            tau = ts[m] - seg.t0
            if seg.kind == "move":
                dvec = seg.p1 - seg.p0
                dist = float(np.linalg.norm(dvec))
                u = dvec / dist
                s, v, a = _profile(tau, dist, seg.vmax, seg.amax)
                pos[m] = seg.p0 + s[:, None] * u
                vel[m] = v[:, None] * u
                acc[m] = a[:, None] * u
                yaw[m] = seg.yaw0
            elif seg.kind == "turn":
                dyaw = seg.yaw1 - seg.yaw0
                s, v, a = _profile(tau, abs(dyaw), seg.vmax, seg.amax)
                pos[m] = seg.p0
                yaw[m] = seg.yaw0 + math.copysign(1.0, dyaw) * s
                yaw_rate[m] = math.copysign(1.0, dyaw) * v
            else:
                pos[m] = seg.p0
                yaw[m] = seg.yaw0
        pos[:, 2] = self.height
        return pos, yaw, vel, acc, yaw_rate

    def __call__(self, t: float) -> PoseSE3:
        pos, yaw, *_ = self._eval(t)
        return PoseSE3(Rotation.rot_z(float(yaw[0])), pos[0])

    def poses(self, ts):
        """Rotation matrices ``(N, 3, 3)`` and positions ``(N, 3)`` at times ``ts``."""
        pos, yaw, *_ = self._eval(ts)
        c, s = np.cos(yaw), np.sin(yaw)
        R = np.zeros((len(yaw), 3, 3))
        R[:, 0, 0], R[:, 0, 1], R[:, 1, 0], R[:, 1, 1], R[:, 2, 2] = c, -s, s, c, 1.0
        return R, pos

    def kinematics(self, ts):
        """World velocity, world acceleration and yaw rate at ``ts``."""
        _, _, vel, acc, yaw_rate = self._eval(ts)
        return vel, acc, yaw_rate

    def sampled(self, rate: float) -> Trajectory:
        ts = np.arange(0.0, self.duration + 1e-9, 1.0 / rate)
        return Trajectory(ts, [self(t) for t in ts])


def _wrap(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


def sample_trajectory(
    hall: HallModel,
    waypoints,
    speed: float = 1.0,
    accel: float = 0.5,
    yaw_rate: float = 0.8,
    yaw_accel: float = 1.0,
    height: float = 0.5,
    clearance: float = 0.4,
    final_yaw: float | None = None,
    hold: float = 0.0,
) -> SimTrajectory:
    """Drive through ``waypoints`` (x, y) stopping and turning in place at each one.

    The robot starts facing the first leg. A closed loop (last waypoint equal to
    the first) ends with a turn back to the starting heading so the final pose
    equals the initial pose. ``final_yaw`` overrides that final heading.
    """
    wp = np.asarray(waypoints, dtype=float)[:, :2]
    if len(wp) < 2:
        raise ValueError("need at least two waypoints")
    cl = hall.clearance_2d(wp)
    if np.any(cl < clearance):
        i = int(np.argmin(cl))
        raise ValueError(f"waypoint {i} {wp[i].tolist()} lies within {clearance} m of an obstacle (clearance {cl[i]:.3f} m)")
    segs: list[_Segment] = []
    t = 0.0
    yaw = math.atan2(*(wp[1] - wp[0])[::-1])
    yaw0 = yaw
    if hold > 0:
        p = np.array([wp[0][0], wp[0][1], height])
        segs.append(_Segment(t, t + hold, "hold", p, p, yaw, yaw, 0, 0))
        t += hold
    for k in range(len(wp) - 1):
        a = np.array([wp[k][0], wp[k][1], height])
        b = np.array([wp[k + 1][0], wp[k + 1][1], height])
        dist = float(np.linalg.norm(b - a))
        if dist < 1e-9:
            continue
        heading = math.atan2(b[1] - a[1], b[0] - a[0])
        dyaw = _wrap(heading - yaw)
        if abs(dyaw) > 1e-9:
            T = _trapezoid(abs(dyaw), yaw_rate, yaw_accel)[0]
            segs.append(_Segment(t, t + T, "turn", a, a, yaw, yaw + dyaw, yaw_rate, yaw_accel))
            t += T
            yaw = yaw + dyaw
        n_check = max(2, int(dist / 0.05) + 1)
        line = a[None, :2] + np.linspace(0, 1, n_check)[:, None] * (b - a)[None, :2]
        if np.any(hall.clearance_2d(line) < clearance):
            raise ValueError(f"leg {k} passes within {clearance} m of an obstacle")
        T = _trapezoid(dist, speed, accel)[0]
        segs.append(_Segment(t, t + T, "move", a, b, yaw, yaw, speed, accel))
        t += T
    closed = np.allclose(wp[0], wp[-1])
    target = final_yaw if final_yaw is not None else (yaw0 if closed else None)
    if target is not None:
        dyaw = _wrap(target - yaw)
        end = np.array([wp[-1][0], wp[-1][1], height])
        if abs(dyaw) > 1e-9:
            T = _trapezoid(abs(dyaw), yaw_rate, yaw_accel)[0]
            segs.append(_Segment(t, t + T, "turn", end, end, yaw, yaw + dyaw, yaw_rate, yaw_accel))
            t += T
    if hold > 0:
        end = segs[-1].p1.copy()
        y = segs[-1].yaw1
        segs.append(_Segment(t, t + hold, "hold", end, end, y, y, 0, 0))
    return SimTrajectory(segs, height)


# ---------------------------------------------------------------------------
# sensors


@dataclass(frozen=True)
class SensorSpec:
    lidar_rings: int = 32
    lidar_vfov_deg: float = 90.0
    lidar_elev_min_deg: float = -11.25
    lidar_azimuth_steps: int = 1800
    lidar_max_range: float = 100.0
    lidar_range_noise: float = 0.02
    lidar_sweep: float = 0.1
    lidar_offset: tuple = (0.0, 0.0, 0.0)  # lidar frame == body frame
    cam_width: int = 640
    cam_height: int = 360
    cam_hfov_deg: float = 100.0
    cam_baseline: float = 0.12
    cam_disparity_noise: float = 0.25
    cam_max_range: float = 20.0
    cam_grazing_deg: float = 80.0
    cam_grazing_dropout: float = 0.5
    cam_mount_radius: float = 0.15
    cam_mount_height: float = 0.8
    imu_rate: float = 200.0
    imu_accel_noise_density: float = 0.005  # m/s^2/sqrt(Hz)
    imu_gyro_noise_density: float = 0.0005  # rad/s/sqrt(Hz)

    def __post_init__(self):
        for name in ("lidar_rings", "lidar_azimuth_steps", "lidar_max_range", "lidar_sweep", "cam_width", "cam_height",
                     "cam_hfov_deg", "cam_baseline", "cam_max_range", "imu_rate"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lidar_range_noise", "cam_disparity_noise", "imu_accel_noise_density", "imu_gyro_noise_density"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def focal(self) -> float:
        return (self.cam_width / 2.0) / math.tan(math.radians(self.cam_hfov_deg) / 2.0)

    @property
    def intrinsics(self) -> dict:
        return {
            "fx": self.focal,
            "fy": self.focal,
            "cx": (self.cam_width - 1) / 2.0,
            "cy": (self.cam_height - 1) / 2.0,
            "width": self.cam_width,
            "height": self.cam_height,
        }

    def ring_elevations(self) -> np.ndarray:
        step = self.lidar_vfov_deg / self.lidar_rings
        return np.radians(self.lidar_elev_min_deg + step * np.arange(self.lidar_rings))

    def camera_in_robot(self, cam: str) -> PoseSE3:
        """Camera optical frame in the robot body frame."""
        yaw = CAMERA_YAWS[cam]
        R = Rotation.rot_z(yaw).as_matrix() @ OPTICAL_IN_ROBOT
        r = self.cam_mount_radius
        return PoseSE3(Rotation.from_matrix(R), (r * math.cos(yaw), r * math.sin(yaw), self.cam_mount_height))

    def rig(self) -> dict:
        """Camera-to-body extrinsics with the front camera as body frame."""
        front_inv = self.camera_in_robot("front").inverse()
        rig = {c: front_inv @ self.camera_in_robot(c) for c in CAMERA_IDS}
        rig["front"] = PoseSE3.identity()
        return rig


def stereo_depth_sigma(z, focal: float, baseline: float, disparity_sigma: float):
    """Depth standard deviation of a stereo pair: ``z^2 * sigma_d / (f * b)``."""
    return np.asarray(z, dtype=float) ** 2 * disparity_sigma / (focal * baseline)


def _pose_arrays(pose_fn, ts):
    if hasattr(pose_fn, "poses"):
        return pose_fn.poses(ts)
    Rs, ps = [], []
    for t in ts:
        p = pose_fn(float(t))
        Rs.append(p.rotation.as_matrix())
        ps.append(p.translation)
    return np.array(Rs), np.array(ps)


def simulate_lidar(hall: HallModel, pose_fn, spec: SensorSpec, t_sweep: float, seed: int = 0, index: int = 0) -> ScanFrame:
    """One sweep starting at ``t_sweep``; each azimuth column uses the pose at its own timestamp."""
    n_az = spec.lidar_azimuth_steps
    col_t = t_sweep + spec.lidar_sweep * np.arange(n_az) / n_az
    R, p = _pose_arrays(pose_fn, col_t)
    offset = np.asarray(spec.lidar_offset, dtype=float)
    az = 2 * math.pi * np.arange(n_az) / n_az
    el = spec.ring_elevations()
    ce, se = np.cos(el), np.sin(el)
    # local directions (az, ring)
    d_local = np.stack(
        [np.cos(az)[:, None] * ce[None, :], np.sin(az)[:, None] * ce[None, :], np.broadcast_to(se[None, :], (n_az, len(el)))],
        axis=-1,
    )
    d_world = np.einsum("aij,arj->ari", R, d_local).reshape(-1, 3)
    origin = (p + np.einsum("aij,j->ai", R, offset))
    o_world = np.repeat(origin, len(el), axis=0)
    # semi-static presence evaluated at sweep start
    rng_t, _ = hall.raycast(o_world, d_world, t=t_sweep)
    ranges = rng_t
    if spec.lidar_range_noise > 0:
        ranges = ranges + rng_for(seed, STREAM_LIDAR, index).normal(0.0, spec.lidar_range_noise, len(ranges))
    keep = np.isfinite(rng_t) & (rng_t <= spec.lidar_max_range) & (ranges > 0)
    pts = (d_local.reshape(-1, 3) * ranges[:, None] + offset)[keep]
    times = np.repeat(col_t, len(el))[keep]
    return ScanFrame(PointCloud(pts, times=times), t_sweep, t_sweep + spec.lidar_sweep)


def camera_rays(intr: dict, stride: int = 1):
    """Pixel grid and unnormalized optical-frame rays ``((u - cx)/f, (v - cy)/f, 1)``."""
    u = np.arange(0, intr["width"], stride, dtype=float)
    v = np.arange(0, intr["height"], stride, dtype=float)
    uu, vv = np.meshgrid(u, v)
    rays = np.stack([(uu - intr["cx"]) / intr["fx"], (vv - intr["cy"]) / intr["fy"], np.ones_like(uu)], axis=-1)
    return uu, vv, rays


def simulate_depth_camera(
    hall: HallModel, pose_fn, spec: SensorSpec, t: float, cameras=CAMERA_IDS, seed: int = 0, index: int = 0
) -> dict:
    """Depth maps (meters along the optical axis, 0 = invalid) of each camera at time ``t``."""
    body = pose_fn(t)
    intr = spec.intrinsics
    _, _, rays = camera_rays(intr)
    flat = rays.reshape(-1, 3)
    out = {}
    for ci, cam in enumerate(cameras):
        cam_world = body @ spec.camera_in_robot(cam)
        d_world = cam_world.rotation.apply(flat)
        tdist, normals = hall.raycast(cam_world.translation[None, :], d_world, t=t)
        depth = tdist.copy()  # ray z-component is 1, so the ray parameter is the depth
        gen = rng_for(seed, STREAM_CAMERA + ci, index)
        if spec.cam_disparity_noise > 0:
            sigma = stereo_depth_sigma(depth, spec.focal, spec.cam_baseline, spec.cam_disparity_noise)
            depth = depth + gen.normal(0.0, 1.0, len(depth)) * np.where(np.isfinite(sigma), sigma, 0.0)
        cos_inc = np.abs(np.einsum("ij,ij->i", normals, d_world)) / np.linalg.norm(d_world, axis=1)
        grazing = cos_inc < math.cos(math.radians(spec.cam_grazing_deg))
        drop = grazing & (gen.random(len(depth)) < spec.cam_grazing_dropout)
        invalid = ~np.isfinite(tdist) | (tdist > spec.cam_max_range) | (depth <= 0) | drop
        depth[invalid] = 0.0
        out[cam] = depth.reshape(rays.shape[:2])
    return out


def mean_flow(hall: HallModel, pose_fn, spec: SensorSpec, cam: str, t_prev: float, t: float, grid=(16, 9)) -> float:
    """Mean pixel displacement of a sparse grid of scene points between two frames."""
    intr = spec.intrinsics
    us = np.linspace(0.1, 0.9, grid[0]) * intr["width"]
    vs = np.linspace(0.1, 0.9, grid[1]) * intr["height"]
    uu, vv = np.meshgrid(us, vs)
    rays = np.stack([(uu - intr["cx"]) / intr["fx"], (vv - intr["cy"]) / intr["fy"], np.ones_like(uu)], -1).reshape(-1, 3)
    c0 = pose_fn(t_prev) @ spec.camera_in_robot(cam)
    c1 = pose_fn(t) @ spec.camera_in_robot(cam)
    tdist, _ = hall.raycast(c0.translation[None, :], c0.rotation.apply(rays), t=t_prev)
    ok = np.isfinite(tdist)
    pw = c0.apply(rays[ok] * tdist[ok, None])
    pc = c1.inverse().apply(pw)
    front = pc[:, 2] > 0.05
    if not np.any(front):
        return 0.0
    u1 = intr["fx"] * pc[front, 0] / pc[front, 2] + intr["cx"]
    v1 = intr["fy"] * pc[front, 1] / pc[front, 2] + intr["cy"]
    return float(np.mean(np.hypot(u1 - uu.reshape(-1)[ok][front], v1 - vv.reshape(-1)[ok][front])))


def simulate_imu(pose_fn, rate: float = 200.0, noise=(0.0, 0.0), t0: float = 0.0, t1: float | None = None,
                 seed: int = 0, h: float = 1e-3) -> list[ImuSample]:
    """Accelerometer (specific force) and gyroscope samples from numerical derivatives of ``pose_fn``.

    ``noise`` is ``(accel_sigma, gyro_sigma)`` per sample. ``t1`` defaults to
    ``pose_fn.duration``.
    """
    if t1 is None:
        t1 = pose_fn.duration
    ts = np.arange(t0, t1 + 1e-9, 1.0 / rate)
    g = np.array([0.0, 0.0, GRAVITY])
    gen = rng_for(seed, STREAM_IMU)
    acc_noise = gen.normal(0.0, noise[0], (len(ts), 3)) if noise[0] > 0 else np.zeros((len(ts), 3))
    gyr_noise = gen.normal(0.0, noise[1], (len(ts), 3)) if noise[1] > 0 else np.zeros((len(ts), 3))
    out = []
    for k, t in enumerate(ts):
        pm, p0, pp = pose_fn(t - h), pose_fn(t), pose_fn(t + h)
        a_world = (pp.translation - 2 * p0.translation + pm.translation) / (h * h)
        R = p0.rotation.as_matrix()
        accel = R.T @ (a_world + g)
        rel = PoseSE3(pm.rotation.inverse() * pp.rotation)
        gyro = se3_log(rel)[:3] / (2 * h)
        out.append(ImuSample(float(t), accel + acc_noise[k], gyro + gyr_noise[k]))
    return out


def imu_noise_sigmas(spec: SensorSpec) -> tuple[float, float]:
    root = math.sqrt(spec.imu_rate)
    return spec.imu_accel_noise_density * root, spec.imu_gyro_noise_density * root


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Scenario:
    hall: HallModel
    trajectory: SimTrajectory
    spec: SensorSpec = field(default_factory=SensorSpec)
    seed: int = 0


def inject_semistatic(dataset, objects):
    """Add semi-static boxes to a Scenario or HallModel (returns a new object)."""
    hall = dataset.hall if isinstance(dataset, Scenario) else dataset
    objects = list(objects)
    for o in objects:
        if o.t1 < o.t0:
            continue
        lo, hi = np.asarray(o.box.lo), np.asarray(o.box.hi)
        if np.any(lo < hall.shell_lo) or np.any(hi > hall.shell_hi):
            raise ValueError(f"semi-static object {o.box.name!r} lies outside the hall")
        for b in hall.boxes:
            if np.all(lo < np.asarray(b.hi)) and np.all(hi > np.asarray(b.lo)):
                warnings.warn(f"semi-static object {o.box.name!r} overlaps static geometry {b.name!r}", stacklevel=2)
    kept = [o for o in objects if o.t1 >= o.t0]
    new_hall = replace(hall, semistatic=list(hall.semistatic) + kept)
    if isinstance(dataset, Scenario):
        return replace(dataset, hall=new_hall)
    return new_hall


def _face_grid(lo, hi, axis: int, value: float, spacing: float) -> np.ndarray:
    a, b = [k for k in range(3) if k != axis]
    na = max(1, int(round((hi[a] - lo[a]) / spacing)))
    nb = max(1, int(round((hi[b] - lo[b]) / spacing)))
    ga = lo[a] + (np.arange(na) + 0.5) * (hi[a] - lo[a]) / na
    gb = lo[b] + (np.arange(nb) + 0.5) * (hi[b] - lo[b]) / nb
    A, B = np.meshgrid(ga, gb, indexing="ij")
    pts = np.empty((A.size, 3))
    pts[:, axis] = value
    pts[:, a] = A.ravel()
    pts[:, b] = B.ravel()
    return pts


def surface_cloud(hall: HallModel, spacing: float = 0.01) -> PointCloud:
    """Grid samples of every visible static surface (points lie exactly on faces)."""
    chunks = []
    lo, hi = hall.shell_lo, hall.shell_hi
    boxes = hall.boxes
    for axis in range(3):
        for value in (lo[axis], hi[axis]):
            pts = _face_grid(lo, hi, axis, value, spacing)
            hidden = np.zeros(len(pts), dtype=bool)
            for b in boxes:
                hidden |= b.contains(pts, eps=1e-9)
            chunks.append(pts[~hidden])
    for i, b in enumerate(boxes):
        blo, bhi = np.asarray(b.lo, dtype=float), np.asarray(b.hi, dtype=float)
        for axis in range(3):
            for value in (blo[axis], bhi[axis]):
                if value <= lo[axis] + 1e-9 or value >= hi[axis] - 1e-9:
                    continue  # face flush with the shell
                pts = _face_grid(blo, bhi, axis, value, spacing)
                hidden = np.zeros(len(pts), dtype=bool)
                for j, c in enumerate(boxes):
                    if j != i:
                        hidden |= c.contains(pts, eps=1e-9)
                chunks.append(pts[~hidden])
    return PointCloud(np.concatenate(chunks))


@dataclass
class StreamDrift:
    """Visual-odometry style error injected into per-camera stream trajectories."""

    yaw_rate: float = 0.0  # rad of heading error per meter travelled
    yaw_noise: float = 0.0  # rad per frame, random walk
    scale: float = 1.0

    def __post_init__(self):
        if self.yaw_noise < 0:
            raise ValueError("yaw_noise must be non-negative")
        if self.scale <= 0:
            raise ValueError("scale must be positive")


def drifted_stream(cam_poses: list, drift: StreamDrift, seed: int = 0, stream: int = 0) -> list:
    """Camera poses re-integrated from relative motions with heading drift, in the stream's own frame.

    The stream frame is the first camera pose (first output pose is the identity).
    Translations are multiplied by ``drift.scale``.
    """
    gen = rng_for(seed, STREAM_DRIFT, stream)
    out = [PoseSE3.identity()]
    cur = PoseSE3.identity()
    up = np.array([0.0, -1.0, 0.0])  # optical frame "up" for a level camera
    for k in range(1, len(cam_poses)):
        rel = cam_poses[k - 1].inverse() @ cam_poses[k]
        dist = float(np.linalg.norm(rel.translation))
        dpsi = drift.yaw_rate * dist + (gen.normal(0.0, drift.yaw_noise) if drift.yaw_noise > 0 else 0.0)
        cur = cur @ PoseSE3(Rotation.about_axis(up, dpsi)) @ rel
        out.append(cur)
    if drift.scale != 1.0:
        out = [PoseSE3(p.rotation, drift.scale * p.translation) for p in out]
    return out


@dataclass
class EmitOptions:
    lidar_rate: float = 10.0
    camera_rate: float = 5.0
    surface_spacing: float = 0.01
    drift: StreamDrift = field(default_factory=StreamDrift)
    cameras: tuple = CAMERA_IDS
    lidar: bool = True
    depth: bool = True

    def __post_init__(self):
        for name in ("lidar_rate", "camera_rate", "surface_spacing"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        self.cameras = tuple(self.cameras)
        unknown = [c for c in self.cameras if c not in CAMERA_IDS]
        if unknown:
            raise ValueError(f"unknown camera ids {unknown}; expected a subset of {list(CAMERA_IDS)}")
        if self.cameras and "front" not in self.cameras:
            raise ValueError("the front camera defines the rig body frame and must be emitted")


def emit_dataset(hall: HallModel, trajectory: SimTrajectory, spec: SensorSpec, seed: int, out_dir, options: EmitOptions | None = None) -> Path:
    """Write a complete simulated dataset plus ground truth under ``out_dir``.

    Layout::

        index.json                      streams, units, frames
        rig.json                        camera-to-body extrinsics (body = front camera)
        imu.csv                         t,ax,ay,az,gx,gy,gz
        lidar/index.json, lidar/scan_NNNNNN.ply
        cameras/<cam>/index.json        intrinsics + frames (t, depth file, mean flow)
        cameras/<cam>/depth/NNNNNN.png  16-bit millimeters
        cameras/<cam>/trajectory.txt    stream trajectory in the stream's own frame (TUM)
        ground_truth/trajectory.txt     robot body poses (TUM)
        ground_truth/camera_<cam>.txt   true camera poses in the world (TUM)
        ground_truth/surface.ply        static surface samples
        ground_truth/hall.json          scene description
    """
    options = options or EmitOptions()
    out = Path(out_dir)
    (out / "lidar").mkdir(parents=True, exist_ok=True)
    (out / "ground_truth").mkdir(parents=True, exist_ok=True)
    duration = trajectory.duration
    index = {
        "format": "hallmap-dataset",
        "version": 1,
        "seed": int(seed),
        "duration": duration,
        "units": {"length": "m", "time": "s", "angle": "rad", "depth_png": "mm", "accel": "m/s^2", "gyro": "rad/s"},
        "frames": {
            "world": "ground-truth hall frame, z up",
            "body": "robot base: x forward, y left, z up; LiDAR frame coincides with it",
            "camera": "optical: x right, y down, z forward",
            "rig_body": "front camera optical frame",
        },
        "lidar": "lidar/index.json",
        "imu": "imu.csv",
        "rig": "rig.json",
        "cameras": {},
        "ground_truth": {
            "trajectory": "ground_truth/trajectory.txt",
            "surface": "ground_truth/surface.ply",
            "hall": "ground_truth/hall.json",
            "cameras": {},
        },
    }
    save_rig_calibration(out / "rig.json", spec.rig())
    save_imu(out / "imu.csv", simulate_imu(trajectory, spec.imu_rate, imu_noise_sigmas(spec), seed=seed))
    write_json(out / "ground_truth" / "hall.json", hall.to_json())
    save_trajectory(out / "ground_truth" / "trajectory.txt", trajectory.sampled(options.lidar_rate))
    save_point_cloud(out / "ground_truth" / "surface.ply", surface_cloud(hall, options.surface_spacing))

    scans = []
    if options.lidar:
        n_scans = int(math.floor(duration / (1.0 / options.lidar_rate) + 1e-9))
        for k in range(n_scans):
            t0 = k / options.lidar_rate
            if t0 + spec.lidar_sweep > duration + 1e-9:
                break
            scan = simulate_lidar(hall, trajectory, spec, t0, seed=seed, index=k)
            name = f"scan_{k:06d}.ply"
            save_point_cloud(out / "lidar" / name, scan.points)
            scans.append({"file": name, "sweep_start": scan.sweep_start, "sweep_end": scan.sweep_end})
    write_json(out / "lidar" / "index.json", {"frame": "body at each point's timestamp", "scans": scans})

    frame_ts = np.arange(0.0, duration + 1e-9, 1.0 / options.camera_rate)
    for ci, cam in enumerate(options.cameras):
        cdir = out / "cameras" / cam
        (cdir / "depth").mkdir(parents=True, exist_ok=True)
        cam_poses = [trajectory(t) @ spec.camera_in_robot(cam) for t in frame_ts]
        frames = []
        for k, t in enumerate(frame_ts):
            entry = {"t": float(t), "flow_px": 0.0 if k == 0 else mean_flow(hall, trajectory, spec, cam, frame_ts[k - 1], t)}
            if options.depth:
                depth = simulate_depth_camera(hall, trajectory, spec, t, cameras=(cam,), seed=seed, index=k * 8 + ci)[cam]
                name = f"depth/{k:06d}.png"
                save_depth_png(cdir / name, depth)
                entry["depth"] = name
            frames.append(entry)
        stream = drifted_stream(cam_poses, options.drift, seed=seed, stream=ci)
        save_trajectory(cdir / "trajectory.txt", Trajectory(frame_ts, stream))
        save_trajectory(out / "ground_truth" / f"camera_{cam}.txt", Trajectory(frame_ts, cam_poses))
        write_json(cdir / "index.json", {"camera_id": cam, "intrinsics": spec.intrinsics, "trajectory": "trajectory.txt", "frames": frames})
        index["cameras"][cam] = f"cameras/{cam}/index.json"
        index["ground_truth"]["cameras"][cam] = f"ground_truth/camera_{cam}.txt"
    write_json(out / "index.json", index)
    return out
