"""Command line entry points: one subcommand per pipeline stage.

Every command takes an optional JSON ``--config`` (see ``PipelineConfig``),
writes its artifacts plus a ``manifest.json`` into ``--out``, exits 0 on
success, 2 on a bad command line or configuration and 1 on any other failure.
Failures are reported on stderr as one JSON object naming the module and stage.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

import hallmap
from hallmap import synth
from hallmap.evaluation import ColorRamp, EvalReport, comparison_table, evaluate, fine_align, fine_align_config, load_boxes
from hallmap.geometry import PoseSE3, Rotation, Sim3Transform
from hallmap.io import (
    PointCloud,
    ScanFrame,
    Trajectory,
    load_imu,
    load_trajectory,
    load_point_cloud,
    read_json,
    save_point_cloud,
    save_trajectory,
    write_json,
)
from hallmap.odometry import OdometryConfig, TrackingLostError, keyframe_map_cloud, run_lidar_odometry
from hallmap.registration import IcpConfig, voxel_downsample
from hallmap.rigfusion import RigFusionConfig, correct_global_scale, load_streams, run_rig_fusion

log = logging.getLogger(__name__)

EXIT_FAILURE = 1
EXIT_USAGE = 2
DEFAULT_LOOP = ((-5.0, -4.0), (5.0, -4.0), (5.0, 4.0), (-5.0, 4.0), (-5.0, -4.0))


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


# ---------------------------------------------------------------------------
# configuration


@dataclass
class EmitSettings:
    lidar_rate: float = 10.0  # Hz
    camera_rate: float = 5.0  # Hz
    surface_spacing: float = 0.05  # m, ground-truth surface sampling
    cameras: tuple = synth.CAMERA_IDS
    lidar: bool = True
    depth: bool = True

    def __post_init__(self):
        synth.EmitOptions(self.lidar_rate, self.camera_rate, self.surface_spacing, cameras=self.cameras)


@dataclass
class SemiStaticSettings:
    min: tuple
    max: tuple
    t0: float
    t1: float
    name: str = "semistatic"

    def __post_init__(self):
        if len(self.min) != 3 or len(self.max) != 3 or any(a >= b for a, b in zip(self.min, self.max)):
            raise ValueError("min and max must be 3-vectors with min < max")
        if self.t1 < self.t0:
            raise ValueError("t1 must not precede t0")


@dataclass
class SynthConfig:
    scene: str = "hall"  # "hall" (40 x 40 x 8 m, obstacles drawn from the seed) or "room"
    room_size: float = 12.0  # m, "room" scene only
    room_height: float = 4.0  # m
    waypoints: tuple = DEFAULT_LOOP  # (x, y) in m
    speed: float = 1.0  # m/s
    yaw_rate: float = 0.8  # rad/s
    hold: float = 0.0  # s stationary before driving
    height: float = 0.5  # m, LiDAR height above floor in the hall frame
    sensor: synth.SensorSpec = field(default_factory=synth.SensorSpec)
    emit: EmitSettings = field(default_factory=EmitSettings)
    drift: synth.StreamDrift = field(default_factory=synth.StreamDrift)
    semistatic: tuple = ()  # SemiStaticSettings entries

    def __post_init__(self):
        if self.scene not in ("hall", "room"):
            raise ValueError(f"unknown scene {self.scene!r}; expected 'hall' or 'room'")
        for name in ("room_size", "room_height", "speed", "yaw_rate"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.hold < 0:
            raise ValueError("hold must be non-negative")
        if len(self.waypoints) < 2:
            raise ValueError("need at least two waypoints")

    def build(self, seed: int):
        hall = synth.build_hall(seed) if self.scene == "hall" else synth.room(self.room_size, self.room_height)
        objs = [synth.SemiStaticObject(synth.Box(s.min, s.max, s.name), s.t0, s.t1) for s in self.semistatic]
        if objs:
            hall = synth.inject_semistatic(hall, objs)
        z = self.height + (hall.shell_lo[2] if self.scene == "room" else 0.0)
        traj = synth.sample_trajectory(hall, self.waypoints, speed=self.speed, yaw_rate=self.yaw_rate, height=z,
                                       hold=self.hold)
        return hall, traj


@dataclass
class EvalSettings:
    boxes: tuple = ()  # exclusion boxes, {"min": [...], "max": [...]}
    scale_correction: bool = False
    symmetric: bool = False
    color_d_max: float = 0.30  # m, distance mapped to red
    map_voxel: float = 0.0  # m, downsample the map before evaluation (0 = off)
    label: str = ""
    icp: IcpConfig = field(default_factory=fine_align_config)

    def __post_init__(self):
        load_boxes(self.boxes)
        ColorRamp(self.color_d_max)
        if self.map_voxel < 0:
            raise ValueError("map_voxel must be non-negative")


@dataclass
class PipelineConfig:
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    lidar_odometry: OdometryConfig = field(default_factory=OdometryConfig)
    rig_fusion: RigFusionConfig = field(default_factory=RigFusionConfig)
    evaluation: EvalSettings = field(default_factory=EvalSettings)

    def __post_init__(self):
        if not 0 <= self.seed < 2**63:
            raise ValueError("seed must be a non-negative 64-bit integer")

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        return _build(cls, d, "")

    @classmethod
    def load(cls, path) -> PipelineConfig:
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError("<file>", f"{path} is not valid JSON: {e}") from None
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return _plain(self)

    def sha256(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()


_NESTED = {
    (SynthConfig, "sensor"): synth.SensorSpec,
    (SynthConfig, "emit"): EmitSettings,
    (SynthConfig, "drift"): synth.StreamDrift,
    (EvalSettings, "icp"): IcpConfig,
    (PipelineConfig, "synth"): SynthConfig,
    (PipelineConfig, "lidar_odometry"): OdometryConfig,
    (PipelineConfig, "rig_fusion"): RigFusionConfig,
    (PipelineConfig, "evaluation"): EvalSettings,
}


def _check_type(key: str, default, value):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
    elif isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not np.isfinite(value):
            raise ConfigError(key, f"expected a finite number, got {value!r}")
        return float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
    return value


def _tuples(v):
    return tuple(_tuples(x) for x in v) if isinstance(v, list) else v


def _build(cls, d, prefix: str):
    """Instantiate the config dataclass ``cls`` from ``d``, rejecting unknown keys."""
    where = prefix.rstrip(".") or "<root>"
    if not isinstance(d, dict):
        raise ConfigError(where, "expected a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for k in d:
        if k not in fields:
            raise ConfigError(prefix + k, f"unknown key; allowed: {sorted(fields)}")
    defaults = cls() if cls not in (SemiStaticSettings,) else None
    kw = {}
    for k, v in d.items():
        key = prefix + k
        sub = _NESTED.get((cls, k))
        if sub is not None:
            kw[k] = _build(sub, v, key + ".")
        elif cls is SynthConfig and k == "semistatic":
            if not isinstance(v, list):
                raise ConfigError(key, "expected a list of objects")
            kw[k] = tuple(_build(SemiStaticSettings, o, f"{key}[{i}].") for i, o in enumerate(v))
        elif defaults is not None:
            kw[k] = _tuples(_check_type(key, getattr(defaults, k), v))
        else:
            kw[k] = _tuples(v)
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(where, str(e)) from None


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(x) for x in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# manifests and error reporting


class StageError(RuntimeError):
    def __init__(self, module: str, stage: str, cause: BaseException):
        super().__init__(f"{module}/{stage}: {cause}")
        self.module, self.stage, self.cause = module, stage, cause


@contextmanager
def stage(module: str, name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(module, name, e) from e


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_sha256(path) -> str:
    """Hash of a file, or of every file below a directory (relative names included)."""
    p = Path(path)
    if p.is_file():
        return file_sha256(p)
    h = hashlib.sha256()
    for f in sorted(x for x in p.rglob("*") if x.is_file()):
        rel = f.relative_to(p).as_posix()
        if rel == "manifest.json":
            continue
        h.update(rel.encode() + b"\0" + file_sha256(f).encode() + b"\n")
    return h.hexdigest()


def versions() -> dict:
    out = {"hallmap": hallmap.__version__, "python": platform.python_version()}
    for pkg in ("numpy", "scipy", "Pillow"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def write_manifest(out_dir: Path, command: str, args: dict, cfg: PipelineConfig | None, inputs: dict) -> dict:
    """Record what produced ``out_dir``: command, arguments, full config, input and output hashes."""
    outputs = {
        f.relative_to(out_dir).as_posix(): file_sha256(f)
        for f in sorted(out_dir.rglob("*"))
        if f.is_file() and f.name != "manifest.json"
    }
    m = {
        "command": command,
        "arguments": args,
        "config": cfg.to_dict() if cfg is not None else None,
        "config_sha256": cfg.sha256() if cfg is not None else None,
        "inputs": {k: {"path": str(v), "sha256": tree_sha256(v)} for k, v in inputs.items() if v is not None},
        "outputs": outputs,
        "versions": versions(),
    }
    write_json(out_dir / "manifest.json", m)
    return m


def _load_config(path) -> PipelineConfig:
    return PipelineConfig.load(path) if path else PipelineConfig()


def _load_init(path):
    """Initial transform from JSON ``{"q": [w, x, y, z], "t": [x, y, z], "scale": s}`` (scale optional)."""
    if not path:
        return None
    d = read_json(path)
    R = Rotation(d.get("q", [1.0, 0.0, 0.0, 0.0]))
    return Sim3Transform(float(d.get("scale", 1.0)), R, d.get("t", [0.0, 0.0, 0.0]))


def _transform_json(S: Sim3Transform) -> dict:
    return {"scale": float(S.scale), "q": S.rotation.q.tolist(), "t": np.asarray(S.translation).tolist()}


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: PipelineConfig, out_dir) -> Path:
    """Simulate a dataset (LiDAR, IMU, four depth cameras, ground truth) into ``out_dir``."""
    out = Path(out_dir)
    s = cfg.synth
    with stage("synth", "scene"):
        hall, traj = s.build(cfg.seed)
    e = s.emit
    opts = synth.EmitOptions(e.lidar_rate, e.camera_rate, e.surface_spacing, s.drift, e.cameras, e.lidar, e.depth)
    with stage("synth", "emit"):
        synth.emit_dataset(hall, traj, s.sensor, cfg.seed, out, opts)
    write_manifest(out, "synth", {}, cfg, {})
    return out


def load_lidar_dataset(dataset_dir):
    root = Path(dataset_dir)
    index = read_json(root / "index.json")
    lidar_index = root / index.get("lidar", "lidar/index.json")
    entries = read_json(lidar_index)["scans"]
    scans = [ScanFrame(load_point_cloud(lidar_index.parent / s["file"]), s["sweep_start"], s["sweep_end"]) for s in entries]
    imu_path = root / index.get("imu", "imu.csv")
    imu = load_imu(imu_path) if imu_path.exists() else []
    return scans, imu


def write_start_alignment(out: Path, est: Trajectory, truth_path: Path) -> None:
    """Coarse map-to-world transform from the true start pose (the role surveyed markers play on site)."""
    if not truth_path.exists() or len(est) == 0:
        return
    truth = load_trajectory(truth_path)
    T = truth.pose_at(float(est.times[0])) @ est.poses[0].inverse()
    write_json(out / "init.json", _transform_json(Sim3Transform.from_pose(T)))


def _keyframes_json(keyframes) -> dict:
    return {
        "keyframes": [
            {
                "id": kf.id,
                "t": kf.t,
                "translation": kf.pose.translation.tolist(),
                "quaternion_wxyz": kf.pose.rotation.q.tolist(),
                "gravity_dir": np.asarray(kf.gravity_dir).tolist(),
                "n_points": len(kf.points),
            }
            for kf in keyframes
        ]
    }


def cmd_lidar_odom(dataset_dir, cfg: PipelineConfig, out_dir) -> Path:
    """LiDAR odometry over a dataset; writes ``trajectory.txt``, ``map.ply`` and ``keyframes.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with stage("io", "load_lidar"):
        scans, imu = load_lidar_dataset(dataset_dir)
    try:
        with stage("lidar_odometry", "run"):
            traj, cloud, keyframes = run_lidar_odometry(scans, imu, cfg.lidar_odometry)
    except StageError as e:
        if isinstance(e.cause, TrackingLostError) and e.cause.trajectory is not None:
            save_trajectory(out / "trajectory.partial.txt", e.cause.trajectory)
        raise
    with stage("io", "write"):
        save_trajectory(out / "trajectory.txt", traj)
        save_point_cloud(out / "map.ply", cloud)
        write_json(out / "keyframes.json", _keyframes_json(keyframes))
        created = keyframe_map_cloud([dataclasses.replace(k, pose=k.created_pose) for k in keyframes],
                                     cfg.lidar_odometry.keyframe_voxel)
        save_point_cloud(out / "map_unrefined.ply", created)
        write_start_alignment(out, traj, Path(dataset_dir) / "ground_truth" / "trajectory.txt")
    write_manifest(out, "lidar-odom", {}, cfg, {"dataset": dataset_dir})
    return out


def cmd_rig_fuse(dataset_dir, cfg: PipelineConfig, out_dir) -> Path:
    """Camera-rig fusion; writes ``trajectory.txt`` (body poses), ``graph.json``, ``anchors.json`` and ``map.ply``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with stage("io", "load_streams"):
        streams, rig = load_streams(dataset_dir)
    with stage("rig_fusion", "run"):
        res = run_rig_fusion(streams, rig, cfg.rig_fusion)
    with stage("io", "write"):
        save_trajectory(out / "trajectory.txt", res.graph.trajectory())
        save_trajectory(out / "trajectory_initial.txt", Trajectory(res.graph.times, res.initial_poses))
        write_json(out / "graph.json", res.graph.to_json())
        write_json(out / "anchors.json", {c: _transform_json(a) for c, a in sorted(res.anchors.items())})
        write_json(out / "summary.json", {
            "keyframes": res.keyframe_counts,
            "nodes": len(res.graph.poses),
            "loop_edges": [{"i": e.i, "j": e.j, "cameras": list(e.cameras)} for e in res.loops],
            "costs": [float(c) for c in res.report.costs],
            "converged": bool(res.report.converged),
        })
        if res.cloud is not None:
            save_point_cloud(out / "map.ply", res.cloud)
        write_start_alignment(out, res.graph.trajectory(), Path(dataset_dir) / "ground_truth" / "camera_front.txt")
    write_manifest(out, "rig-fuse", {}, cfg, {"dataset": dataset_dir})
    return out


def cmd_align(map_path, reference_path, init_path, cfg: PipelineConfig, out_dir, scale_correction: bool | None = None) -> Path:
    """Fine alignment of a map onto a reference, optionally with a global scale; writes ``transform.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ev = cfg.evaluation
    scaled = ev.scale_correction if scale_correction is None else scale_correction
    with stage("io", "load"):
        cloud = load_point_cloud(map_path)
        ref = load_point_cloud(reference_path)
        init = _load_init(init_path) or Sim3Transform.identity()
    S = init
    if scaled:
        with stage("map_eval", "scale_correction"):
            S = correct_global_scale(cloud, ref, init=init)
    with stage("map_eval", "fine_align"):
        scaled_cloud = PointCloud(S.scale * cloud.points)
        res = fine_align(scaled_cloud, ref, PoseSE3(S.rotation, S.translation), ev.icp)
    final = Sim3Transform(S.scale, res.transform.rotation, res.transform.translation)
    doc = _transform_json(final)
    doc.update(rmse=float(res.rmse), converged=bool(res.converged), iterations=int(res.iterations),
               scale_correction=bool(scaled))
    write_json(out / "transform.json", doc)
    write_manifest(out, "align", {"scale_correction": bool(scaled)}, cfg,
                   {"map": map_path, "reference": reference_path, "init": init_path})
    return out


def cmd_evaluate(map_path, reference_path, boxes_path, cfg: PipelineConfig, out_dir, init_path=None,
                 label: str | None = None, scale_correction: bool | None = None) -> EvalReport:
    """Full map evaluation; writes ``report.json``, ``report.txt`` and ``colored.ply``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ev = cfg.evaluation
    with stage("io", "load"):
        cloud = load_point_cloud(map_path)
        ref = load_point_cloud(reference_path)
        boxes = load_boxes(read_json(boxes_path) if boxes_path else ev.boxes)
        init = _load_init(init_path)
    if ev.map_voxel > 0:
        cloud = PointCloud(voxel_downsample(cloud.points, ev.map_voxel)[0])
    init_pose = None
    if init is not None:
        cloud = PointCloud(init.scale * cloud.points)
        init_pose = PoseSE3(init.rotation, init.translation)
    scaled = ev.scale_correction if scale_correction is None else scale_correction
    with stage("map_eval", "evaluate"):
        res = evaluate(cloud, ref, boxes, init_pose, scaled, ColorRamp(ev.color_d_max), ev.icp,
                       ev.label if label is None else label, ev.symmetric)
    if init is not None:
        res.report.scale_applied *= init.scale
    with stage("io", "write"):
        write_json(out / "report.json", res.report.to_json())
        (out / "report.txt").write_text(res.report.to_text())
        save_point_cloud(out / "colored.ply", res.colored)
    write_manifest(out, "evaluate", {"label": res.report.label, "scale_correction": bool(scaled)}, cfg,
                   {"map": map_path, "reference": reference_path, "boxes": boxes_path, "init": init_path})
    return res.report


def cmd_report(run_dirs, out_path=None) -> str:
    """Merge the ``report.json`` of several evaluate runs into one comparison table."""
    reports = []
    with stage("map_eval", "report"):
        for d in run_dirs:
            p = Path(d)
            reports.append(EvalReport.from_json(read_json(p / "report.json" if p.is_dir() else p)))
        table = comparison_table(reports)
    if out_path:
        Path(out_path).write_text(table)
    return table


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hallmap", description="Indoor hall mapping: simulate, map, fuse, evaluate.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="pipeline config JSON; omitted keys take their defaults")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        if out:
            sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("synth", help="simulate a dataset")
    common(sp)

    sp = sub.add_parser("lidar-odom", help="LiDAR odometry and keyframe map")
    sp.add_argument("dataset", help="dataset directory written by synth")
    common(sp)

    sp = sub.add_parser("rig-fuse", help="fuse the four camera streams")
    sp.add_argument("dataset", help="dataset directory written by synth")
    common(sp)

    sp = sub.add_parser("align", help="align a map to a reference cloud")
    sp.add_argument("map", help="map PLY")
    sp.add_argument("reference", help="reference PLY")
    sp.add_argument("--init", help='initial transform JSON {"q": [w,x,y,z], "t": [m,m,m], "scale": s}')
    sp.add_argument("--scale", dest="scale_correction", action="store_true", default=None,
                    help="estimate a global scale before the rigid fine alignment")
    common(sp)

    sp = sub.add_parser("evaluate", help="C2C evaluation of a map against a reference")
    sp.add_argument("map", help="map PLY")
    sp.add_argument("reference", help="reference PLY")
    sp.add_argument("--boxes", help='exclusion boxes JSON: [{"min": [m,m,m], "max": [m,m,m]}, ...]')
    sp.add_argument("--init", help="initial transform JSON, as for align")
    sp.add_argument("--label", help="method name shown in reports")
    sp.add_argument("--scale", dest="scale_correction", action="store_true", default=None,
                    help="estimate and apply a global scale first")
    common(sp)

    sp = sub.add_parser("report", help="comparison table of several evaluate runs")
    sp.add_argument("runs", nargs="+", help="evaluate output directories (or report.json files)")
    sp.add_argument("--out", help="also write the table to this file")
    return p


def _threads_from_env():
    v = os.environ.get("HALLMAP_THREADS")
    if v is None:
        return
    try:
        n = int(v)
    except ValueError:
        n = 0
    if n < 1 and n != -1:
        raise ConfigError("HALLMAP_THREADS", f"expected a positive integer or -1, got {v!r}")


def _fail(code: int, payload: dict) -> int:
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        _threads_from_env()
        cfg = None
        if args.command != "report":
            cfg = _load_config(args.config)
            if args.seed is not None:
                cfg = dataclasses.replace(cfg, seed=args.seed)
        if args.command == "synth":
            cmd_synth(cfg, args.out)
        elif args.command == "lidar-odom":
            cmd_lidar_odom(args.dataset, cfg, args.out)
        elif args.command == "rig-fuse":
            cmd_rig_fuse(args.dataset, cfg, args.out)
        elif args.command == "align":
            cmd_align(args.map, args.reference, args.init, cfg, args.out, args.scale_correction)
        elif args.command == "evaluate":
            rep = cmd_evaluate(args.map, args.reference, args.boxes, cfg, args.out, args.init, args.label,
                               args.scale_correction)
            sys.stdout.write(rep.to_text())
        elif args.command == "report":
            sys.stdout.write(cmd_report(args.runs, args.out))
    except ConfigError as e:
        return _fail(EXIT_USAGE, {"error": "ConfigError", "module": "cli", "stage": "config", "key": e.key, "message": str(e)})
    except StageError as e:
        return _fail(EXIT_FAILURE, {"error": type(e.cause).__name__, "module": e.module, "stage": e.stage,
                                    "message": str(e.cause)})
    except (OSError, ValueError) as e:
        return _fail(EXIT_FAILURE, {"error": type(e).__name__, "module": "cli", "stage": args.command, "message": str(e)})
    return 0


if __name__ == "__main__":
    sys.exit(main())
