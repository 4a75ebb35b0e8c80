"""Data containers and on-disk formats.

Formats
-------
PLY
    ``format ascii 1.0`` or ``format binary_little_endian 1.0``. The ``vertex``
    element must carry ``x y z`` (float or double); optional ``uchar red green
    blue`` and ``double t`` (per-point timestamp, seconds). Other elements and
    properties are parsed and ignored.
TUM trajectory
    One pose per line, ``timestamp tx ty tz qx qy qz qw``; ``#`` starts a comment.
Rig calibration
    JSON object ``{camera_id: {"q": [w, x, y, z], "t": [x, y, z]}}`` holding the
    camera-to-body transform of every camera. ``front`` must be the identity.
IMU
    CSV with header ``t,ax,ay,az,gx,gy,gz`` (s, m/s^2, rad/s).
Depth
    16-bit grayscale PNG holding millimeters; 0 marks an invalid pixel.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from hallmap.geometry import PoseSE3, Rotation, interpolate_pose

log = logging.getLogger(__name__)


class FormatError(ValueError):
    """Malformed input file."""


class PlyParseError(FormatError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class UnsupportedFormatError(FormatError):
    pass


class CalibrationError(ValueError):
    pass


class PointCloudError(ValueError):
    pass


# ---------------------------------------------------------------------------
# containers


@dataclass(eq=False)
class PointCloud:
    """Points ``(N, 3)`` with optional RGB colors ``(N, 3) uint8`` and times ``(N,)``."""

    points: np.ndarray
    colors: np.ndarray | None = None
    times: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        bad = ~np.isfinite(self.points).all(axis=1)
        if bad.any():
            raise PointCloudError(f"non-finite coordinate at point index {int(np.argmax(bad))}")
        n = len(self.points)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(self.colors) != n:
                raise PointCloudError(f"{len(self.colors)} colors for {n} points")
        if self.times is not None:
            self.times = np.asarray(self.times, dtype=float).reshape(-1)
            if len(self.times) != n:
                raise PointCloudError(f"{len(self.times)} timestamps for {n} points")

    def __len__(self) -> int:
        return len(self.points)

    def select(self, index) -> PointCloud:
        return PointCloud(
            self.points[index],
            None if self.colors is None else self.colors[index],
            None if self.times is None else self.times[index],
        )

    def transformed(self, transform) -> PointCloud:
        """Apply anything with an ``apply(points)`` method (PoseSE3, Sim3Transform)."""
        return PointCloud(transform.apply(self.points), self.colors, self.times)

    def with_colors(self, colors) -> PointCloud:
        return PointCloud(self.points, colors, self.times)

    @staticmethod
    def concatenate(clouds) -> PointCloud:
        clouds = list(clouds)
        if not clouds:
            return PointCloud(np.zeros((0, 3)))
        pts = np.concatenate([c.points for c in clouds])
        colors = times = None
        if all(c.colors is not None for c in clouds):
            colors = np.concatenate([c.colors for c in clouds])
        if all(c.times is not None for c in clouds):
            times = np.concatenate([c.times for c in clouds])
        return PointCloud(pts, colors, times)


@dataclass(eq=False)
class Trajectory:
    """Ordered ``(timestamp, pose)`` pairs with strictly increasing timestamps."""

    times: np.ndarray
    poses: list

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.poses = list(self.poses)
        if len(self.times) != len(self.poses):
            raise ValueError("times and poses differ in length")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            i = int(np.argmax(np.diff(self.times) <= 0)) + 1
            raise FormatError(f"timestamps not strictly increasing at entry {i}")

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.array([p.translation for p in self.poses])

    def path_length(self) -> float:
        p = self.positions()
        return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum()) if len(p) > 1 else 0.0

    def pose_at(self, t: float) -> PoseSE3:
        """Pose interpolated at time ``t`` (clamped to the covered interval)."""
        if not self.poses:
            raise ValueError("empty trajectory")
        if t <= self.times[0]:
            return self.poses[0]
        if t >= self.times[-1]:
            return self.poses[-1]
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        t0, t1 = self.times[i], self.times[i + 1]
        return interpolate_pose(self.poses[i], self.poses[i + 1], (t - t0) / (t1 - t0))

    def transformed(self, transform) -> Trajectory:
        """Left-apply a PoseSE3 or Sim3Transform to every pose."""
        if isinstance(transform, PoseSE3):
            return Trajectory(self.times, [transform @ p for p in self.poses])
        return Trajectory(self.times, [transform.apply_pose(p) for p in self.poses])


@dataclass
class ScanFrame:
    """One LiDAR sweep; ``points`` are in the sensor frame at each point's own timestamp."""

    points: PointCloud
    sweep_start: float
    sweep_end: float

    def __post_init__(self):
        if self.points.times is None:
            raise ValueError("scan points need per-point timestamps")
        if len(self.points) and (
            self.points.times.min() < self.sweep_start - 1e-9 or self.points.times.max() > self.sweep_end + 1e-9
        ):
            raise ValueError("per-point timestamps outside the sweep interval")

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class ImuSample:
    t: float
    accel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))


class RigCalibration(dict):
    """``camera_id -> PoseSE3`` camera-to-body extrinsics; body = front camera."""

    def __init__(self, extrinsics: dict):
        super().__init__(extrinsics)
        if "front" not in self:
            raise CalibrationError("rig calibration has no 'front' camera")
        front = self["front"]
        if front.rotation.angle > 1e-9 or np.linalg.norm(front.translation) > 1e-9:
            raise CalibrationError("'front' extrinsic must be the identity (body frame is the front camera)")


# ---------------------------------------------------------------------------
# PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


@dataclass
class _PlyElement:
    name: str
    count: int
    props: list = field(default_factory=list)  # (name, dtype) or (name, count_dtype, item_dtype)

    @property
    def has_lists(self) -> bool:
        return any(len(p) == 3 for p in self.props)


def _parse_ply_header(f):
    first = f.readline()
    if first.rstrip(b"\r\n") != b"ply":
        raise PlyParseError("missing 'ply' magic", 1)
    fmt = None
    elements: list[_PlyElement] = []
    lineno = 1
    while True:
        raw = f.readline()
        lineno += 1
        if not raw:
            raise PlyParseError("unexpected end of file inside header", lineno)
        try:
            line = raw.decode("ascii").strip()
        except UnicodeDecodeError:
            raise PlyParseError("non-ASCII header line", lineno) from None
        if not line or line.startswith(("comment", "obj_info")):
            continue
        tok = line.split()
        if tok[0] == "format":
            if len(tok) != 3:
                raise PlyParseError(f"bad format line {line!r}", lineno)
            if tok[1] == "binary_big_endian":
                raise UnsupportedFormatError(f"line {lineno}: big-endian PLY is not supported")
            if tok[1] not in ("ascii", "binary_little_endian"):
                raise PlyParseError(f"unknown format {tok[1]!r}", lineno)
            if fmt is not None and fmt != tok[1]:
                raise UnsupportedFormatError(f"line {lineno}: conflicting format declarations")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise PlyParseError(f"bad element line {line!r}", lineno)
            elements.append(_PlyElement(tok[1], int(tok[2])))
        elif tok[0] == "property":
            if not elements:
                raise PlyParseError("property before any element", lineno)
            if len(tok) == 3 and tok[1] in _PLY_TYPES:
                elements[-1].props.append((tok[2], _PLY_TYPES[tok[1]]))
            elif len(tok) == 5 and tok[1] == "list" and tok[2] in _PLY_TYPES and tok[3] in _PLY_TYPES:
                elements[-1].props.append((tok[4], _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
            else:
                raise PlyParseError(f"bad property line {line!r}", lineno)
        elif tok[0] == "end_header":
            break
        else:
            raise PlyParseError(f"unexpected header keyword {tok[0]!r}", lineno)
    if fmt is None:
        raise PlyParseError("missing format line", lineno)
    return fmt, elements, lineno


def _read_ascii_element(lines, el: _PlyElement, first_line: int) -> dict:
    if len(lines) < el.count:
        raise PlyParseError(f"element {el.name!r}: expected {el.count} rows, file ends early", first_line + len(lines))
    cols: dict = {p[0]: [] for p in el.props}
    if not el.has_lists:
        if el.count == 0:
            return {p[0]: np.zeros(0, dtype=p[1]) for p in el.props}
        try:
            table = np.array([ln.split() for ln in lines[: el.count]], dtype=float)
        except ValueError:
            for i, ln in enumerate(lines[: el.count]):
                if len(ln.split()) != len(el.props):
                    raise PlyParseError(f"expected {len(el.props)} values", first_line + i) from None
            raise PlyParseError(f"non-numeric value in element {el.name!r}", first_line) from None
        if table.ndim != 2 or table.shape[1] != len(el.props):
            raise PlyParseError(f"element {el.name!r}: wrong number of values per row", first_line)
        return {p[0]: table[:, k] for k, p in enumerate(el.props)}
    for i, ln in enumerate(lines[: el.count]):
        tok = ln.split()
        k = 0
        try:
            for p in el.props:
                if len(p) == 2:
                    cols[p[0]].append(float(tok[k]))
                    k += 1
                else:
                    n = int(tok[k])
                    cols[p[0]].append([float(x) for x in tok[k + 1 : k + 1 + n]])
                    k += 1 + n
        except (IndexError, ValueError):
            raise PlyParseError(f"bad row in element {el.name!r}", first_line + i) from None
    return cols


def _read_binary_element(buf: memoryview, offset: int, el: _PlyElement) -> tuple[dict, int]:
    if not el.has_lists:
        dt = np.dtype([(p[0], "<" + p[1]) for p in el.props])
        need = dt.itemsize * el.count
        if offset + need > len(buf):
            raise PlyParseError(f"element {el.name!r}: binary payload truncated")
        arr = np.frombuffer(buf, dtype=dt, count=el.count, offset=offset)
        return {name: arr[name] for name in dt.names}, offset + need
    cols: dict = {p[0]: [] for p in el.props}
    try:
        for _ in range(el.count):
            for p in el.props:
                if len(p) == 2:
                    dt = np.dtype("<" + p[1])
                    cols[p[0]].append(np.frombuffer(buf, dt, 1, offset)[0])
                    offset += dt.itemsize
                else:
                    cdt, idt = np.dtype("<" + p[1]), np.dtype("<" + p[2])
                    n = int(np.frombuffer(buf, cdt, 1, offset)[0])
                    offset += cdt.itemsize
                    cols[p[0]].append(np.frombuffer(buf, idt, n, offset).copy())
                    offset += n * idt.itemsize
    except ValueError:
        raise PlyParseError(f"element {el.name!r}: binary payload truncated") from None
    return cols, offset


def load_point_cloud(path) -> PointCloud:
    """Read a PLY file (ASCII or binary little-endian)."""
    path = Path(path)
    with open(path, "rb") as f:
        fmt, elements, header_lines = _parse_ply_header(f)
        body = f.read()
    vertex = next((e for e in elements if e.name == "vertex"), None)
    if vertex is None:
        raise PlyParseError("no 'vertex' element in header")
    names = [p[0] for p in vertex.props]
    for axis in "xyz":
        if axis not in names:
            raise PlyParseError(f"vertex element lacks property {axis!r}")
    data = None
    if fmt == "ascii":
        lines = [ln for ln in body.decode("ascii", errors="replace").splitlines()]
        row = 0
        for el in elements:
            cols = _read_ascii_element(lines[row:], el, header_lines + 1 + row)
            row += el.count
            if el is vertex:
                data = cols
                break
    else:
        buf = memoryview(body)
        offset = 0
        for el in elements:
            cols, offset = _read_binary_element(buf, offset, el)
            if el is vertex:
                data = cols
                break
    pts = np.column_stack([np.asarray(data[a], dtype=float) for a in "xyz"]) if vertex.count else np.zeros((0, 3))
    bad = ~np.isfinite(pts).all(axis=1)
    if bad.any():
        raise PointCloudError(f"{path}: non-finite coordinate at point index {int(np.argmax(bad))}")
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.column_stack([np.asarray(data[c]) for c in ("red", "green", "blue")]).astype(np.uint8)
    times = np.asarray(data["t"], dtype=float) if "t" in names else None
    return PointCloud(pts, colors, times)


def save_point_cloud(path, cloud: PointCloud, colors=None, binary: bool = True, double: bool = False) -> None:
    """Write a PLY file. Coordinates are float32 unless ``double``."""
    colors = cloud.colors if colors is None else np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
    if colors is not None and len(colors) != len(cloud):
        raise PointCloudError("color count differs from point count")
    ctype = "double" if double else "float"
    fields = [("x", "<f8" if double else "<f4"), ("y", "<f8" if double else "<f4"), ("z", "<f8" if double else "<f4")]
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {len(cloud)}"]
    header += [f"property {ctype} {a}" for a in "xyz"]
    if colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    if cloud.times is not None:
        header.append("property double t")
        fields.append(("t", "<f8"))
    header.append("end_header")
    arr = np.empty(len(cloud), dtype=np.dtype(fields))
    for k, a in enumerate("xyz"):
        arr[a] = cloud.points[:, k]
    if colors is not None:
        arr["red"], arr["green"], arr["blue"] = colors[:, 0], colors[:, 1], colors[:, 2]
    if cloud.times is not None:
        arr["t"] = cloud.times
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            f.write(arr.tobytes())
        else:
            for row in arr:
                vals = []
                for name in arr.dtype.names:
                    v = row[name]
                    if arr.dtype[name].kind == "f":
                        vals.append(repr(float(v)) if double or name == "t" else repr(float(np.float32(v))))
                    else:
                        vals.append(str(int(v)))
                f.write((" ".join(vals) + "\n").encode("ascii"))


# ---------------------------------------------------------------------------
# TUM trajectories


def _fmt9(x: float) -> str:
    return f"{x:.9g}"


def _stable_quat_text(q: np.ndarray) -> list[str]:
    # Find a 9-digit rendering that survives parse -> normalize -> render.
    cur = np.array([q[1], q[2], q[3], q[0]])
    text = [_fmt9(v) for v in cur]
    for _ in range(8):
        parsed = np.array([float(s) for s in text])
        nxt = [_fmt9(v) for v in parsed / np.linalg.norm(parsed)]
        if nxt == text:
            break
        text = nxt
    return text


def save_trajectory(path, traj: Trajectory) -> None:
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for t, p in zip(traj.times, traj.poses):
        parts = [f"{t:.9f}"] + [_fmt9(v) for v in p.translation] + _stable_quat_text(p.rotation.q)
        lines.append(" ".join(parts))
    Path(path).write_text("\n".join(lines) + "\n")


def load_trajectory(path) -> Trajectory:
    times, poses = [], []
    prev = -math.inf
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.replace(",", " ").split()
        if len(tok) != 8:
            raise FormatError(f"{path}:{lineno}: expected 8 values, got {len(tok)}")
        try:
            v = [float(x) for x in tok]
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-numeric value") from None
        if not all(math.isfinite(x) for x in v):
            raise FormatError(f"{path}:{lineno}: non-finite value")
        t = v[0]
        if t <= prev:
            raise FormatError(f"{path}:{lineno}: timestamp {t} not strictly increasing")
        prev = t
        qx, qy, qz, qw = v[4:8]
        q = np.array([qw, qx, qy, qz])
        n = float(np.linalg.norm(q))
        if n == 0.0:
            raise FormatError(f"{path}:{lineno}: zero quaternion")
        if abs(n - 1.0) > 1e-6:
            warnings.warn(f"{path}:{lineno}: quaternion norm {n:.6g} renormalized", stacklevel=2)
        times.append(t)
        poses.append(PoseSE3(Rotation(q), v[1:4]))
    return Trajectory(np.array(times), poses)


# ---------------------------------------------------------------------------
# rig calibration and IMU


def _no_duplicates(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise CalibrationError(f"duplicate key {k!r}")
        out[k] = v
    return out


def pose_to_json(p: PoseSE3) -> dict:
    return {"q": [float(v) for v in p.rotation.q], "t": [float(v) for v in p.translation]}


def pose_from_json(d: dict) -> PoseSE3:
    return PoseSE3(Rotation(d["q"]), d["t"])


def load_rig_calibration(path) -> RigCalibration:
    try:
        raw = json.loads(Path(path).read_text(), object_pairs_hook=_no_duplicates)
    except json.JSONDecodeError as e:
        raise CalibrationError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(raw, dict):
        raise CalibrationError(f"{path}: expected a JSON object")
    ext = {}
    for cam, entry in raw.items():
        try:
            q, t = entry["q"], entry["t"]
        except (TypeError, KeyError):
            raise CalibrationError(f"{path}: camera {cam!r} needs 'q' and 't'") from None
        if len(q) != 4 or len(t) != 3:
            raise CalibrationError(f"{path}: camera {cam!r} has malformed q/t")
        ext[cam] = PoseSE3(Rotation(q), t)
    return RigCalibration(ext)


def save_rig_calibration(path, rig: dict) -> None:
    Path(path).write_text(json.dumps({k: pose_to_json(v) for k, v in rig.items()}, indent=2) + "\n")


IMU_HEADER = ["t", "ax", "ay", "az", "gx", "gy", "gz"]


def load_imu(path) -> list[ImuSample]:
    samples = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        for lineno, row in enumerate(reader, start=1):
            if not row or row[0].startswith("#"):
                continue
            if lineno == 1 and row[0].strip() == "t":
                continue
            if len(row) != 7:
                raise FormatError(f"{path}:{lineno}: expected 7 columns")
            try:
                v = np.array([float(x) for x in row])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric value") from None
            if not np.all(np.isfinite(v)):
                raise FormatError(f"{path}:{lineno}: non-finite value")
            samples.append(ImuSample(float(v[0]), v[1:4], v[4:7]))
    samples.sort(key=lambda s: s.t)
    return samples


def save_imu(path, samples) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(IMU_HEADER)
        for s in samples:
            w.writerow([repr(float(s.t))] + [repr(float(x)) for x in s.accel] + [repr(float(x)) for x in s.gyro])


# ---------------------------------------------------------------------------
# depth images


def save_depth_png(path, depth: np.ndarray) -> None:
    mm = np.rint(np.asarray(depth, dtype=float) * 1000.0)
    if mm.max(initial=0) > 65535:
        raise ValueError("depth exceeds 65.535 m, not representable in 16-bit millimeters")
    Image.fromarray(mm.astype(np.uint16)).save(path, format="PNG")


def load_depth_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.uint16).astype(float) / 1000.0


def read_json(path):
    return json.loads(Path(path).read_text())


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
