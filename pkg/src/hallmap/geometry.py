"""Rigid and similarity transforms.

Rotations are stored as unit quaternions ``(w, x, y, z)`` and renormalized after
every composition. Twists are ordered ``(rotation, translation)``, i.e.
``(wx, wy, wz, vx, vy, vz)``.

All objects are immutable value types; the numpy arrays they hold are marked
read-only.
"""

from __future__ import annotations

import math

import numpy as np

SMALL_ANGLE = 1e-8
LOG_ANGLE_LIMIT = math.pi - 1e-6


class DegenerateRotationError(ValueError):
    """Raised when a logarithm is requested too close to a half turn."""


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def hat(w) -> np.ndarray:
    """Skew-symmetric matrix such that ``hat(w) @ v == cross(w, v)``."""
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


class Rotation:
    """3-D rotation backed by a unit quaternion ``(w, x, y, z)``."""

    __slots__ = ("q", "_matrix")

    def __init__(self, q):
        q = np.asarray(q, dtype=float)
        if q.shape != (4,) or not np.all(np.isfinite(q)):
            raise ValueError(f"quaternion must be 4 finite numbers, got {q!r}")
        n = np.linalg.norm(q)
        if n < 1e-12:
            raise ValueError("zero quaternion")
        q = q / n
        # canonical hemisphere keeps equality checks and slerp well behaved
        if q[0] < 0:
            q = -q
        self.q = _frozen(q)
        self._matrix = None

    @classmethod
    def identity(cls) -> Rotation:
        return cls((1.0, 0.0, 0.0, 0.0))

    @classmethod
    def from_rotvec(cls, w) -> Rotation:
        w = np.asarray(w, dtype=float)
        theta = float(np.linalg.norm(w))
        if theta < SMALL_ANGLE:
            # second-order Taylor expansion of (cos(t/2), sin(t/2)/t * w)
            return cls(np.concatenate([[1.0 - theta**2 / 8.0], 0.5 * w]))
        half = 0.5 * theta
        return cls(np.concatenate([[math.cos(half)], math.sin(half) / theta * w]))

    @classmethod
    def about_axis(cls, axis, angle: float) -> Rotation:
        axis = np.asarray(axis, dtype=float)
        return cls.from_rotvec(axis / np.linalg.norm(axis) * angle)

    @classmethod
    def rot_x(cls, angle: float) -> Rotation:
        return cls.from_rotvec((angle, 0.0, 0.0))

    @classmethod
    def rot_y(cls, angle: float) -> Rotation:
        return cls.from_rotvec((0.0, angle, 0.0))

    @classmethod
    def rot_z(cls, angle: float) -> Rotation:
        return cls.from_rotvec((0.0, 0.0, angle))

    @classmethod
    def from_matrix(cls, R) -> Rotation:
        R = np.asarray(R, dtype=float)
        # Shepperd's method: pick the largest diagonal term for stability
        tr = np.trace(R)
        diag = np.array([tr, R[0, 0], R[1, 1], R[2, 2]])
        k = int(np.argmax(diag))
        if k == 0:
            s = math.sqrt(1.0 + tr) * 2.0
            q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        elif k == 1:
            s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
            q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        elif k == 2:
            s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
            q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        else:
            s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
            q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        return cls(q)

    def as_matrix(self) -> np.ndarray:
        if self._matrix is None:
            w, x, y, z = self.q
            m = np.array(
                [
                    [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                    [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                    [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
                ]
            )
            m.setflags(write=False)
            self._matrix = m
        return self._matrix

    def as_rotvec(self) -> np.ndarray:
        w = self.q[0]
        v = self.q[1:]
        s = float(np.linalg.norm(v))
        if s < 0.5 * SMALL_ANGLE:
            return 2.0 * v / w
        theta = 2.0 * math.atan2(s, w)
        return theta / s * v

    @property
    def angle(self) -> float:
        return 2.0 * math.atan2(float(np.linalg.norm(self.q[1:])), abs(self.q[0]))

    def inverse(self) -> Rotation:
        w, x, y, z = self.q
        return Rotation((w, -x, -y, -z))

    def __mul__(self, other: Rotation) -> Rotation:
        return Rotation(_quat_mul(self.q, other.q))

    def apply(self, v) -> np.ndarray:
        """Rotate a vector ``(3,)`` or a stack of vectors ``(N, 3)``."""
        return np.asarray(v, dtype=float) @ self.as_matrix().T

    def __repr__(self) -> str:
        return f"Rotation(q={self.q.tolist()})"

    def __eq__(self, other) -> bool:
        return isinstance(other, Rotation) and np.array_equal(self.q, other.q)

    def __hash__(self) -> int:
        return hash(self.q.tobytes())


def rotation_angle_between(a: Rotation, b: Rotation) -> float:
    """Geodesic distance in radians."""
    return (a.inverse() * b).angle


class PoseSE3:
    """Rigid transform ``x -> R x + t``."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation: Rotation | None = None, translation=(0.0, 0.0, 0.0)):
        self.rotation = rotation if rotation is not None else Rotation.identity()
        t = np.asarray(translation, dtype=float)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise ValueError(f"translation must be 3 finite numbers, got {t!r}")
        self.translation = _frozen(t)

    @classmethod
    def identity(cls) -> PoseSE3:
        return cls()

    @classmethod
    def translate(cls, x: float, y: float, z: float) -> PoseSE3:
        return cls(Rotation.identity(), (x, y, z))

    @classmethod
    def rot_z(cls, angle: float) -> PoseSE3:
        return cls(Rotation.rot_z(angle))

    @classmethod
    def from_matrix(cls, T) -> PoseSE3:
        T = np.asarray(T, dtype=float)
        return cls(Rotation.from_matrix(T[:3, :3]), T[:3, 3])

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation.as_matrix()
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> PoseSE3:
        r_inv = self.rotation.inverse()
        return PoseSE3(r_inv, -r_inv.apply(self.translation))

    def compose(self, other: PoseSE3) -> PoseSE3:
        return PoseSE3(self.rotation * other.rotation, self.rotation.apply(other.translation) + self.translation)

    __matmul__ = compose

    def apply(self, x) -> np.ndarray:
        """Transform a point ``(3,)`` or points ``(N, 3)``."""
        return np.asarray(x, dtype=float) @ self.rotation.as_matrix().T + self.translation

    def adjoint(self) -> np.ndarray:
        """6x6 adjoint for twists ordered (rotation, translation)."""
        R = self.rotation.as_matrix()
        A = np.zeros((6, 6))
        A[:3, :3] = R
        A[3:, 3:] = R
        A[3:, :3] = hat(self.translation) @ R
        return A

    def __repr__(self) -> str:
        return f"PoseSE3(q={self.rotation.q.tolist()}, t={self.translation.tolist()})"

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PoseSE3)
            and self.rotation == other.rotation
            and np.array_equal(self.translation, other.translation)
        )

    def __hash__(self) -> int:
        return hash((self.rotation, self.translation.tobytes()))


def se3_compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """Pose applying ``b`` first, then ``a``."""
    return a.compose(b)


def _so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    K = hat(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    t2 = theta * theta
    return np.eye(3) + (1.0 - math.cos(theta)) / t2 * K + (theta - math.sin(theta)) / (t2 * theta) * K @ K


def _so3_left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    K = hat(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + K @ K / 12.0
    half = 0.5 * theta
    coef = (1.0 - half / math.tan(half)) / (theta * theta)
    return np.eye(3) - 0.5 * K + coef * K @ K


def se3_exp(twist) -> PoseSE3:
    """Exponential map of a twist ``(wx, wy, wz, vx, vy, vz)``."""
    twist = np.asarray(twist, dtype=float)
    if twist.shape != (6,):
        raise ValueError("twist must have 6 components")
    w, v = twist[:3], twist[3:]
    return PoseSE3(Rotation.from_rotvec(w), _so3_left_jacobian(w) @ v)


def se3_log(p: PoseSE3) -> np.ndarray:
    """Logarithm of a pose as a twist ``(wx, wy, wz, vx, vy, vz)``.

    Raises DegenerateRotationError when the rotation angle is within 1e-6 of pi.
    """
    if p.rotation.angle >= LOG_ANGLE_LIMIT:
        raise DegenerateRotationError(f"rotation angle {p.rotation.angle:.9f} too close to pi for log")
    w = p.rotation.as_rotvec()
    return np.concatenate([w, _so3_left_jacobian_inv(w) @ p.translation])


def so3_right_jacobian_inv(w) -> np.ndarray:
    return _so3_left_jacobian_inv(-np.asarray(w, dtype=float))


def slerp(q0: Rotation, q1: Rotation, t: float) -> Rotation:
    a, b = q0.q, q1.q
    d = float(np.dot(a, b))
    if d < 0.0:
        b, d = -b, -d
    if d > 1.0 - 1e-12:
        return Rotation(a + t * (b - a))
    theta = math.acos(min(d, 1.0))
    s = math.sin(theta)
    return Rotation(math.sin((1.0 - t) * theta) / s * a + math.sin(t * theta) / s * b)


def interpolate_pose(p0: PoseSE3, p1: PoseSE3, t: float) -> PoseSE3:
    """Linear translation and shortest-arc slerp rotation between two poses."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"interpolation parameter {t} outside [0, 1]")
    if t == 0.0:
        return p0
    if t == 1.0:
        return p1
    return PoseSE3(slerp(p0.rotation, p1.rotation, t), (1.0 - t) * p0.translation + t * p1.translation)


def interpolate_poses(p0: PoseSE3, p1: PoseSE3, ts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`interpolate_pose`.

    Returns rotation matrices ``(N, 3, 3)`` and translations ``(N, 3)``.
    """
    ts = np.asarray(ts, dtype=float)
    if ts.size and (ts.min() < 0.0 or ts.max() > 1.0):
        raise ValueError("interpolation parameters outside [0, 1]")
    a, b = p0.rotation.q, p1.rotation.q
    d = float(np.dot(a, b))
    if d < 0.0:
        b, d = -b, -d
    if d > 1.0 - 1e-12:
        q = a[None, :] + ts[:, None] * (b - a)[None, :]
    else:
        theta = math.acos(min(d, 1.0))
        s = math.sin(theta)
        q = (np.sin((1.0 - ts) * theta) / s)[:, None] * a + (np.sin(ts * theta) / s)[:, None] * b
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    trans = (1.0 - ts)[:, None] * p0.translation + ts[:, None] * p1.translation
    return quats_to_matrices(q), trans


def quats_to_matrices(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


class Sim3Transform:
    """Similarity transform ``x -> s R x + t`` with ``s > 0``."""

    __slots__ = ("scale", "rotation", "translation")

    def __init__(self, scale: float = 1.0, rotation: Rotation | None = None, translation=(0.0, 0.0, 0.0)):
        scale = float(scale)
        if not (scale > 0.0 and math.isfinite(scale)):
            raise ValueError(f"scale must be positive, got {scale}")
        self.scale = scale
        self.rotation = rotation if rotation is not None else Rotation.identity()
        self.translation = _frozen(translation)

    @classmethod
    def identity(cls) -> Sim3Transform:
        return cls()

    @classmethod
    def from_pose(cls, pose: PoseSE3, scale: float = 1.0) -> Sim3Transform:
        return cls(scale, pose.rotation, pose.translation)

    def as_pose(self) -> PoseSE3:
        """Drop the scale."""
        return PoseSE3(self.rotation, self.translation)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.scale * self.rotation.as_matrix()
        T[:3, 3] = self.translation
        return T

    def apply(self, x) -> np.ndarray:
        return self.scale * (np.asarray(x, dtype=float) @ self.rotation.as_matrix().T) + self.translation

    def compose(self, other: Sim3Transform) -> Sim3Transform:
        return Sim3Transform(
            self.scale * other.scale,
            self.rotation * other.rotation,
            self.scale * self.rotation.apply(other.translation) + self.translation,
        )

    __matmul__ = compose

    def inverse(self) -> Sim3Transform:
        r_inv = self.rotation.inverse()
        s_inv = 1.0 / self.scale
        return Sim3Transform(s_inv, r_inv, -s_inv * r_inv.apply(self.translation))

    def apply_pose(self, pose: PoseSE3) -> PoseSE3:
        """Map a pose expressed in the source frame into the target frame."""
        return PoseSE3(self.rotation * pose.rotation, self.apply(pose.translation))

    def __repr__(self) -> str:
        return f"Sim3Transform(s={self.scale!r}, q={self.rotation.q.tolist()}, t={self.translation.tolist()})"
