"""SO(3) / SE(3) primitives.

Rotations are unit quaternions ``(w, x, y, z)`` kept in the ``w >= 0``
hemisphere. Poses are ``(rotation, translation)`` pairs acting on points as
``R @ p + t``. Tangent vectors of SE(3) are ordered ``(angular, linear)``.

Besides the scalar value types, a handful of ``*_batch`` helpers work on
stacks of tangent vectors; the spline and undistortion code lean on them to
keep per-point work inside numpy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# Below this angle exp/log switch to second-order Taylor series.
SMALL_ANGLE = 1e-8
NORM_TOLERANCE = 1e-12


def _as_vec3(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=float).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"{name} must have 3 components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite, got {arr}")
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float)
    arr.flags.writeable = False
    return arr


def skew(v) -> np.ndarray:
    """Hat operator: ``skew(a) @ b == cross(a, b)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_batch(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


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


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def _matrix_to_quat(m: np.ndarray) -> np.ndarray:
    # Shepperd: branch on the largest of trace and the diagonal entries.
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    diag = (tr, m[0, 0], m[1, 1], m[2, 2])
    k = int(np.argmax(diag))
    if k == 0:
        s = 2.0 * math.sqrt(max(1.0 + tr, 0.0))
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif k == 1:
        s = 2.0 * math.sqrt(max(1.0 + m[0, 0] - m[1, 1] - m[2, 2], 0.0))
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif k == 2:
        s = 2.0 * math.sqrt(max(1.0 + m[1, 1] - m[0, 0] - m[2, 2], 0.0))
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(max(1.0 + m[2, 2] - m[0, 0] - m[1, 1], 0.0))
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return np.array(q)


@dataclass(frozen=True, eq=False)
class Rotation:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0``."""

    quat: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=float).reshape(-1)
        if q.shape != (4,) or not np.all(np.isfinite(q)):
            raise ValueError(f"quaternion must be 4 finite numbers, got {self.quat}")
        n = math.sqrt(float(q @ q))
        if n == 0.0:
            raise ValueError("zero quaternion")
        if abs(n - 1.0) > NORM_TOLERANCE:
            q = q / n
        if q[0] < 0.0:
            q = -q
        object.__setattr__(self, "quat", _frozen(q))

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_matrix(cls, m) -> "Rotation":
        m = np.asarray(m, dtype=float)
        if m.shape != (3, 3) or not np.all(np.isfinite(m)):
            raise ValueError("rotation matrix must be a finite 3x3 array")
        return cls(_matrix_to_quat(m))

    @classmethod
    def from_xyzw(cls, x, y, z, w) -> "Rotation":
        return cls(np.array([w, x, y, z], dtype=float))

    @property
    def w(self) -> float:
        return float(self.quat[0])

    @property
    def xyzw(self) -> tuple[float, float, float, float]:
        w, x, y, z = (float(c) for c in self.quat)
        return x, y, z, w

    @cached_property
    def matrix(self) -> np.ndarray:
        return _frozen(_quat_to_matrix(self.quat))

    def inverse(self) -> "Rotation":
        w, x, y, z = self.quat
        return Rotation(np.array([w, -x, -y, -z]))

    def __mul__(self, other: "Rotation") -> "Rotation":
        if not isinstance(other, Rotation):
            return NotImplemented
        return Rotation(_quat_mul(self.quat, other.quat))

    def apply(self, v) -> np.ndarray:
        """Rotate a 3-vector or an ``(N, 3)`` array of row vectors."""
        v = np.asarray(v, dtype=float)
        if v.ndim == 1:
            return self.matrix @ v
        return v @ self.matrix.T

    def angle(self) -> float:
        n = float(np.linalg.norm(self.quat[1:]))
        return 2.0 * math.atan2(n, abs(self.w))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Rotation):
            return NotImplemented
        return bool(np.array_equal(self.quat, other.quat))

    def __hash__(self):
        return hash(self.quat.tobytes())

    def __repr__(self) -> str:
        return "Rotation(w={:.6g}, x={:.6g}, y={:.6g}, z={:.6g})".format(*self.quat)


@dataclass(frozen=True, eq=False)
class Se3Pose:
    rotation: Rotation = field(default_factory=Rotation.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not isinstance(self.rotation, Rotation):
            raise TypeError("rotation must be a Rotation")
        object.__setattr__(self, "translation", _frozen(_as_vec3(self.translation, "translation")))

    @classmethod
    def identity(cls) -> "Se3Pose":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "Se3Pose":
        m = np.asarray(m, dtype=float)
        return cls(Rotation.from_matrix(m[:3, :3]), m[:3, 3])

    @classmethod
    def from_rt(cls, r, t) -> "Se3Pose":
        return cls(Rotation.from_matrix(r), t)

    @cached_property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.matrix
        m[:3, 3] = self.translation
        m.flags.writeable = False
        return m

    def inverse(self) -> "Se3Pose":
        r_inv = self.rotation.inverse()
        return Se3Pose(r_inv, -r_inv.apply(self.translation))

    def __mul__(self, other: "Se3Pose") -> "Se3Pose":
        if not isinstance(other, Se3Pose):
            return NotImplemented
        return Se3Pose(
            self.rotation * other.rotation,
            self.rotation.apply(other.translation) + self.translation,
        )

    def apply(self, points) -> np.ndarray:
        """Transform a point or an ``(N, 3)`` array of points."""
        points = np.asarray(points, dtype=float)
        return self.rotation.apply(points) + self.translation

    def __eq__(self, other) -> bool:
        if not isinstance(other, Se3Pose):
            return NotImplemented
        return self.rotation == other.rotation and bool(
            np.array_equal(self.translation, other.translation)
        )

    def __hash__(self):
        return hash((self.rotation, self.translation.tobytes()))

    def __repr__(self) -> str:
        t = ", ".join(f"{c:.6g}" for c in self.translation)
        return f"Se3Pose({self.rotation!r}, t=({t}))"


@dataclass(frozen=True, eq=False)
class Twist:
    """Element of se(3): ``angular`` (rad) and ``linear`` (m) parts."""

    angular: np.ndarray
    linear: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "angular", _frozen(_as_vec3(self.angular, "angular")))
        object.__setattr__(self, "linear", _frozen(_as_vec3(self.linear, "linear")))

    @classmethod
    def from_vector(cls, xi) -> "Twist":
        xi = np.asarray(xi, dtype=float).reshape(-1)
        return cls(xi[:3], xi[3:6])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.angular, self.linear])

    def __mul__(self, s: float) -> "Twist":
        return Twist(self.angular * s, self.linear * s)

    __rmul__ = __mul__

    def __eq__(self, other) -> bool:
        if not isinstance(other, Twist):
            return NotImplemented
        return bool(
            np.array_equal(self.angular, other.angular)
            and np.array_equal(self.linear, other.linear)
        )

    __hash__ = None


def rot_exp(omega) -> Rotation:
    """Rotation by ``|omega|`` radians about ``omega / |omega|``."""
    omega = _as_vec3(omega, "omega")
    theta = math.sqrt(float(omega @ omega))
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return Rotation(np.concatenate([[1.0 - t2 / 8.0], omega * (0.5 - t2 / 48.0)]))
    half = 0.5 * theta
    return Rotation(np.concatenate([[math.cos(half)], omega * (math.sin(half) / theta)]))


def rot_log(r: Rotation) -> np.ndarray:
    """Axis-angle vector of ``r`` with norm in ``[0, pi]``.

    The canonical ``w >= 0`` hemisphere makes ``atan2`` well conditioned up
    to and including the half-turn, where ``w == 0``.
    """
    w = r.quat[0]
    v = np.array(r.quat[1:])
    n = math.sqrt(float(v @ v))
    if n < 0.5 * SMALL_ANGLE * max(w, 1e-300):
        # theta ~ 2n/w, second-order series of 2 atan(n/w)/n
        return v * (2.0 / w) * (1.0 - n * n / (3.0 * w * w))
    theta = 2.0 * math.atan2(n, w)
    return v * (theta / n)


def _v_coeffs(theta: float) -> tuple[float, float]:
    t2 = theta * theta
    # Half-angle form avoids the cancellation in 1 - cos; the cubic term uses
    # its series where theta - sin(theta) would cancel.
    a = 0.5 - t2 / 24.0 if theta < SMALL_ANGLE else 2.0 * math.sin(0.5 * theta) ** 2 / t2
    if theta < 1e-2:
        b = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        b = (theta - math.sin(theta)) / (t2 * theta)
    return a, b


def left_jacobian(omega) -> np.ndarray:
    """SO(3) left Jacobian, the ``V`` matrix of the SE(3) exponential."""
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    a, b = _v_coeffs(theta)
    k = skew(omega)
    return np.eye(3) + a * k + b * (k @ k)


def left_jacobian_inverse(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    k = skew(omega)
    t2 = theta * theta
    if theta < 1e-2:
        c = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        half = 0.5 * theta
        c = (1.0 - half / math.tan(half)) / t2
    return np.eye(3) - 0.5 * k + c * (k @ k)


def right_jacobian_inverse(omega) -> np.ndarray:
    # Jr(w) = Jl(-w)
    return left_jacobian_inverse(-np.asarray(omega, dtype=float))


def pose_exp(xi: Twist) -> Se3Pose:
    rot = rot_exp(xi.angular)
    return Se3Pose(rot, left_jacobian(xi.angular) @ xi.linear)


def pose_log(p: Se3Pose) -> Twist:
    omega = rot_log(p.rotation)
    return Twist(omega, left_jacobian_inverse(omega) @ p.translation)


def pose_compose(a: Se3Pose, b: Se3Pose) -> Se3Pose:
    return a * b


def pose_inverse(p: Se3Pose) -> Se3Pose:
    return p.inverse()


def rotation_angle_between(a: Rotation, b: Rotation) -> float:
    return (a.inverse() * b).angle()


# ----------------------------------------------------------------------------
# Batched helpers over (N, 3) / (N, 6) arrays.


def so3_exp_batch(omegas: np.ndarray) -> np.ndarray:
    """Rodrigues formula over a stack of rotation vectors -> ``(N, 3, 3)``."""
    omegas = np.asarray(omegas, dtype=float)
    theta = np.linalg.norm(omegas, axis=-1)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - t2 / 24.0, 2.0 * np.sin(0.5 * safe) ** 2 / (safe * safe))
    k = skew_batch(omegas)
    kk = k @ k
    return np.eye(3) + a[..., None, None] * k + b[..., None, None] * kk


def se3_exp_batch(xis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """SE(3) exponential of ``(N, 6)`` twists -> rotations ``(N,3,3)``, translations ``(N,3)``."""
    xis = np.asarray(xis, dtype=float)
    w = xis[..., :3]
    v = xis[..., 3:]
    theta = np.linalg.norm(w, axis=-1)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    t2 = theta * theta
    sa = np.where(small, 1.0 - t2 / 6.0, np.sin(safe) / safe)
    a = np.where(small, 0.5 - t2 / 24.0, 2.0 * np.sin(0.5 * safe) ** 2 / (safe * safe))
    b = np.where(
        theta < 1e-2, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, (safe - np.sin(safe)) / (safe**3)
    )
    k = skew_batch(w)
    kk = k @ k
    eye = np.eye(3)
    rot = eye + sa[..., None, None] * k + a[..., None, None] * kk
    vmat = eye + a[..., None, None] * k + b[..., None, None] * kk
    trans = np.einsum("...ij,...j->...i", vmat, v)
    return rot, trans


def quats_to_matrices(quats: np.ndarray) -> np.ndarray:
    """``(N, 4)`` ``(w, x, y, z)`` quaternions -> ``(N, 3, 3)`` matrices."""
    q = np.asarray(quats, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - z * w)
    out[..., 0, 2] = 2 * (x * z + y * w)
    out[..., 1, 0] = 2 * (x * y + z * w)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - x * w)
    out[..., 2, 0] = 2 * (x * z - y * w)
    out[..., 2, 1] = 2 * (y * z + x * w)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


# ----------------------------------------------------------------------------
# TUM trajectory files: ``t x y z qx qy qz qw`` per line.


def format_tum_line(stamp: float, pose: Se3Pose) -> str:
    x, y, z = pose.translation
    qx, qy, qz, qw = pose.rotation.xyzw
    return f"{stamp:.9f} {x:.17g} {y:.17g} {z:.17g} {qx:.17g} {qy:.17g} {qz:.17g} {qw:.17g}"


def write_tum(path, stamps: Sequence[float], poses: Iterable[Se3Pose], header: str | None = None):
    lines = []
    if header:
        lines.extend("# " + line for line in header.splitlines())
    lines.extend(format_tum_line(t, p) for t, p in zip(stamps, poses))
    Path(path).write_text("\n".join(lines) + "\n")


def read_tum(path) -> tuple[np.ndarray, list[Se3Pose]]:
    stamps, poses = [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        t, x, y, z, qx, qy, qz, qw = map(float, parts)
        stamps.append(t)
        poses.append(Se3Pose(Rotation.from_xyzw(qx, qy, qz, qw), [x, y, z]))
    return np.array(stamps), poses


def read_tum_arrays(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stamps ``(N,)``, positions ``(N, 3)`` and ``(w, x, y, z)`` quaternions ``(N, 4)``."""
    data = np.loadtxt(path, comments="#", ndmin=2)
    if data.size == 0:
        return np.zeros(0), np.zeros((0, 3)), np.zeros((0, 4))
    quats = data[:, [7, 4, 5, 6]]
    return data[:, 0], data[:, 1:4], quats


def so3_log_batch(mats: np.ndarray) -> np.ndarray:
    """Rotation vectors of a stack of rotation matrices ``(N, 3, 3)``."""
    mats = np.asarray(mats, dtype=float)
    w = 0.5 * np.stack(
        [mats[:, 2, 1] - mats[:, 1, 2], mats[:, 0, 2] - mats[:, 2, 0], mats[:, 1, 0] - mats[:, 0, 1]], axis=1
    )
    s = np.linalg.norm(w, axis=1)
    c = 0.5 * (np.trace(mats, axis1=1, axis2=2) - 1.0)
    theta = np.arctan2(s, c)
    small = s < SMALL_ANGLE
    scale = np.where(small, 1.0 + theta * theta / 6.0, theta / np.where(small, 1.0, s))
    out = w * scale[:, None]
    # Near a half-turn the antisymmetric part vanishes; take the quaternion route.
    for k in np.nonzero(c < -0.99)[0]:
        out[k] = rot_log(Rotation.from_matrix(mats[k]))
    return out


def right_jacobian_inverse_batch(phis: np.ndarray) -> np.ndarray:
    """``Jr^-1`` for a stack of rotation vectors ``(N, 3)``."""
    phis = np.asarray(phis, dtype=float)
    theta = np.linalg.norm(phis, axis=1)
    small = theta < 1e-2
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    c = np.where(small, 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0, (1.0 - 0.5 * t / np.tan(0.5 * t)) / (t * t))
    k = skew_batch(phis)
    return np.eye(3) + 0.5 * k + c[:, None, None] * (k @ k)
