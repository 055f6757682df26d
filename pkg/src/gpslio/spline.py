"""Uniform cumulative cubic B-splines on SE(3) and scan undistortion.

A segment blends four control poses ``T_i .. T_{i+3}``::

    T(t) = T_i * exp(B1 * log(T_i^-1 T_{i+1}))
               * exp(B2 * log(T_{i+1}^-1 T_{i+2}))
               * exp(B3 * log(T_{i+2}^-1 T_{i+3}))

with ``u = (t - t_{i+1}) / dt`` and the cumulative coefficients from
:func:`cumulative_basis`.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np

from .geom import Se3Pose, Twist, pose_exp, pose_log, se3_exp_batch, skew_batch

# Printed basis matrix; cumulative coefficients are [1 u u^2 u^3] @ M / 6.
BASIS_MATRIX = np.array(
    [
        [6.0, 5.0, 1.0, 0.0],
        [0.0, 3.0, 3.0, 0.0],
        [0.0, -3.0, 3.0, 0.0],
        [0.0, 1.0, -2.0, 1.0],
    ]
)


class CumulativeBasis(NamedTuple):
    b0: float
    b1: float
    b2: float
    b3: float


def _basis(u):
    u2 = u * u
    u3 = u2 * u
    return (
        (5.0 + 3.0 * u - 3.0 * u2 + u3) / 6.0,
        (1.0 + 3.0 * u + 3.0 * u2 - 2.0 * u3) / 6.0,
        u3 / 6.0,
    )


def _basis_du(u):
    u2 = u * u
    return (3.0 - 6.0 * u + 3.0 * u2) / 6.0, (3.0 + 6.0 * u - 6.0 * u2) / 6.0, 0.5 * u2


def _basis_du2(u):
    return u - 1.0, 1.0 - 2.0 * u, u


def cumulative_basis(u: float) -> CumulativeBasis:
    if not 0.0 <= u < 1.0:
        raise ValueError(f"spline parameter u={u} outside [0, 1)")
    b1, b2, b3 = _basis(float(u))
    return CumulativeBasis(1.0, b1, b2, b3)


@dataclass(frozen=True)
class SplineSegment:
    control: tuple[Se3Pose, Se3Pose, Se3Pose, Se3Pose]
    knot_stamp: float
    knot_interval: float

    def __post_init__(self):
        if len(self.control) != 4:
            raise ValueError("a segment needs exactly four control poses")
        if not self.knot_interval > 0.0:
            raise ValueError("knot interval must be positive")
        object.__setattr__(self, "control", tuple(self.control))

    def relative_twists(self) -> np.ndarray:
        c = self.control
        return np.array([pose_log(c[k].inverse() * c[k + 1]).vector() for k in range(3)])

    def contains(self, t: float) -> bool:
        return self.knot_stamp <= t < self.knot_stamp + self.knot_interval


def interpolate_pose(seg: SplineSegment, t: float) -> Se3Pose:
    if not seg.contains(t):
        raise ValueError(
            f"t={t} outside segment [{seg.knot_stamp}, {seg.knot_stamp + seg.knot_interval})"
        )
    u = (t - seg.knot_stamp) / seg.knot_interval
    basis = cumulative_basis(u)
    return _blend(seg.control[0], seg.relative_twists(), basis[1:])


def _blend(first: Se3Pose, twists: np.ndarray, coeffs) -> Se3Pose:
    out = first
    for xi, b in zip(twists, coeffs):
        out = out * pose_exp(Twist.from_vector(b * xi))
    return out


def _segment_batch(base: np.ndarray, twists: np.ndarray, u: np.ndarray):
    """Evaluate one segment at many ``u``. Returns ``(N, 4, 4)`` matrices."""
    coeffs = _basis(u)
    out = np.broadcast_to(base, (len(u), 4, 4)).copy()
    for k in range(3):
        rot, trans = se3_exp_batch(coeffs[k][:, None] * twists[k][None, :])
        step = np.zeros((len(u), 4, 4))
        step[:, :3, :3] = rot
        step[:, :3, 3] = trans
        step[:, 3, 3] = 1.0
        out = out @ step
    return out


def _hat(xi: np.ndarray) -> np.ndarray:
    m = np.zeros(xi.shape[:-1] + (4, 4))
    m[..., :3, :3] = skew_batch(xi[..., :3])
    m[..., :3, 3] = xi[..., 3:]
    return m


class UniformSe3Spline:
    """Cumulative cubic spline over uniformly spaced control poses.

    Control pose ``k`` sits at ``t0 + k * dt``; segment ``i`` spans
    ``[t0 + (i+1) dt, t0 + (i+2) dt)``. Use :meth:`clamped` to build a spline
    whose domain covers every supplied pose stamp.
    """

    def __init__(self, controls: Sequence[Se3Pose], t0: float, dt: float):
        if len(controls) < 4:
            raise ValueError("a spline needs at least four control poses")
        if not dt > 0.0:
            raise ValueError("knot interval must be positive")
        self.controls = list(controls)
        self.t0 = float(t0)
        self.dt = float(dt)
        self._mats = np.array([c.matrix for c in self.controls])
        n = len(self.controls)
        twists = np.zeros((n - 1, 6))
        for k in range(n - 1):
            twists[k] = pose_log(self.controls[k].inverse() * self.controls[k + 1]).vector()
        self._twists = twists

    @classmethod
    def clamped(cls, poses: Sequence[Se3Pose], t_first: float, dt: float) -> "UniformSe3Spline":
        """Duplicate the terminal poses so the domain is ``[t_first, t_last]``."""
        poses = list(poses)
        if len(poses) < 2:
            raise ValueError("need at least two poses")
        return cls([poses[0]] + poses + [poses[-1]], t_first - dt, dt)

    @property
    def start(self) -> float:
        return self.t0 + self.dt

    @property
    def end(self) -> float:
        return self.t0 + (len(self.controls) - 2) * self.dt

    def covers(self, t0: float, t1: float) -> bool:
        return t0 >= self.start - 1e-9 and t1 <= self.end + 1e-9

    def segment(self, i: int) -> SplineSegment:
        return SplineSegment(
            tuple(self.controls[i : i + 4]), self.t0 + (i + 1) * self.dt, self.dt
        )

    def _locate(self, times: np.ndarray):
        times = np.asarray(times, dtype=float)
        if np.any(times < self.start - 1e-9) or np.any(times > self.end + 1e-9):
            raise ValueError(
                f"times outside spline domain [{self.start}, {self.end}]"
            )
        s = (times - self.t0) / self.dt - 1.0
        nseg = len(self.controls) - 3
        idx = np.clip(np.floor(s).astype(int), 0, nseg - 1)
        u = np.clip(s - idx, 0.0, 1.0)
        return idx, u

    def evaluate_matrices(self, times) -> np.ndarray:
        """Poses at ``times`` as ``(N, 4, 4)`` homogeneous matrices."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        idx, u = self._locate(times)
        out = np.empty((len(times), 4, 4))
        for i in np.unique(idx):
            sel = idx == i
            out[sel] = _segment_batch(self._mats[i], self._twists[i : i + 3], u[sel])
        return out

    def evaluate(self, t: float) -> Se3Pose:
        return Se3Pose.from_matrix(self.evaluate_matrices([t])[0])

    def derivatives(self, times):
        """Matrices, body angular velocity, world velocity and world acceleration."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        idx, u = self._locate(times)
        n = len(times)
        mats = np.empty((n, 4, 4))
        omega = np.empty((n, 3))
        vel = np.empty((n, 3))
        acc = np.empty((n, 3))
        inv_dt = 1.0 / self.dt
        for i in np.unique(idx):
            sel = idx == i
            uu = u[sel]
            m = len(uu)
            b = _basis(uu)
            db = [d * inv_dt for d in _basis_du(uu)]
            ddb = [d * inv_dt * inv_dt for d in _basis_du2(uu)]
            a, da, dda = [], [], []
            for k in range(3):
                xi = self._twists[i + k]
                rot, trans = se3_exp_batch(b[k][:, None] * xi[None, :])
                ak = np.zeros((m, 4, 4))
                ak[:, :3, :3] = rot
                ak[:, :3, 3] = trans
                ak[:, 3, 3] = 1.0
                h = _hat(xi)
                a.append(ak)
                da.append(ak @ (db[k][:, None, None] * h))
                dda.append(
                    ak @ ((db[k] ** 2)[:, None, None] * (h @ h) + ddb[k][:, None, None] * h)
                )
            base = self._mats[i]
            t_mat = base @ a[0] @ a[1] @ a[2]
            d1 = base @ (da[0] @ a[1] @ a[2] + a[0] @ da[1] @ a[2] + a[0] @ a[1] @ da[2])
            d2 = base @ (
                dda[0] @ a[1] @ a[2]
                + a[0] @ dda[1] @ a[2]
                + a[0] @ a[1] @ dda[2]
                + 2.0 * (da[0] @ da[1] @ a[2] + da[0] @ a[1] @ da[2] + a[0] @ da[1] @ da[2])
            )
            r = t_mat[:, :3, :3]
            w_hat = np.swapaxes(r, 1, 2) @ d1[:, :3, :3]
            mats[sel] = t_mat
            omega[sel] = np.stack([w_hat[:, 2, 1], w_hat[:, 0, 2], w_hat[:, 1, 0]], axis=1)
            vel[sel] = d1[:, :3, 3]
            acc[sel] = d2[:, :3, 3]
        return mats, omega, vel, acc


def undistort_scan(frame, spline: UniformSe3Spline, reference_time: float, extrinsic: Se3Pose | None = None):
    """Re-express every point of ``frame`` in the sensor pose at ``reference_time``.

    ``spline`` describes the body trajectory; ``extrinsic`` is the sensor
    pose in the body frame (identity when omitted).
    """
    times = frame.frame_stamp + frame.relative_time
    if len(times) == 0:
        return frame
    t_lo = min(float(times.min()), reference_time)
    t_hi = max(float(times.max()), reference_time)
    if not spline.covers(t_lo, t_hi):
        raise ValueError(
            f"spline [{spline.start}, {spline.end}] does not cover scan span [{t_lo}, {t_hi}]"
        )
    uniq, inverse = np.unique(times, return_inverse=True)
    mats = spline.evaluate_matrices(np.concatenate([[reference_time], uniq]))
    if extrinsic is not None:
        ext = extrinsic.matrix
        mats = mats @ ext
    ref_inv = np.linalg.inv(mats[0])
    rel = ref_inv @ mats[1:]
    rel_pt = rel[inverse]
    pts = np.einsum("nij,nj->ni", rel_pt[:, :3, :3], frame.points) + rel_pt[:, :3, 3]
    # Points stamped exactly at the reference keep their coordinates.
    same = times == reference_time
    if np.any(same):
        pts[same] = frame.points[same]
    return replace(frame, points=pts)
