"""Strapdown prediction and preintegrated IMU factors.

Discretisation shared by prediction and preintegration: over each interval
between consecutive samples the rotation advances with the mean of the two
gyro readings (midpoint rule) while velocity and position use the
accelerometer reading at the start of the interval (Euler). Because both
paths share the same discrete steps, a preintegrated factor applied to a
start state reproduces :func:`predict_state` to rounding error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence, Union

import numpy as np

from .geom import Rotation, Se3Pose, rot_log, so3_exp_batch

STANDARD_GRAVITY = 9.80665


@dataclass(frozen=True)
class ImuSample:
    stamp: float
    angular_velocity: np.ndarray
    acceleration: np.ndarray


@dataclass(frozen=True, eq=False)
class ImuBias:
    gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("gyro", "accel"):
            v = np.array(getattr(self, name), dtype=float).reshape(3)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"bias {name} must be finite")
            v.flags.writeable = False
            object.__setattr__(self, name, v)

    def is_plausible(self, max_gyro: float = 1.0, max_accel: float = 5.0) -> bool:
        return bool(np.linalg.norm(self.gyro) < max_gyro and np.linalg.norm(self.accel) < max_accel)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.gyro, self.accel])

    def max_abs_difference(self, other: "ImuBias") -> float:
        return float(np.max(np.abs(self.vector() - other.vector())))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ImuBias):
            return NotImplemented
        return bool(np.array_equal(self.gyro, other.gyro) and np.array_equal(self.accel, other.accel))

    __hash__ = None


@dataclass(frozen=True)
class ImuNoiseModel:
    gyro_noise_density: float = 1.7e-4
    accel_noise_density: float = 2e-3
    gyro_bias_walk: float = 1e-5
    accel_bias_walk: float = 1e-4

    def __post_init__(self):
        for name in ("gyro_noise_density", "accel_noise_density", "gyro_bias_walk", "accel_bias_walk"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")


@dataclass(frozen=True, eq=False)
class GravityVector:
    vector: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -STANDARD_GRAVITY]))

    def __post_init__(self):
        v = np.array(self.vector, dtype=float).reshape(3)
        v.flags.writeable = False
        object.__setattr__(self, "vector", v)

    def is_plausible(self) -> bool:
        return 9.7 <= float(np.linalg.norm(self.vector)) <= 9.9


@dataclass(frozen=True, eq=False)
class NavState:
    pose: Se3Pose
    velocity: np.ndarray
    bias: ImuBias = field(default_factory=ImuBias)
    stamp: float = 0.0

    def __post_init__(self):
        v = np.array(self.velocity, dtype=float).reshape(3)
        if not np.all(np.isfinite(v)):
            raise ValueError("velocity must be finite")
        v.flags.writeable = False
        object.__setattr__(self, "velocity", v)
        if not (math.isfinite(self.stamp) and self.stamp >= 0.0):
            raise ValueError(f"stamp must be finite and non-negative, got {self.stamp}")

    @property
    def rotation(self) -> Rotation:
        return self.pose.rotation

    @property
    def position(self) -> np.ndarray:
        return self.pose.translation

    def __eq__(self, other) -> bool:
        if not isinstance(other, NavState):
            return NotImplemented
        return (
            self.pose == other.pose
            and np.array_equal(self.velocity, other.velocity)
            and self.bias == other.bias
            and self.stamp == other.stamp
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class PreintegratedImu:
    delta_rotation: Rotation
    delta_velocity: np.ndarray
    delta_position: np.ndarray
    duration: float
    bias_reference: ImuBias
    information: np.ndarray
    start_stamp: float = 0.0

    def __eq__(self, other) -> bool:
        if not isinstance(other, PreintegratedImu):
            return NotImplemented
        return (
            self.delta_rotation == other.delta_rotation
            and np.array_equal(self.delta_velocity, other.delta_velocity)
            and np.array_equal(self.delta_position, other.delta_position)
            and self.duration == other.duration
            and self.bias_reference == other.bias_reference
            and np.array_equal(self.information, other.information)
            and self.start_stamp == other.start_stamp
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ImuSeries:
    """Column-oriented IMU stream: stamps ``(N,)``, gyro and accel ``(N, 3)``."""

    stamps: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        stamps = np.asarray(self.stamps, dtype=float).reshape(-1)
        gyro = np.asarray(self.gyro, dtype=float).reshape(-1, 3)
        accel = np.asarray(self.accel, dtype=float).reshape(-1, 3)
        if not (len(stamps) == len(gyro) == len(accel)):
            raise ValueError("stamps, gyro and accel must have equal length")
        object.__setattr__(self, "stamps", stamps)
        object.__setattr__(self, "gyro", gyro)
        object.__setattr__(self, "accel", accel)

    def __len__(self) -> int:
        return len(self.stamps)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return ImuSeries(self.stamps[idx], self.gyro[idx], self.accel[idx])
        return ImuSample(float(self.stamps[idx]), self.gyro[idx].copy(), self.accel[idx].copy())

    @classmethod
    def from_samples(cls, samples: Sequence[ImuSample]) -> "ImuSeries":
        if not samples:
            return cls(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)))
        return cls(
            np.array([s.stamp for s in samples]),
            np.array([s.angular_velocity for s in samples]),
            np.array([s.acceleration for s in samples]),
        )

    def samples(self) -> list[ImuSample]:
        return [self[i] for i in range(len(self))]

    def window(self, t0: float, t1: float) -> "ImuSeries":
        """Samples covering ``[t0, t1]``, with linearly interpolated end samples
        inserted when no sample falls exactly on a boundary."""
        if t1 <= t0:
            raise ValueError("window must have positive length")
        s = self.stamps
        if len(s) == 0 or t0 < s[0] - 1e-9 or t1 > s[-1] + 1e-9:
            raise ValueError(f"IMU stream does not cover [{t0}, {t1}]")
        lo = int(np.searchsorted(s, t0 - 1e-9, side="left"))
        hi = int(np.searchsorted(s, t1 + 1e-9, side="right"))
        stamps = list(s[lo:hi])
        gyro = list(self.gyro[lo:hi])
        accel = list(self.accel[lo:hi])
        if not stamps or abs(stamps[0] - t0) > 1e-9:
            stamps.insert(0, t0)
            gyro.insert(0, self._interp(self.gyro, t0))
            accel.insert(0, self._interp(self.accel, t0))
        else:
            stamps[0] = t0
        if abs(stamps[-1] - t1) > 1e-9:
            stamps.append(t1)
            gyro.append(self._interp(self.gyro, t1))
            accel.append(self._interp(self.accel, t1))
        else:
            stamps[-1] = t1
        return ImuSeries(np.array(stamps), np.array(gyro), np.array(accel))

    def _interp(self, values: np.ndarray, t: float) -> np.ndarray:
        return np.array([np.interp(t, self.stamps, values[:, k]) for k in range(3)])


ImuInput = Union[ImuSeries, Sequence[ImuSample]]


def as_series(samples: ImuInput) -> ImuSeries:
    if isinstance(samples, ImuSeries):
        return samples
    return ImuSeries.from_samples(list(samples))


def _gravity(g) -> np.ndarray:
    if isinstance(g, GravityVector):
        return g.vector
    return np.asarray(g, dtype=float).reshape(3)


def _check_stamps(stamps: np.ndarray, minimum: int):
    if len(stamps) < minimum:
        raise ValueError(f"need at least {minimum} IMU samples, got {len(stamps)}")
    if not np.all(np.isfinite(stamps)):
        raise ValueError("IMU stamps must be finite")
    if np.any(np.diff(stamps) <= 0.0):
        raise ValueError("IMU stamps must be strictly increasing")


def _increments(series: ImuSeries, bias: ImuBias, lead: float | None = None):
    """Per-interval (dt, accel, rotation increment) for the shared scheme.

    ``lead`` prepends an interval from ``lead`` to the first sample, driven by
    the first sample alone.
    """
    stamps = series.stamps
    gyro = series.gyro - bias.gyro
    accel = series.accel - bias.accel
    dts = np.diff(stamps)
    w_mid = 0.5 * (gyro[:-1] + gyro[1:])
    acc = accel[:-1]
    if lead is not None and stamps[0] > lead:
        dts = np.concatenate([[stamps[0] - lead], dts])
        w_mid = np.vstack([gyro[:1], w_mid])
        acc = np.vstack([accel[:1], acc])
    rot_inc = so3_exp_batch(w_mid * dts[:, None])
    return dts, acc, rot_inc


def predict_state(start: NavState, samples: ImuInput, gravity) -> NavState:
    """Dead-reckon ``start`` forward through ``samples``.

    Noise terms are zero at prediction time; the biases of ``start`` are
    subtracted from every reading. The returned state carries the stamp of
    the last sample.
    """
    series = as_series(samples)
    _check_stamps(series.stamps, 1)
    if series.stamps[0] < start.stamp - 1e-12:
        raise ValueError("first IMU sample precedes the start state")
    g = _gravity(gravity)
    dts, acc, rot_inc = _increments(series, start.bias, lead=start.stamp)
    r = start.pose.rotation.matrix.copy()
    p = start.pose.translation.copy()
    v = start.velocity.copy()
    for dt, a_body, d_r in zip(dts, acc, rot_inc):
        a = r @ a_body + g
        p = p + v * dt + 0.5 * a * dt * dt
        v = v + a * dt
        r = r @ d_r
    return NavState(Se3Pose(Rotation.from_matrix(r), p), v, start.bias, float(series.stamps[-1]))


def preintegration_information(noise: ImuNoiseModel, duration: float) -> np.ndarray:
    """Diagonal 9x9 weight, blocks ordered (rotation, velocity, position)."""
    rot = 1.0 / (noise.gyro_noise_density**2 * duration)
    acc = 1.0 / (noise.accel_noise_density**2 * duration)
    return np.diag([rot] * 3 + [acc] * 3 + [acc] * 3)


def preintegrate(samples: ImuInput, bias: ImuBias, noise: ImuNoiseModel) -> PreintegratedImu:
    """Relative motion between the first and last sample, in the first sample's body frame.

    Gravity is left out; it re-enters in :func:`preintegration_residual`.
    """
    series = as_series(samples)
    _check_stamps(series.stamps, 2)
    dts, acc, rot_inc = _increments(series, bias)
    d_r = np.eye(3)
    d_v = np.zeros(3)
    d_p = np.zeros(3)
    for dt, a_body, inc in zip(dts, acc, rot_inc):
        a = d_r @ a_body
        d_p = d_p + d_v * dt + 0.5 * a * dt * dt
        d_v = d_v + a * dt
        d_r = d_r @ inc
    duration = float(series.stamps[-1] - series.stamps[0])
    return PreintegratedImu(
        delta_rotation=Rotation.from_matrix(d_r),
        delta_velocity=d_v,
        delta_position=d_p,
        duration=duration,
        bias_reference=bias,
        information=preintegration_information(noise, duration),
        start_stamp=float(series.stamps[0]),
    )


def compose_preintegrated(first: PreintegratedImu, second: PreintegratedImu) -> PreintegratedImu:
    """Chain two contiguous windows preintegrated with the same bias."""
    if first.bias_reference.max_abs_difference(second.bias_reference) > 0.0:
        raise ValueError("cannot chain factors with different bias references")
    r1 = first.delta_rotation.matrix
    cov = np.linalg.inv(first.information) + np.linalg.inv(second.information)
    info = np.linalg.inv(cov)
    info = 0.5 * (info + info.T)
    return PreintegratedImu(
        delta_rotation=first.delta_rotation * second.delta_rotation,
        delta_velocity=first.delta_velocity + r1 @ second.delta_velocity,
        delta_position=first.delta_position
        + first.delta_velocity * second.duration
        + r1 @ second.delta_position,
        duration=first.duration + second.duration,
        bias_reference=first.bias_reference,
        information=info,
        start_stamp=first.start_stamp,
    )


def apply_preintegrated(factor: PreintegratedImu, state_i: NavState, gravity) -> NavState:
    """State ``j`` implied by ``factor`` and ``state_i``."""
    g = _gravity(gravity)
    dt = factor.duration
    r_i = state_i.pose.rotation
    rot = r_i * factor.delta_rotation
    vel = state_i.velocity + g * dt + r_i.apply(factor.delta_velocity)
    pos = (
        state_i.pose.translation
        + state_i.velocity * dt
        + 0.5 * g * dt * dt
        + r_i.apply(factor.delta_position)
    )
    return NavState(Se3Pose(rot, pos), vel, state_i.bias, state_i.stamp + dt)


def preintegration_residual(
    factor: PreintegratedImu, state_i: NavState, state_j: NavState, gravity
) -> np.ndarray:
    """Stacked ``[rotation; velocity; position]`` error of ``factor`` against two states."""
    dt = factor.duration
    if abs((state_j.stamp - state_i.stamp) - dt) > 1e-6:
        raise ValueError(
            f"state stamps span {state_j.stamp - state_i.stamp} s but factor covers {dt} s"
        )
    g = _gravity(gravity)
    rt_i = state_i.pose.rotation.matrix.T
    r_err = factor.delta_rotation.inverse() * state_i.pose.rotation.inverse() * state_j.pose.rotation
    v_err = rt_i @ (state_j.velocity - state_i.velocity - g * dt) - factor.delta_velocity
    p_err = (
        rt_i
        @ (
            state_j.pose.translation
            - state_i.pose.translation
            - state_i.velocity * dt
            - 0.5 * g * dt * dt
        )
        - factor.delta_position
    )
    return np.concatenate([rot_log(r_err), v_err, p_err])


def rebase_bias(
    factor: PreintegratedImu, samples: ImuInput, new_bias: ImuBias, noise: ImuNoiseModel
) -> PreintegratedImu:
    """Recompute ``factor`` around ``new_bias`` from its original samples."""
    if new_bias == factor.bias_reference:
        return factor
    series = as_series(samples)
    if abs((series.stamps[-1] - series.stamps[0]) - factor.duration) > 1e-9:
        raise ValueError("samples do not match the factor's window")
    return preintegrate(series, new_bias, noise)


def needs_rebase(factor: PreintegratedImu, bias: ImuBias, threshold: float = 1e-4) -> bool:
    return factor.bias_reference.max_abs_difference(bias) > threshold


def initialize_gravity(
    samples: ImuInput, duration: float = 1.0, rotation: Rotation | None = None
) -> tuple[GravityVector, Rotation, ImuBias]:
    """Static initialisation from the first ``duration`` seconds.

    Returns the world gravity vector, the initial body attitude and an
    estimated bias (gyro mean; the accelerometer bias is folded into gravity).
    With ``rotation`` given the attitude is taken as known and gravity is
    expressed through it; otherwise roll and pitch are levelled against the
    mean specific force and yaw is zero.
    """
    series = as_series(samples)
    _check_stamps(series.stamps, 2)
    mask = series.stamps <= series.stamps[0] + duration + 1e-9
    f_mean = series.accel[mask].mean(axis=0)
    gyro_bias = series.gyro[mask].mean(axis=0)
    if rotation is None:
        rotation = _level_rotation(f_mean)
    g = -rotation.apply(f_mean)
    return GravityVector(g), rotation, ImuBias(gyro=gyro_bias, accel=np.zeros(3))


def _level_rotation(specific_force: np.ndarray) -> Rotation:
    # Rotate the body so that the measured specific force points along world +z.
    z_body = specific_force / np.linalg.norm(specific_force)
    x_ref = np.array([1.0, 0.0, 0.0])
    x_body = x_ref - z_body * (z_body @ x_ref)
    if np.linalg.norm(x_body) < 1e-6:
        x_ref = np.array([0.0, 1.0, 0.0])
        x_body = x_ref - z_body * (z_body @ x_ref)
    x_body /= np.linalg.norm(x_body)
    y_body = np.cross(z_body, x_body)
    # Rows are the world axes expressed in the body frame.
    return Rotation.from_matrix(np.vstack([x_body, y_body, z_body]))


def with_bias(state: NavState, bias: ImuBias) -> NavState:
    return replace(state, bias=bias)
