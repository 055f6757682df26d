"""Synthetic worlds and sensor streams with exact ground truth.

A world is a set of finite planes (the ground) and axis-aligned boxes
(buildings). The vehicle follows a cumulative cubic SE(3) spline,
so IMU readings come from analytic derivatives and every LiDAR ray is cast
from the true sensor pose at its own emission time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .features import PointCloudFrame
from .geo import EnuAnchor, EnuPoint, GeoLla, enu_to_lla
from .geom import Rotation, Se3Pose, rot_exp
from .imu import STANDARD_GRAVITY, ImuBias, ImuNoiseModel, ImuSeries
from .spline import UniformSe3Spline

RNG_ALGORITHM = "numpy.random.PCG64"

LABEL_GROUND = 0
LABEL_SURFACE = 1
LABEL_EDGE = 2
LABEL_NONE = -1


@dataclass(frozen=True)
class Plane:
    point: tuple[float, float, float]
    normal: tuple[float, float, float]
    half_extent: float = 1e4
    is_ground: bool = True


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self):
        if not all(h > l for l, h in zip(self.lo, self.hi)):
            raise ValueError("box extents must be positive")

    def vertical_edges(self) -> np.ndarray:
        (x0, y0, z0), (x1, y1, z1) = self.lo, self.hi
        return np.array(
            [[[x, y, z0], [x, y, z1]] for x, y in ((x0, y0), (x1, y0), (x1, y1), (x0, y1))]
        )


@dataclass(frozen=True)
class WorldModel:
    planes: tuple[Plane, ...]
    boxes: tuple[Box, ...]
    anchor: GeoLla
    name: str = "custom"

    @property
    def edges(self) -> np.ndarray:
        """Vertical box edges as ``(E, 2, 3)`` segment endpoints."""
        if not self.boxes:
            return np.zeros((0, 2, 3))
        return np.concatenate([b.vertical_edges() for b in self.boxes])


DEFAULT_ANCHOR = GeoLla.from_degrees(31.2304, 121.4737, 4.0)


@dataclass(frozen=True)
class WorldSpec:
    kind: str = "empty"
    width: float = 310.0
    height: float = 210.0
    corner_radius: float = 20.0
    seed: int = 7
    anchor: GeoLla = DEFAULT_ANCHOR


def _ground() -> Plane:
    return Plane((0.0, 0.0, 0.0), (0.0, 0.0, 1.0))


def _street_boxes(a: np.ndarray, b: np.ndarray, margin: float, rng) -> list[Box]:
    """Buildings along both sides of the straight street ``a -> b``."""
    d = b - a
    length = float(np.linalg.norm(d))
    u = d / length
    n = np.array([-u[1], u[0]])
    out: list[Box] = []

    def footprint(s0, s1, o0, o1, z1):
        corners = np.array([a + u * s + n * o for s in (s0, s1) for o in (o0, o1)])
        lo = corners.min(axis=0)
        hi = corners.max(axis=0)
        out.append(Box((float(lo[0]), float(lo[1]), 0.0), (float(hi[0]), float(hi[1]), float(z1))))

    for side in (1.0, -1.0):
        s = margin + rng.uniform(0.0, 5.0)
        while True:
            size = rng.uniform(8.0, 22.0)
            if s + size > length - margin:
                break
            setback = rng.uniform(8.0, 12.0)
            depth = rng.uniform(8.0, 16.0)
            z1 = rng.uniform(6.0, 22.0)
            o0, o1 = sorted((side * setback, side * (setback + depth)))
            footprint(s, s + size, o0, o1, z1)
            s += size + rng.uniform(3.0, 9.0)
    return out


def generate_world(spec: WorldSpec = WorldSpec()) -> WorldModel:
    """Deterministic world for ``spec``.

    ``"empty"`` and ``"open-harbor"`` are a bare ground plane. ``"box-street"``
    lines the four straight sides of a ``width`` x ``height`` rounded
    rectangle (lower-left corner at the origin) with buildings.
    """
    if spec.kind in ("empty", "open-harbor"):
        return WorldModel((_ground(),), (), spec.anchor, spec.kind)
    if spec.kind != "box-street":
        raise ValueError(f"unknown world kind {spec.kind!r}")
    rng = np.random.default_rng(spec.seed)
    w, h = spec.width, spec.height
    corners = [np.array(c, dtype=float) for c in ((0, 0), (w, 0), (w, h), (0, h))]
    margin = spec.corner_radius + 14.0
    boxes: list[Box] = []
    for k in range(4):
        boxes += _street_boxes(corners[k], corners[(k + 1) % 4], margin, rng)
    # Blocks on the outside and inside of every corner.
    rc = spec.corner_radius
    for cx, cy in corners:
        sx = 1.0 if cx == 0 else -1.0
        sy = 1.0 if cy == 0 else -1.0
        for near, far in ((-26.0, -9.0), (rc - 6.0, rc + 8.0)):
            xs = sorted((cx + sx * near, cx + sx * far))
            ys = sorted((cy + sy * near, cy + sy * far))
            z1 = float(rng.uniform(8.0, 20.0))
            boxes.append(Box((xs[0], ys[0], 0.0), (xs[1], ys[1], z1)))
    return WorldModel((_ground(),), tuple(boxes), spec.anchor, spec.kind)


# --------------------------------------------------------------------------- trajectory


def _rounded_rectangle(w: float, h: float, rc: float):
    """Arc-length parameterisation of a counter-clockwise rounded rectangle
    starting at ``(rc, 0)`` heading east. Returns ``(perimeter, f)`` with
    ``f(s) -> (x, y, yaw)`` for arrays of ``s``."""
    straights = [w - 2 * rc, h - 2 * rc, w - 2 * rc, h - 2 * rc]
    arc = 0.5 * math.pi * rc
    pieces = []
    s0 = 0.0
    start = np.array([rc, 0.0])
    yaw = 0.0
    for k in range(4):
        pieces.append(("line", s0, straights[k], start.copy(), yaw))
        start = start + straights[k] * np.array([math.cos(yaw), math.sin(yaw)])
        s0 += straights[k]
        centre = start + rc * np.array([-math.sin(yaw), math.cos(yaw)])
        pieces.append(("arc", s0, arc, centre, yaw))
        yaw += 0.5 * math.pi
        start = centre + rc * np.array([math.sin(yaw), -math.cos(yaw)])
        s0 += arc
    perimeter = s0

    def f(s):
        s = np.asarray(s, dtype=float)
        x = np.empty_like(s)
        y = np.empty_like(s)
        th = np.empty_like(s)
        sm = np.mod(s, perimeter)
        for kind, a, length, p, yaw0 in pieces:
            sel = (sm >= a) & (sm < a + length)
            ds = sm[sel] - a
            if kind == "line":
                x[sel] = p[0] + ds * math.cos(yaw0)
                y[sel] = p[1] + ds * math.sin(yaw0)
                th[sel] = yaw0
            else:
                ang = yaw0 + ds / rc
                x[sel] = p[0] + rc * np.sin(ang)
                y[sel] = p[1] - rc * np.cos(ang)
                th[sel] = ang
        return x, y, th

    return perimeter, f


def _speed_profile(t: np.ndarray, distance: float, speed: float, accel: float, still: float):
    """Arc length travelled at times ``t``: rest, ramp up, cruise, ramp down, rest."""
    t_ramp = speed / accel
    d_ramp = 0.5 * accel * t_ramp**2
    if 2 * d_ramp > distance:
        raise ValueError("route too short for the requested speed")
    t_cruise = (distance - 2 * d_ramp) / speed
    tau = np.asarray(t, dtype=float) - still
    s = np.zeros_like(tau)
    a = (tau > 0) & (tau <= t_ramp)
    s[a] = 0.5 * accel * tau[a] ** 2
    b = (tau > t_ramp) & (tau <= t_ramp + t_cruise)
    s[b] = d_ramp + speed * (tau[b] - t_ramp)
    c = (tau > t_ramp + t_cruise) & (tau <= 2 * t_ramp + t_cruise)
    tc = tau[c] - t_ramp - t_cruise
    s[c] = d_ramp + speed * t_cruise + speed * tc - 0.5 * accel * tc**2
    d = tau > 2 * t_ramp + t_cruise
    s[d] = distance
    return s, 2 * still + 2 * t_ramp + t_cruise


@dataclass(frozen=True)
class TrajectorySpec:
    """Drive ``distance`` metres around a rounded rectangle at ``speed``.

    ``distance=None`` drives one full lap. The body (IMU) frame sits
    ``height`` metres above the ground with x forward and z up.
    """

    width: float = 310.0
    rect_height: float = 210.0
    corner_radius: float = 20.0
    speed: float = 10.0
    accel: float = 2.0
    still: float = 2.0
    distance: float | None = None
    start_offset: float = 0.0
    height: float = 1.8
    knot_interval: float = 0.1


def trajectory_controls(spec: TrajectorySpec) -> tuple[list[Se3Pose], float, float]:
    """Control poses, their first knot time and the session duration."""
    perimeter, path = _rounded_rectangle(spec.width, spec.rect_height, spec.corner_radius)
    distance = perimeter if spec.distance is None else spec.distance
    _, duration = _speed_profile(np.zeros(1), distance, spec.speed, spec.accel, spec.still)
    dt = spec.knot_interval
    n = int(math.ceil(duration / dt)) + 3
    knots = (np.arange(n) - 1) * dt
    s, _ = _speed_profile(np.maximum(knots, 0.0), distance, spec.speed, spec.accel, spec.still)
    x, y, yaw = path(s + spec.start_offset)
    controls = [
        Se3Pose(rot_exp([0.0, 0.0, float(th)]), [float(xx), float(yy), spec.height])
        for xx, yy, th in zip(x, y, yaw)
    ]
    return controls, float(knots[0]), float(math.floor(duration / dt) * dt)


# --------------------------------------------------------------------------- sensors


@dataclass(frozen=True)
class LidarConfig:
    rings: int = 16
    min_elevation_deg: float = -15.0
    max_elevation_deg: float = 15.0
    rate: float = 10.0
    points_per_ring: int = 1024
    range_noise: float = 0.01
    max_range: float = 100.0

    @property
    def scan_period(self) -> float:
        return 1.0 / self.rate

    def elevations(self) -> np.ndarray:
        return np.radians(np.linspace(self.min_elevation_deg, self.max_elevation_deg, self.rings))


@dataclass(frozen=True)
class GpsConfig:
    rate: float = 1.0
    horizontal_sigma: float = 2.0
    vertical_sigma: float = 2.0
    dropouts: tuple[tuple[float, float], ...] = ()
    enabled: bool = True


@dataclass(frozen=True)
class SimConfig:
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    imu_rate: float = 400.0
    lidar: LidarConfig = field(default_factory=LidarConfig)
    gps: GpsConfig = field(default_factory=GpsConfig)
    imu_noise: ImuNoiseModel = field(default_factory=ImuNoiseModel)
    imu_noise_enabled: bool = True
    bias: ImuBias = field(
        default_factory=lambda: ImuBias(gyro=[2e-4, -1e-4, 3e-4], accel=[0.01, -0.02, 0.015])
    )
    lidar_extrinsic: Se3Pose = field(default_factory=Se3Pose.identity)
    seed: int = 1


@dataclass
class GpsFix:
    stamp: float
    lla: GeoLla
    fix_quality: int


@dataclass
class SimDataset:
    world: WorldModel
    config: SimConfig
    spline: UniformSe3Spline
    imu: ImuSeries
    frames: list[PointCloudFrame]
    labels: list[np.ndarray]
    gps: list[GpsFix]
    gt_stamps: np.ndarray
    gt_poses: np.ndarray  # (N, 4, 4)
    duration: float

    def gt_pose(self, t: float) -> Se3Pose:
        return self.spline.evaluate(t)


def cast_rays(world: WorldModel, origins: np.ndarray, dirs: np.ndarray, max_range: float):
    """Nearest hit distance and label per ray (``inf`` / ``LABEL_NONE`` on a miss)."""
    n = len(dirs)
    best = np.full(n, np.inf)
    label = np.full(n, LABEL_NONE, dtype=np.int64)
    safe = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    for pl in world.planes:
        p0 = np.asarray(pl.point)
        nrm = np.asarray(pl.normal)
        den = safe @ nrm
        t = ((p0 - origins) @ nrm) / den
        hit = origins + t[:, None] * dirs
        inside = np.max(np.abs(hit - p0), axis=1) <= pl.half_extent
        ok = (t > 1e-6) & (t < best) & inside
        best[ok] = t[ok]
        label[ok] = LABEL_GROUND if pl.is_ground else LABEL_SURFACE
    if world.boxes:
        centre = origins.mean(axis=0)
        los = np.array([b.lo for b in world.boxes])
        his = np.array([b.hi for b in world.boxes])
        # Only boxes that can be reached from the ray origins.
        gap = np.maximum(np.maximum(los - centre, centre - his), 0.0)
        spread = float(np.max(np.linalg.norm(origins - centre, axis=1)))
        near = np.linalg.norm(gap, axis=1) <= max_range + spread
        los, his = los[near], his[near]
        ox, oy, oz = origins.T
        ix, iy, iz = (1.0 / safe).T
        for lo, hi in zip(los, his):
            ax, bx = (lo[0] - ox) * ix, (hi[0] - ox) * ix
            ay, by = (lo[1] - oy) * iy, (hi[1] - oy) * iy
            az, bz = (lo[2] - oz) * iz, (hi[2] - oz) * iz
            tmin = np.maximum(np.maximum(np.minimum(ax, bx), np.minimum(ay, by)), np.minimum(az, bz))
            tmax = np.minimum(np.minimum(np.maximum(ax, bx), np.maximum(ay, by)), np.maximum(az, bz))
            ok = (tmax >= tmin) & (tmin > 1e-6) & (tmin < best)
            if not ok.any():
                continue
            best[ok] = tmin[ok]
            hit = origins[ok] + tmin[ok, None] * dirs[ok]
            dx = np.minimum(np.abs(hit[:, 0] - lo[0]), np.abs(hit[:, 0] - hi[0]))
            dy = np.minimum(np.abs(hit[:, 1] - lo[1]), np.abs(hit[:, 1] - hi[1]))
            label[ok] = np.where((dx < 0.1) & (dy < 0.1), LABEL_EDGE, LABEL_SURFACE)
    miss = best > max_range
    best[miss] = np.inf
    label[miss] = LABEL_NONE
    return best, label


def simulate_scan(
    world: WorldModel,
    spline: UniformSe3Spline,
    stamp: float,
    lidar: LidarConfig,
    extrinsic: Se3Pose | None = None,
    rng: np.random.Generator | None = None,
    static: bool = False,
) -> tuple[PointCloudFrame, np.ndarray]:
    """One sweep starting at ``stamp``.

    Columns fire at evenly spaced times across the scan period, sweeping the
    azimuth from -pi upward; every ring fires at once per column. With
    ``static`` the whole sweep is cast from the pose at ``stamp`` (the
    undistorted reference).
    """
    p = lidar.points_per_ring
    period = lidar.scan_period
    rel = np.arange(p) * (period / p)
    az = -math.pi + np.arange(p) * (2.0 * math.pi / p)
    el = lidar.elevations()
    times = np.full(p, stamp) if static else stamp + rel
    mats = spline.evaluate_matrices(times)
    if extrinsic is not None:
        mats = mats @ extrinsic.matrix
    ce, se = np.cos(el), np.sin(el)
    # (ring, column) layout, flattened ring-major.
    d_s = np.stack(
        [
            ce[:, None] * np.cos(az)[None, :],
            ce[:, None] * np.sin(az)[None, :],
            np.broadcast_to(se[:, None], (len(el), p)),
        ],
        axis=-1,
    ).reshape(-1, 3)
    col = np.tile(np.arange(p), len(el))
    ring = np.repeat(np.arange(len(el)), p)
    rot = mats[col, :3, :3]
    origins = mats[col, :3, 3]
    dirs = np.einsum("nij,nj->ni", rot, d_s)
    dist, label = cast_rays(world, origins, dirs, lidar.max_range)
    hit = np.isfinite(dist)
    rng_noise = np.zeros(len(dist))
    if rng is not None and lidar.range_noise > 0:
        rng_noise = rng.normal(0.0, lidar.range_noise, len(dist))
    r = dist[hit] + rng_noise[hit]
    pts = d_s[hit] * r[:, None]
    frame = PointCloudFrame(
        pts,
        ring[hit],
        rel[col[hit]],
        frame_stamp=stamp,
        scan_period=period,
        ring_count=lidar.rings,
    )
    return frame, label[hit]


def simulate_imu(spline: UniformSe3Spline, stamps: np.ndarray, config: SimConfig, rng) -> ImuSeries:
    mats, omega, _, acc = spline.derivatives(stamps)
    g = np.array([0.0, 0.0, -STANDARD_GRAVITY])
    rot = mats[:, :3, :3]
    spec_force = np.einsum("nji,nj->ni", rot, acc - g)
    gyro = omega + config.bias.gyro
    accel = spec_force + config.bias.accel
    if config.imu_noise_enabled:
        sq = math.sqrt(config.imu_rate)
        gyro = gyro + rng.normal(0.0, config.imu_noise.gyro_noise_density * sq, gyro.shape)
        accel = accel + rng.normal(0.0, config.imu_noise.accel_noise_density * sq, accel.shape)
    return ImuSeries(stamps, gyro, accel)


def simulate_gps(spline: UniformSe3Spline, duration: float, world: WorldModel, cfg: GpsConfig, rng):
    anchor = EnuAnchor.from_lla(world.anchor)
    n = int(math.floor(duration * cfg.rate + 1e-9)) + 1
    stamps = np.arange(n) / cfg.rate
    mats = spline.evaluate_matrices(stamps)
    noise = rng.normal(0.0, 1.0, (n, 3)) * np.array(
        [cfg.horizontal_sigma, cfg.horizontal_sigma, cfg.vertical_sigma]
    )
    fixes = []
    for t, m, e in zip(stamps, mats, noise):
        p = m[:3, 3] + e
        quality = 1
        if any(a <= t < b for a, b in cfg.dropouts):
            quality = 0
        fixes.append(GpsFix(float(t), enu_to_lla(EnuPoint(*map(float, p)), anchor), quality))
    return fixes


def simulate_dataset(world: WorldModel, config: SimConfig) -> SimDataset:
    """Every sensor stream for one session, drawn from a single seeded generator.

    Draw order is fixed (IMU noise, then scans in time order, then GPS), so
    a seed pins the dataset exactly.
    """
    controls, t0, duration = trajectory_controls(config.trajectory)
    spline = UniformSe3Spline(controls, t0, config.trajectory.knot_interval)
    if not spline.covers(0.0, duration):
        raise ValueError("trajectory spline does not cover the session")
    rng = np.random.default_rng(config.seed)
    n_imu = int(math.floor(duration * config.imu_rate + 1e-9)) + 1
    stamps = np.arange(n_imu) / config.imu_rate
    imu = simulate_imu(spline, stamps, config, rng)
    frames, labels = [], []
    period = config.lidar.scan_period
    n_frames = int(math.floor((duration - period) / period + 1e-9)) + 1
    for k in range(n_frames):
        f, lab = simulate_scan(
            world, spline, k * period, config.lidar, config.lidar_extrinsic, rng
        )
        frames.append(f)
        labels.append(lab)
    gps = simulate_gps(spline, duration, world, config.gps, rng) if config.gps.enabled else []
    gt_poses = spline.evaluate_matrices(stamps)
    return SimDataset(world, config, spline, imu, frames, labels, gps, stamps, gt_poses, duration)


# --------------------------------------------------------------------------- scenarios


def box_street_scenario(seed: int = 1, **overrides) -> tuple[WorldModel, SimConfig]:
    """One ~1 km lap of the box-street world at 10 m/s."""
    world = generate_world(WorldSpec("box-street"))
    traj = overrides.pop("trajectory", TrajectorySpec())
    cfg = SimConfig(trajectory=traj, seed=seed)
    return world, replace(cfg, **overrides)


def open_harbor_scenario(seed: int = 1, **overrides) -> tuple[WorldModel, SimConfig]:
    """A 400 m drive over the featureless harbor apron."""
    world = generate_world(WorldSpec("open-harbor"))
    traj = overrides.pop(
        "trajectory", TrajectorySpec(width=200.0, rect_height=120.0, distance=400.0, speed=8.0)
    )
    cfg = SimConfig(trajectory=traj, seed=seed)
    return world, replace(cfg, **overrides)


SCENARIOS = {"box-street": box_street_scenario, "open-harbor": open_harbor_scenario}


# --------------------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class AteStats:
    max: float
    min: float
    mean: float
    sd: float
    count: int

    def table_row(self, label: str) -> str:
        return f"{label:<16} {self.max:8.4f} {self.min:8.4f} {self.mean:8.4f} {self.sd:8.4f}"


ATE_HEADER = f"{'dataset':<16} {'max':>8} {'min':>8} {'mean':>8} {'sd':>8}"


def evaluate_trajectory(
    est_stamps, est_positions, gt_stamps, gt_positions
) -> AteStats:
    """Translation error statistics at the ground-truth stamps inside the estimate's span.

    The estimate is linearly interpolated; no alignment is applied.
    """
    est_stamps = np.asarray(est_stamps, dtype=float)
    est_positions = np.asarray(est_positions, dtype=float).reshape(-1, 3)
    gt_stamps = np.asarray(gt_stamps, dtype=float)
    gt_positions = np.asarray(gt_positions, dtype=float).reshape(-1, 3)
    if len(est_stamps) == 0 or len(gt_stamps) == 0:
        raise ValueError("empty trajectory")
    sel = (gt_stamps >= est_stamps[0]) & (gt_stamps <= est_stamps[-1])
    if not np.any(sel):
        raise ValueError("estimate and ground truth do not overlap in time")
    t = gt_stamps[sel]
    est = np.column_stack([np.interp(t, est_stamps, est_positions[:, k]) for k in range(3)])
    err = np.linalg.norm(est - gt_positions[sel], axis=1)
    return AteStats(float(err.max()), float(err.min()), float(err.mean()), float(err.std()), len(err))


# --------------------------------------------------------------------------- persistence


def write_dataset(ds: SimDataset, path, extra_header: dict | None = None) -> None:
    """Write the on-disk layout consumed by the pipeline."""
    from .dataset import write_dataset_files

    write_dataset_files(ds, Path(path), extra_header or {})
