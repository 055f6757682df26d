"""Staged odometry pipeline: IMU prediction, deskew, registration, fusion, mapping.

Every scan becomes a graph node stamped at the end of its sweep. Per scan
the stages run in a fixed order::

    IMU prediction -> spline deskew -> features -> scan-to-map registration
      -> node + preintegration + LiDAR factors -> GPS factors -> window solve

Nodes leaving the sliding window are final; their deskewed scans are then
folded into the world map. The pipeline is a pure function of the dataset
and configuration bytes.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli_w

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .dataset import Dataset, _plain, load_dataset
from .features import FeatureConfig, FeatureSet, extract_features, extract_target_features, segment_ground
from .geo import EnuAnchor, GeoLla, lla_to_enu, reanchor
from .geom import Rotation, Se3Pose, rot_exp, write_tum
from .imu import (
    ImuNoiseModel,
    NavState,
    initialize_gravity,
    predict_state,
    preintegrate,
)
from .mapping import MapCloud, Session, insert_scan, merge_map, save_session
from .posegraph import (
    GpsFactor,
    PoseGraph,
    PreintegrationFactor,
    SlidingWindow,
    SolverConfig,
    add_factor,
    add_state_node,
    associate_gps,
    detect_loop_candidates,
    gps_factor,
    lidar_factor,
    loop_factor,
    merge_sessions,
    optimize_window,
    verify_loop_candidate,
)
from .registration import DegenerateGeometryError, FeatureMap, RegistrationConfig, register
from .simulator import ATE_HEADER, AteStats, evaluate_trajectory
from .spline import UniformSe3Spline, undistort_scan

log = logging.getLogger(__name__)
MAP_BATCH = 10


class ConfigError(ValueError):
    pass


class RelocalizationError(RuntimeError):
    pass


# --------------------------------------------------------------------------- configuration


@dataclass(frozen=True)
class SensorConfig:
    lidar_extrinsic: Se3Pose = field(default_factory=Se3Pose.identity)
    gps_lever_arm: tuple = (0.0, 0.0, 0.0)
    sensor_height: float = 1.8


@dataclass(frozen=True)
class KeyframeConfig:
    every: int = 5
    distance: float = 0.5
    angle_deg: float = 10.0


@dataclass(frozen=True)
class LoopConfig:
    enabled: bool = True
    radius: float = 5.0
    exclusion: int = 300
    check_every: int = 10
    max_cost: float = 0.005
    crop_radius: float = 30.0


@dataclass(frozen=True)
class PipelineConfig:
    dataset: str = ""
    output: str = "out"
    sensor: SensorConfig = field(default_factory=SensorConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    solver: SolverConfig = field(
        default_factory=lambda: SolverConfig(imu_information_scale=1e-4, estimate_enu_offset=True)
    )
    imu_noise: ImuNoiseModel = field(default_factory=ImuNoiseModel)
    window_size: int = 20
    spline_knot_interval: float = 0.02
    map_voxel: float = 0.2
    target_voxel: float = 0.5
    local_map_keyframes: int = 10
    keyframe: KeyframeConfig = field(default_factory=KeyframeConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    init_duration: float = 1.0
    initial_yaw_deg: float = 0.0
    gps_tolerance: float = 0.05
    use_gps: bool = True
    use_imu_factors: bool = True
    debug_dump: bool = False

    def __post_init__(self):
        if self.window_size < 2:
            raise ConfigError("window_size must be at least 2")
        for name in ("spline_knot_interval", "map_voxel", "target_voxel", "init_duration", "gps_tolerance"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.local_map_keyframes < 1:
            raise ConfigError("local_map_keyframes must be at least 1")


def _build(cls, data, where: str):
    if cls is Se3Pose:
        try:
            return Se3Pose(Rotation.from_xyzw(*data["quaternion_xyzw"]), data["translation"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: expected translation and quaternion_xyzw ({exc})") from None
    if cls is ImuNoiseModel or dataclasses.is_dataclass(cls):
        if not isinstance(data, dict):
            raise ConfigError(f"{where}: expected a table")
        hints = typing.get_type_hints(cls)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
        kwargs = {}
        for name, value in data.items():
            kwargs[name] = _build(hints[name], value, f"{where}.{name}")
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: {exc}") from None
    origin = typing.get_origin(cls)
    if cls is tuple or origin is tuple:
        if not isinstance(data, list):
            raise ConfigError(f"{where}: expected a list")
        return tuple(float(v) for v in data)
    if cls is bool:
        if not isinstance(data, bool):
            raise ConfigError(f"{where}: expected true/false")
        return data
    if cls in (int, float):
        if isinstance(data, bool) or not isinstance(data, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        if cls is int and not float(data).is_integer():
            raise ConfigError(f"{where}: expected an integer")
        return cls(data)
    if cls is str:
        if not isinstance(data, str):
            raise ConfigError(f"{where}: expected a string")
        return data
    if origin is typing.Union:
        for arg in typing.get_args(cls):
            if arg is type(None):
                continue
            return _build(arg, data, where)
    return data


def config_from_dict(data: dict) -> PipelineConfig:
    return _build(PipelineConfig, data, "config")


def load_config(path) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data)


def config_to_toml(config: PipelineConfig) -> str:
    return tomli_w.dumps(_plain(config))


# --------------------------------------------------------------------------- results


@dataclass
class GpsAccounting:
    accepted: int = 0
    gated: int = 0
    invalid: int = 0
    unassociated: int = 0
    disabled: int = 0

    @property
    def total(self) -> int:
        return self.accepted + self.gated + self.invalid + self.unassociated + self.disabled


@dataclass
class RunResult:
    stamps: np.ndarray
    poses: list[Se3Pose]
    session: Session
    gps: GpsAccounting
    frames: int
    degenerate: int
    skipped_nodes: int
    loops: int
    ate: AteStats | None = None
    trajectory_path: Path | None = None
    session_path: Path | None = None
    report_path: Path | None = None
    debug_rows: list = field(default_factory=list)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)


# --------------------------------------------------------------------------- stages


def _knot_poses(state: NavState, imu, t_end: float, dt: float, gravity):
    """IMU-predicted poses from ``state.stamp`` to ``t_end`` at a spacing of at most ``dt``.

    Returns the poses, the predicted end state and the actual spacing.
    """
    n = max(1, int(math.ceil((t_end - state.stamp) / dt - 1e-9)))
    step = (t_end - state.stamp) / n
    poses = [state.pose]
    cur = state
    for k in range(1, n + 1):
        t1 = state.stamp + k * step if k < n else t_end
        cur = predict_state(cur, imu.window(cur.stamp, t1), gravity)
        cur = NavState(cur.pose, cur.velocity, cur.bias, t1)
        poses.append(cur.pose)
    return poses, cur, step


def _is_keyframe(cfg: KeyframeConfig, since: int, last: Se3Pose | None, pose: Se3Pose) -> bool:
    if last is None or since >= cfg.every:
        return True
    rel = last.inverse() * pose
    return bool(
        np.linalg.norm(rel.translation) >= cfg.distance or math.degrees(rel.rotation.angle()) >= cfg.angle_deg
    )


def cloud_feature_map(cloud: MapCloud, centre: np.ndarray, radius: float, voxel: float | None = None) -> FeatureMap:
    """Registration target made of map representatives near ``centre``.

    Map voxels carry no feature class, so every representative serves as a
    surface and ground candidate; the plane-fit checks reject mixed patches.
    ``voxel`` thins the crop to the density of the odometry target.
    """
    d = np.linalg.norm(cloud.centroids - centre, axis=1) if len(cloud) else np.zeros(0)
    pts = cloud.centroids[d <= radius]
    return FeatureMap.from_points(pts, voxel)


class _Odometry:
    """State carried between scans for one run."""

    def __init__(self, ds: Dataset, config: PipelineConfig, prior: Session | None = None):
        self.ds = ds
        self.cfg = config
        self.prior = prior
        self.ext = config.sensor.lidar_extrinsic
        self.graph = PoseGraph(
            window=SlidingWindow(config.window_size),
            config=config.solver,
            lever_arm=np.array(config.sensor.gps_lever_arm, dtype=float),
        )
        self.cloud = MapCloud(config.map_voxel)
        self.gps_acc = GpsAccounting()
        self.keyframes: list[int] = []
        self.local: list[tuple[int, FeatureSet]] = []
        self.pending: dict[int, np.ndarray] = {}
        self.inserted: set[int] = set()
        self.staged: list[np.ndarray] = []
        self.degenerate = 0
        self.skipped = 0
        self.loops = 0
        self.links: list = []
        self.debug: list = []
        self._since_key = 0
        self._last_key_pose: Se3Pose | None = None
        self._gps_index = 0
        self._nodes_since_loop = 0

    # ---- setup

    def initialise(self):
        ds, cfg = self.ds, self.cfg
        if len(ds) == 0:
            raise ValueError("dataset has no scans")
        gravity, level, bias = initialize_gravity(ds.imu, cfg.init_duration)
        self.gravity = gravity.vector
        self.graph.gravity = self.gravity.copy()
        yaw = rot_exp([0.0, 0.0, math.radians(cfg.initial_yaw_deg)])
        rot = yaw * level
        # Gravity was expressed through the level attitude; re-express it for the yawed frame.
        self.graph.gravity = yaw.apply(self.gravity)
        self.gravity = self.graph.gravity
        self.fixes = [g for g in ds.gps] if cfg.use_gps else []
        if not cfg.use_gps:
            self.gps_acc.disabled = len(ds.gps)
        valid = [g for g in self.fixes if g.fix_quality >= 1]
        self.anchor = valid[0].lla if valid else None
        if self.anchor is not None:
            self.graph.anchor = self.anchor
            self.enu = EnuAnchor.from_lla(self.anchor)
        t0 = float(ds.scan_stamps[0]) + ds.lidar.scan_period
        start = NavState(Se3Pose(rot, np.zeros(3)), np.zeros(3), bias, ds.imu.stamps[0])
        if t0 > start.stamp:
            start = predict_state(start, ds.imu.window(start.stamp, t0), self.gravity)
        # The vehicle is static during initialisation; drop integration drift.
        start = NavState(Se3Pose(rot, np.zeros(3)), np.zeros(3), bias, t0)
        self.last_state = start
        return start

    # ---- per scan

    def process(self, k: int) -> None:
        ds, cfg, g = self.ds, self.cfg, self.graph
        frame = ds.scan(k)
        period = ds.lidar.scan_period
        t_start = float(ds.scan_stamps[k])
        t_end = t_start + period
        if k == 0:
            state = self.initialise()
            poses, pred = [state.pose, state.pose], state
            step = period
            t_knot0 = t_start
        else:
            prev = self.last_state
            if prev.stamp > t_start + 1e-9:
                raise ValueError("scan starts before the previous node")
            poses, pred, step = _knot_poses(prev, ds.imu, t_end, cfg.spline_knot_interval, self.gravity)
            t_knot0 = prev.stamp
        spline = UniformSe3Spline.clamped(poses, t_knot0, step)
        deskewed = undistort_scan(frame, spline, t_end, self.ext)
        labels = segment_ground(deskewed, cfg.sensor.sensor_height, cfg.features)
        feats = extract_features(deskewed, labels, cfg.features)

        pose = pred.pose
        lidar_ok = False
        row = {"frame": k, "stamp": t_end, "status": "first"}
        if k > 0 and self.local:
            target = FeatureMap.from_features(
                [(g.nodes[n].state.pose * self.ext, f) for n, f in self.local], cfg.target_voxel
            )
            try:
                res = register(feats, target, pred.pose * self.ext, cfg.registration)
                pose = res.pose * self.ext.inverse()
                lidar_ok = res.converged
                row.update(status="ok" if res.converged else "not-converged", iterations=res.iterations)
            except DegenerateGeometryError as exc:
                self.degenerate += 1
                log.info("frame %d: degenerate registration (%s); IMU bridges the gap", k, exc)
                row.update(status="degenerate")
        if k > 0 and not lidar_ok and not cfg.use_imu_factors:
            self.skipped += 1
            row.update(status=row["status"] + ",skipped")
            self.debug.append(row)
            self.last_state = pred
            return

        state = NavState(pose, pred.velocity, pred.bias, t_end)
        prev_id = None if not g.nodes else g.last_node().id
        prev_state = self.last_state
        node = add_state_node(g, state)
        if prev_id is not None:
            if cfg.use_imu_factors:
                pim = preintegrate(ds.imu.window(prev_state.stamp, t_end), prev_state.bias, cfg.imu_noise)
                add_factor(g, PreintegrationFactor(prev_id, node, pim))
            if lidar_ok:
                rel = g.nodes[prev_id].state.pose.inverse() * pose
                add_factor(g, lidar_factor(prev_id, node, rel, cfg.solver))
        self._add_gps(t_end)
        if prev_id is not None or any(isinstance(f, GpsFactor) for f in g.factors.values()):
            free = [n for n in g.window.active if not g.nodes[n].fixed]
            if free:
                rep = optimize_window(g, cfg.solver)
                row.update(solver_iterations=rep.iterations, cost=rep.final_cost)
        self.last_state = g.nodes[node].state
        self.last_features = feats
        self._keyframe(node, deskewed, labels)
        self._maybe_loop(node, feats)
        self._flush_frozen()
        self.debug.append(row)

    def _add_gps(self, t_now: float) -> None:
        cfg, g = self.cfg, self.graph
        while self._gps_index < len(self.fixes):
            fix = self.fixes[self._gps_index]
            if fix.stamp > t_now + cfg.gps_tolerance:
                break
            self._gps_index += 1
            if fix.fix_quality < 1:
                self.gps_acc.invalid += 1
                g.rejected.append((fix, "invalid fix quality"))
                continue
            node = associate_gps(g, fix.stamp, cfg.gps_tolerance)
            if node is None:
                self.gps_acc.unassociated += 1
                continue
            p = lla_to_enu(fix.lla, self.enu)
            fid = add_factor(g, gps_factor(node, p, cfg.solver, fix.fix_quality, fix.stamp))
            if fid is None:
                self.gps_acc.gated += 1
            else:
                self.gps_acc.accepted += 1

    def _keyframe(self, node: int, deskewed, labels) -> None:
        cfg = self.cfg
        pose = self.graph.nodes[node].state.pose
        self._since_key += 1
        if not _is_keyframe(cfg.keyframe, self._since_key, self._last_key_pose, pose):
            return
        self._since_key = 0
        self._last_key_pose = pose
        self.keyframes.append(node)
        target = extract_target_features(deskewed, labels, cfg.features, cfg.target_voxel)
        self.local.append((node, target))
        del self.local[: -cfg.local_map_keyframes]
        self.pending[node] = deskewed.points

    def _flush_frozen(self, everything: bool = False) -> None:
        g = self.graph
        for node in sorted(self.pending):
            if not (everything or g.nodes[node].fixed):
                continue
            pts = self.pending.pop(node)
            self.staged.append((g.nodes[node].state.pose * self.ext).apply(pts))
            self.inserted.add(node)
        if everything or len(self.staged) >= MAP_BATCH:
            self._commit_map()

    def _commit_map(self) -> None:
        # Folding into the sorted voxel store costs a full copy, so scans are batched.
        if self.staged:
            insert_scan(self.cloud, Se3Pose.identity(), np.concatenate(self.staged))
            self.staged = []

    def _maybe_loop(self, node: int, feats: FeatureSet) -> None:
        lc = self.cfg.loop
        if not lc.enabled or not self.inserted:
            return
        self._nodes_since_loop += 1
        if self._nodes_since_loop < lc.check_every:
            return
        self._nodes_since_loop = 0
        self._commit_map()
        g = self.graph
        cands = detect_loop_candidates(g, node, lc.radius, lc.exclusion)
        cands = [c for c in cands if c in self.inserted]
        if not cands:
            return
        here = g.nodes[node].state.pose.translation
        cand = min(cands, key=lambda c: (np.linalg.norm(g.nodes[c].state.pose.translation - here), c))
        cpose = g.nodes[cand].state.pose
        target = cloud_feature_map(self.cloud, cpose.translation, lc.crop_radius, self.cfg.target_voxel)
        if len(target) == 0:
            return

        def reg(guess: Se3Pose):
            # ``guess`` maps the current body frame into the candidate's frame.
            world_guess = cpose * guess * self.ext
            res = register(feats, target, world_guess, self.cfg.registration)
            res.pose = cpose.inverse() * res.pose * self.ext.inverse()
            return res

        factor = verify_loop_candidate(g, node, cand, reg, lc.max_cost, self.cfg.solver)
        if factor is not None and add_factor(g, factor) is not None:
            self.loops += 1
            log.info("loop closure %d -> %d", cand, node)
            optimize_window(g, self.cfg.solver)

    def finish(self) -> tuple[np.ndarray, list[Se3Pose]]:
        self._flush_frozen(everything=True)
        for fix in self.fixes[self._gps_index :]:
            if fix.fix_quality < 1:
                self.gps_acc.invalid += 1
            else:
                self.gps_acc.unassociated += 1
        self._gps_index = len(self.fixes)
        g = self.graph
        stamps = np.array([n.stamp for n in g.nodes.values()])
        poses = [g.world_pose(k) for k in g.nodes]
        return stamps, poses


# --------------------------------------------------------------------------- evaluation


def _align_first(stamps, poses: list[Se3Pose], gt) -> np.ndarray:
    """Positions after moving the first estimated pose onto ground truth."""
    gt_t, gt_p, gt_q = gt
    k = int(np.argmin(np.abs(gt_t - stamps[0])))
    if abs(gt_t[k] - stamps[0]) > 1e-6:
        raise ValueError("ground truth has no sample at the first estimate stamp")
    first_gt = Se3Pose(Rotation(gt_q[k]), gt_p[k])
    corr = first_gt * poses[0].inverse()
    return corr.apply(np.array([p.translation for p in poses]))


def evaluate_run(stamps, poses, anchor: GeoLla | None, dataset: Dataset, align_first: bool = False) -> AteStats | None:
    gt = dataset.ground_truth()
    if gt is None:
        return None
    if anchor is not None and dataset.anchor is not None and not align_first:
        pos = reanchor(
            np.array([p.translation for p in poses]), EnuAnchor.from_lla(anchor), EnuAnchor.from_lla(dataset.anchor)
        )
    else:
        pos = _align_first(stamps, poses, gt)
    return evaluate_trajectory(stamps, pos, gt[0], gt[1])


def gps_only_positions(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Valid GPS fixes as a trajectory in the world ENU frame."""
    if dataset.anchor is None:
        raise ValueError("dataset header has no world anchor")
    enu = EnuAnchor.from_lla(dataset.anchor)
    fixes = [g for g in dataset.gps if g.fix_quality >= 1]
    stamps = np.array([g.stamp for g in fixes])
    pos = np.array([lla_to_enu(g.lla, enu).vector() for g in fixes]).reshape(-1, 3)
    return stamps, pos


# --------------------------------------------------------------------------- outputs


def _header_lines(config: PipelineConfig, anchor: GeoLla | None) -> str:
    lines = ["gpslio trajectory: t x y z qx qy qz qw (body frame in the anchor ENU frame)"]
    if anchor is not None:
        lines.append(
            f"anchor_lla_deg {math.degrees(anchor.latitude)!r} {math.degrees(anchor.longitude)!r} {anchor.altitude!r}"
        )
    else:
        lines.append("anchor none (frame of the first node)")
    lines.append("config:")
    lines += config_to_toml(config).splitlines()
    return "\n".join(lines)


def read_trajectory_anchor(path) -> GeoLla | None:
    for line in Path(path).read_text().splitlines():
        if not line.startswith("#"):
            break
        tok = line[1:].split()
        if tok and tok[0] == "anchor_lla_deg":
            return GeoLla.from_degrees(float(tok[1]), float(tok[2]), float(tok[3]))
    return None


def format_report(result: RunResult, config: PipelineConfig, label: str = "run") -> str:
    lines = ["# gpslio run report", f"frames {result.frames}", f"nodes {len(result.stamps)}"]
    lines.append(f"degenerate_registrations {result.degenerate}")
    lines.append(f"skipped_frames {result.skipped_nodes}")
    lines.append(f"loop_closures {result.loops}")
    acc = result.gps
    lines.append(
        f"gps total {acc.total} accepted {acc.accepted} gated {acc.gated} "
        f"invalid {acc.invalid} unassociated {acc.unassociated} disabled {acc.disabled}"
    )
    if result.ate is not None:
        lines += ["", ATE_HEADER, result.ate.table_row(label)]
    lines += ["", "# config"] + config_to_toml(config).splitlines()
    return "\n".join(lines) + "\n"


def _write_outputs(result: RunResult, config: PipelineConfig, out: Path, anchor) -> None:
    out.mkdir(parents=True, exist_ok=True)
    result.trajectory_path = out / "trajectory.tum"
    write_tum(result.trajectory_path, result.stamps, result.poses, header=_header_lines(config, anchor))
    result.session_path = out / "session.gfz"
    save_session(result.session, result.session_path)
    result.report_path = out / "report.txt"
    result.report_path.write_text(format_report(result, config))
    if config.debug_dump:
        keys = ["frame", "stamp", "status", "iterations", "solver_iterations", "cost"]
        rows = [",".join(keys)]
        for r in result.debug_rows:
            rows.append(",".join(str(r.get(k, "")) for k in keys))
        (out / "frames.csv").write_text("\n".join(rows) + "\n")


# --------------------------------------------------------------------------- entry points


def _run(ds: Dataset, config: PipelineConfig, prior: Session | None = None) -> tuple[RunResult, _Odometry]:
    odo = _Odometry(ds, config, prior)
    for k in range(len(ds)):
        odo.process(k)
        if prior is not None:
            odo_relocalise_step(odo, k)
    stamps, poses = odo.finish()
    session = Session(odo.graph, odo.cloud, odo.anchor, keyframes=sorted(odo.inserted))
    odo.cloud.anchor = odo.anchor
    result = RunResult(
        stamps, poses, session, odo.gps_acc, len(ds), odo.degenerate, odo.skipped, odo.loops, debug_rows=odo.debug
    )
    return result, odo


def run_odometry(config: PipelineConfig, dataset: Dataset | None = None, write: bool = True) -> RunResult:
    """Process a recorded dataset; writes trajectory, session and report under ``config.output``."""
    ds = dataset if dataset is not None else load_dataset(config.dataset)
    result, odo = _run(ds, config)
    result.ate = evaluate_run(result.stamps, result.poses, odo.anchor, ds, align_first=odo.anchor is None)
    if write:
        _write_outputs(result, config, Path(config.output), odo.anchor)
    return result


def odo_relocalise_step(odo: _Odometry, k: int) -> None:
    """Look for a verified link from the newest node to the prior session."""
    prior = odo.prior
    lc = odo.cfg.loop
    if not odo.graph.nodes or odo.anchor is None or prior.anchor is None:
        return
    node = odo.graph.last_node().id
    if odo.graph.nodes[node].stamp < float(odo.ds.scan_stamps[k]):
        return  # this scan was skipped
    if node % lc.check_every:
        return
    pg = prior.graph
    here_new = odo.graph.world_position(node)
    here = reanchor(here_new, EnuAnchor.from_lla(odo.anchor), EnuAnchor.from_lla(prior.anchor))[0] - pg.enu_offset
    best, best_d = None, lc.radius
    for nid, n in pg.nodes.items():
        d = float(np.linalg.norm(n.state.pose.translation - here))
        if d <= best_d:
            best, best_d = nid, d
    if best is None:
        return
    rot = EnuAnchor.from_lla(prior.anchor).rotation @ EnuAnchor.from_lla(odo.anchor).rotation.T
    cur = odo.graph.world_pose(node)
    guess_world = Se3Pose(Rotation.from_matrix(rot) * cur.rotation, here)
    target = cloud_feature_map(prior.map, here, lc.crop_radius, odo.cfg.target_voxel)
    if len(target) == 0:
        return
    try:
        res = register(odo.last_features, target, guess_world * odo.ext, odo.cfg.registration)
    except (DegenerateGeometryError, ValueError):
        return
    if not res.converged or res.final_cost / max(res.inlier_count, 1) > lc.max_cost:
        return
    body = res.pose * odo.ext.inverse()
    rel = pg.nodes[best].state.pose.inverse() * body
    odo.links.append(loop_factor(best, node, rel, odo.cfg.solver))


def run_relocalize(config: PipelineConfig, session_path, dataset: Dataset | None = None, write: bool = True):
    """Reuse a saved session: run odometry, link to the prior map and merge."""
    from .mapping import load_session

    prior = load_session(session_path)
    ds = dataset if dataset is not None else load_dataset(config.dataset)
    result, odo = _run(ds, config, prior)
    if not odo.links:
        raise RelocalizationError(
            f"no verified link to the prior session after {len(ds)} frames "
            f"(prior nodes {len(prior.graph.nodes)}, anchor {'set' if odo.anchor else 'missing'})"
        )
    merged, mapping, report = merge_sessions(prior.graph, odo.graph, odo.links, config=config.solver)
    # Rigid alignment of the new map (built in new graph coordinates): the
    # anchor change followed by how the newest linked node moved in the solve.
    if prior.anchor is not None and odo.anchor is not None:
        src, dst = EnuAnchor.from_lla(odo.anchor), EnuAnchor.from_lla(prior.anchor)
        shift = reanchor(np.zeros((1, 3)), src, dst)[0]
        to_prior = Se3Pose(Rotation.from_matrix(dst.rotation @ src.rotation.T), shift - prior.graph.enu_offset)
    else:
        to_prior = Se3Pose.identity()
    m0 = to_prior * Se3Pose(Rotation.identity(), odo.graph.enu_offset)
    j = odo.links[-1].j
    before = m0 * odo.graph.nodes[j].state.pose
    alignment = merged.nodes[mapping[j]].state.pose * before.inverse() * m0
    new_map = merge_map(prior.map, odo.cloud, alignment)
    keyframes = sorted(set(prior.keyframes) | {mapping[k] for k in odo.inserted})
    session = Session(merged, new_map, prior.anchor, keyframes=keyframes)
    stamps = np.array([merged.nodes[mapping[k]].stamp for k in odo.graph.nodes])
    poses = [merged.world_pose(mapping[k]) for k in odo.graph.nodes]
    out = RunResult(
        stamps, poses, session, odo.gps_acc, len(ds), odo.degenerate, odo.skipped, len(odo.links), debug_rows=odo.debug
    )
    out.ate = evaluate_run(stamps, poses, prior.anchor, ds, align_first=prior.anchor is None)
    if write:
        _write_outputs(out, config, Path(config.output), prior.anchor)
    return out, report
