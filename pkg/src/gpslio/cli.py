"""Command-line entry points: ``sim``, ``run``, ``reloc``, ``eval`` and ``export-map``.

Exit codes: 0 success, 2 configuration error, 3 dataset (or input file)
error, 4 relocalization failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .dataset import DatasetError, _plain, load_dataset
from .geom import read_tum
from .mapping import SessionError, export_ascii, load_session
from .pipeline import (
    ConfigError,
    PipelineConfig,
    RelocalizationError,
    _build,
    evaluate_run,
    format_report,
    gps_only_positions,
    load_config,
    read_trajectory_anchor,
    run_odometry,
    run_relocalize,
    tomllib,
)
from .simulator import (
    ATE_HEADER,
    SCENARIOS,
    GpsConfig,
    LidarConfig,
    TrajectorySpec,
    evaluate_trajectory,
    simulate_dataset,
    write_dataset,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATASET = 3
EXIT_RELOC = 4


def _pipeline_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    changes = {}
    if args.dataset:
        changes["dataset"] = args.dataset
    if args.out:
        changes["output"] = args.out
    if args.no_gps:
        changes["use_gps"] = False
    if args.no_imu_factors:
        changes["use_imu_factors"] = False
    if args.debug_dump:
        changes["debug_dump"] = True
    cfg = replace(cfg, **changes)
    if not cfg.dataset:
        raise ConfigError("no dataset given (use --dataset or set 'dataset' in the config)")
    return cfg


def _sim_settings(args):
    """Scenario name, seed and SimConfig overrides from an optional TOML file."""
    data = {}
    if args.config:
        try:
            data = tomllib.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from None
    allowed = {"scenario", "seed", "trajectory", "lidar", "gps"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"sim: unknown key(s) {', '.join(unknown)}")
    scenario = args.scenario or data.get("scenario", "box-street")
    if scenario not in SCENARIOS:
        raise ConfigError(f"sim: unknown scenario {scenario!r} (choose from {', '.join(SCENARIOS)})")
    seed = args.seed if args.seed is not None else data.get("seed", 1)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("sim.seed: expected an integer")
    overrides = {}
    _, base = SCENARIOS[scenario](seed)
    if "trajectory" in data:
        overrides["trajectory"] = _merge(TrajectorySpec, base.trajectory, data["trajectory"], "sim.trajectory")
    if "lidar" in data:
        overrides["lidar"] = _merge(LidarConfig, base.lidar, data["lidar"], "sim.lidar")
    if "gps" in data:
        gps = dict(data["gps"])
        drops = gps.pop("dropouts", None)
        merged = _merge(GpsConfig, base.gps, gps, "sim.gps")
        if drops is not None:
            try:
                merged = replace(merged, dropouts=tuple((float(a), float(b)) for a, b in drops))
            except (TypeError, ValueError):
                raise ConfigError("sim.gps.dropouts: expected a list of [start, end] pairs") from None
        overrides["gps"] = merged
    return scenario, seed, overrides


def _merge(cls, base, table, where):
    if not isinstance(table, dict):
        raise ConfigError(f"{where}: expected a table")
    return _build(cls, {**_plain(base), **table}, where)


def cmd_sim(args) -> int:
    if not args.out:
        raise ConfigError("sim needs --out")
    scenario, seed, overrides = _sim_settings(args)
    world, cfg = SCENARIOS[scenario](seed, **overrides)
    try:
        ds = simulate_dataset(world, cfg)
    except ValueError as exc:
        raise ConfigError(f"sim: {exc}") from None
    write_dataset(ds, args.out, {"scenario": scenario})
    print(f"wrote {len(ds.frames)} scans of {scenario} (seed {seed}) to {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _pipeline_config(args)
    result = run_odometry(cfg)
    print(format_report(result, cfg), end="")
    return EXIT_OK


def cmd_reloc(args) -> int:
    cfg = _pipeline_config(args)
    result, report = run_relocalize(cfg, args.session)
    print(format_report(result, cfg, label="reloc"), end="")
    print(f"merge: {report.iterations} iterations, cost {report.initial_cost:.6g} -> {report.final_cost:.6g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.dataset:
        raise ConfigError("eval needs --dataset")
    ds = load_dataset(args.dataset)
    gt = ds.ground_truth()
    if gt is None:
        raise DatasetError(f"{args.dataset}: no ground truth to evaluate against")
    rows = [ATE_HEADER]
    csv = ["label,max,min,mean,sd,count"]
    for path in args.trajectories:
        try:
            stamps, poses = read_tum(path)
        except (OSError, ValueError) as exc:
            raise DatasetError(f"{path}: {exc}") from None
        anchor = read_trajectory_anchor(path)
        stats = evaluate_run(stamps, poses, anchor, ds, align_first=anchor is None)
        label = Path(path).parent.name or Path(path).stem
        rows.append(stats.table_row(label))
        csv.append(_csv_row(label, stats))
    if args.gps_baseline:
        t, p = gps_only_positions(ds)
        stats = evaluate_trajectory(t, p, gt[0], gt[1])
        rows.append(stats.table_row("gps-only"))
        csv.append(_csv_row("gps-only", stats))
    text = "\n".join(rows) + "\n"
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ate.txt").write_text(text)
        (out / "ate.csv").write_text("\n".join(csv) + "\n")
    return EXIT_OK


def _csv_row(label, s) -> str:
    return f"{label},{s.max!r},{s.min!r},{s.mean!r},{s.sd!r},{s.count}"


def cmd_export_map(args) -> int:
    if not args.out:
        raise ConfigError("export-map needs --out")
    session = load_session(args.session)
    cloud = session.map.copy()
    # Stored centroids live in the graph frame; shift them into the anchor ENU frame.
    cloud.centroids = cloud.centroids + np.asarray(session.graph.enu_offset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = export_ascii(cloud, out / "map.xyz")
    print(f"wrote {n} points to {out / 'map.xyz'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpslio", description="GPS-aided LiDAR-inertial odometry and mapping")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML configuration file")
        p.add_argument("--dataset", help="dataset directory")
        p.add_argument("--out", help="output directory")
        p.add_argument("--no-gps", action="store_true", help="ignore GPS fixes (LiDAR-inertial only)")
        p.add_argument("--no-imu-factors", action="store_true", help="use the IMU for prediction only")
        p.add_argument("--debug-dump", action="store_true", help="also write per-frame diagnostics")

    p = sub.add_parser("sim", help="generate a simulated dataset")
    p.add_argument("--config", help="TOML with scenario, seed and [trajectory]/[lidar]/[gps] overrides")
    p.add_argument("--out", help="dataset directory to write")
    p.add_argument("--seed", type=int, help="noise seed")
    p.add_argument("--scenario", choices=sorted(SCENARIOS), help="world and drive (default box-street)")
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("run", help="run odometry on a dataset")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("reloc", help="relocalize against a saved session and merge")
    p.add_argument("session", help="prior session file")
    common(p)
    p.set_defaults(func=cmd_reloc)

    p = sub.add_parser("eval", help="ATE of trajectories against ground truth")
    p.add_argument("trajectories", nargs="+", help="TUM trajectory files")
    p.add_argument("--dataset", help="dataset directory with ground truth")
    p.add_argument("--out", help="directory for ate.txt and ate.csv")
    p.add_argument("--gps-baseline", action="store_true", help="add a GPS-only row")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-map", help="write session map points as ASCII")
    p.add_argument("session", help="session file")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_export_map)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, SessionError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    except RelocalizationError as exc:
        print(f"relocalization failed: {exc}", file=sys.stderr)
        return EXIT_RELOC


if __name__ == "__main__":
    sys.exit(main())
