import numpy as np
import pytest

from gpslio.geom import Rotation, Se3Pose, rot_exp


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_rotation(rng, scale=1.0) -> Rotation:
    return rot_exp(rng.normal(size=3) * scale)


def random_pose(rng, rot_scale=1.0, trans_scale=5.0) -> Se3Pose:
    return Se3Pose(random_rotation(rng, rot_scale), rng.normal(size=3) * trans_scale)


@pytest.fixture(scope="session")
def street():
    """Box-street world and trajectory spline (no sensor noise drawn yet)."""
    from gpslio.simulator import box_street_scenario, trajectory_controls
    from gpslio.spline import UniformSe3Spline

    world, cfg = box_street_scenario()
    controls, t0, duration = trajectory_controls(cfg.trajectory)
    return world, cfg, UniformSe3Spline(controls, t0, cfg.trajectory.knot_interval), duration


@pytest.fixture(scope="session")
def street_scan(street):
    """One static scan mid-block with its ground-truth labels."""
    from gpslio.simulator import simulate_scan

    world, cfg, spline, _ = street
    return simulate_scan(world, spline, 20.0, cfg.lidar, rng=np.random.default_rng(3), static=True)


SMALL_TRAJECTORY = dict(distance=40.0, speed=6.0, still=1.5)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A 40 m box-street drive written to disk; returns its directory."""
    from gpslio.simulator import TrajectorySpec, box_street_scenario, simulate_dataset, write_dataset

    world, cfg = box_street_scenario(5, trajectory=TrajectorySpec(**SMALL_TRAJECTORY))
    root = tmp_path_factory.mktemp("small") / "data"
    write_dataset(simulate_dataset(world, cfg), root, {"scenario": "box-street"})
    return root


@pytest.fixture(scope="session")
def lio_run(small_dataset, tmp_path_factory):
    from gpslio.pipeline import PipelineConfig, run_odometry

    out = tmp_path_factory.mktemp("lio")
    cfg = PipelineConfig(dataset=str(small_dataset), output=str(out), use_gps=False)
    return cfg, run_odometry(cfg)


@pytest.fixture(scope="session")
def fused_run(small_dataset, tmp_path_factory):
    from gpslio.pipeline import PipelineConfig, run_odometry

    out = tmp_path_factory.mktemp("fused")
    cfg = PipelineConfig(dataset=str(small_dataset), output=str(out))
    return cfg, run_odometry(cfg)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
