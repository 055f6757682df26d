import math

import numpy as np
import pytest

from gpslio.geo import EnuAnchor, lla_to_enu
from gpslio.imu import STANDARD_GRAVITY
from gpslio.simulator import (
    LABEL_GROUND,
    LABEL_NONE,
    SCENARIOS,
    Box,
    GpsConfig,
    LidarConfig,
    Plane,
    SimConfig,
    TrajectorySpec,
    WorldModel,
    WorldSpec,
    cast_rays,
    evaluate_trajectory,
    generate_world,
    simulate_dataset,
    simulate_scan,
    trajectory_controls,
)
from gpslio.spline import UniformSe3Spline


def test_cast_rays_frozen_hits():
    world = WorldModel((Plane((0, 0, 0), (0, 0, 1)),), (Box((5, -1, 0), (6, 1, 3)),), None)
    origins = np.array([[0.0, 0.0, 1.8]] * 3)
    dirs = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 0.0, 1.0]])
    dist, label = cast_rays(world, origins, dirs, 100.0)
    assert dist[0] == pytest.approx(5.0) and dist[1] == pytest.approx(1.8)
    assert np.isinf(dist[2]) and label[2] == LABEL_NONE
    assert label[1] == LABEL_GROUND


def test_box_validation():
    with pytest.raises(ValueError):
        Box((0, 0, 0), (1, -1, 1))
    with pytest.raises(ValueError):
        generate_world(WorldSpec("moon"))


def test_world_is_deterministic():
    a, b = generate_world(WorldSpec("box-street")), generate_world(WorldSpec("box-street"))
    assert a == b and len(a.boxes) > 20
    assert a.edges.shape == (4 * len(a.boxes), 2, 3)
    assert generate_world(WorldSpec("open-harbor")).boxes == ()


def test_full_lap_closes():
    spec = TrajectorySpec()
    controls, t0, duration = trajectory_controls(spec)
    spline = UniformSe3Spline(controls, t0, spec.knot_interval)
    start, end = spline.evaluate(0.0), spline.evaluate(duration)
    assert np.linalg.norm(start.translation - end.translation) < 1e-6
    _, vel_start, _, _ = spline.derivatives([0.5])
    assert np.linalg.norm(vel_start) < 1e-9
    # Perimeter of the rounded rectangle at 10 m/s with 2 m/s^2 ramps and 2 s stops.
    perimeter = 2 * (310 + 210) - (8 - 2 * math.pi) * 20
    assert duration == pytest.approx(math.floor((perimeter / 10 + 5 + 4) / 0.1) * 0.1, abs=1e-9)


def test_static_imu_reads_gravity():
    world = generate_world(WorldSpec("empty"))
    cfg = SimConfig(
        trajectory=TrajectorySpec(distance=40.0, speed=6.0, still=1.5),
        imu_noise_enabled=False,
        lidar=LidarConfig(points_per_ring=64),
        gps=GpsConfig(dropouts=((2.0, 4.0),)),
    )
    ds = simulate_dataset(world, cfg)
    still = ds.imu.stamps < 1.0
    assert ds.imu.accel[still] == pytest.approx(np.tile([0.01, -0.02, STANDARD_GRAVITY + 0.015], (still.sum(), 1)), abs=1e-9)
    assert ds.imu.gyro[still] == pytest.approx(np.tile([2e-4, -1e-4, 3e-4], (still.sum(), 1)), abs=1e-12)
    assert [g.fix_quality for g in ds.gps][:6] == [1, 1, 0, 0, 1, 1]


def test_gps_noise_matches_sigma():
    world, cfg = SCENARIOS["box-street"](4)
    ds = simulate_dataset(world, SimConfig(trajectory=cfg.trajectory, lidar=LidarConfig(points_per_ring=16, rings=2), seed=4))
    anchor = EnuAnchor.from_lla(world.anchor)
    err = np.array([lla_to_enu(g.lla, anchor).vector() - ds.gt_pose(g.stamp).translation for g in ds.gps])
    assert np.std(err, axis=0) == pytest.approx([2.0, 2.0, 2.0], rel=0.15)
    assert np.abs(err.mean(axis=0)).max() < 0.4


def test_same_seed_same_data():
    world, cfg = SCENARIOS["open-harbor"](9)
    cfg = SimConfig(trajectory=TrajectorySpec(distance=40.0, speed=6.0, still=1.5), lidar=LidarConfig(points_per_ring=128), seed=9)
    a, b = simulate_dataset(world, cfg), simulate_dataset(world, cfg)
    assert np.array_equal(a.imu.accel, b.imu.accel)
    assert all(fa == fb for fa, fb in zip(a.frames, b.frames))
    c = simulate_dataset(world, SimConfig(trajectory=cfg.trajectory, lidar=cfg.lidar, seed=10))
    assert not np.array_equal(a.imu.accel, c.imu.accel)


def test_scan_stamps_and_rings(street):
    world, cfg, spline, _ = street
    frame, labels = simulate_scan(world, spline, 12.0, cfg.lidar)
    assert frame.frame_stamp == 12.0 and frame.ring_count == 16
    assert 0 <= frame.relative_time.min() and frame.relative_time.max() < 0.1
    assert len(labels) == len(frame) > 10000


def test_evaluate_trajectory_frozen():
    gt_t = np.arange(5.0)
    gt_p = np.column_stack([gt_t, np.zeros(5), np.zeros(5)])
    est_t = np.array([1.0, 3.0])
    est_p = np.array([[1.0, 1.0, 0.0], [3.0, 3.0, 0.0]])
    s = evaluate_trajectory(est_t, est_p, gt_t, gt_p)
    assert (s.max, s.min, s.mean, s.count) == (3.0, 1.0, 2.0, 3)
    assert s.sd == pytest.approx(math.sqrt(2 / 3))
    assert s.table_row("x").split() == ["x", "3.0000", "1.0000", "2.0000", "0.8165"]
    with pytest.raises(ValueError):
        evaluate_trajectory([10.0, 11.0], est_p, gt_t, gt_p)
