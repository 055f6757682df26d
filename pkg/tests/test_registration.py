import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from gpslio.features import FeatureSet, PointSet, extract_features, extract_target_features, segment_ground
from gpslio.geom import Se3Pose, rot_exp
from gpslio.registration import (
    DegenerateGeometryError,
    FeatureMap,
    RegistrationConfig,
    find_correspondences,
    point_line_distance,
    point_plane_distance,
    register,
)
from gpslio.simulator import simulate_scan

vec = arrays(float, 3, elements=st.floats(-10, 10))


def test_point_line_frozen():
    assert point_line_distance([0, 3, 4], [1, 0, 0], [-2, 0, 0]) == pytest.approx(5.0, abs=1e-15)
    with pytest.raises(ValueError):
        point_line_distance([0, 0, 0], [1, 1, 1], [1, 1, 1])


def test_point_plane_frozen():
    assert point_plane_distance([1, 2, -7], [0, 0, 1], [1, 0, 1], [0, 1, 1]) == pytest.approx(8.0, abs=1e-15)
    with pytest.raises(ValueError):
        point_plane_distance([0, 0, 0], [0, 0, 0], [1, 0, 0], [2, 0, 0])


@given(vec, vec, st.floats(-5, 5), st.floats(0.1, 3.0))
def test_point_line_distance_of_offset_point(a, d, s, h):
    if np.linalg.norm(d) < 0.1:
        return
    d = d / np.linalg.norm(d)
    perp = np.cross(d, [1.0, 0.0, 0.0] if abs(d[0]) < 0.9 else [0.0, 1.0, 0.0])
    perp /= np.linalg.norm(perp)
    p = a + s * d + h * perp
    assert point_line_distance(p, a, a + d) == pytest.approx(h, rel=1e-9, abs=1e-9)


def _grid_planes():
    """Three orthogonal planes sampled on a 0.5 m grid: floor and two walls."""
    g = np.arange(-6.0, 6.0001, 0.5)
    u, v = np.meshgrid(g, g)
    u, v = u.ravel(), v.ravel()
    floor = np.column_stack([u, v, np.full_like(u, -1.8)])
    wall_x = np.column_stack([np.full_like(u, 5.0), u, v])
    wall_y = np.column_stack([u, np.full_like(u, 6.0), v])
    return floor, np.vstack([wall_x, wall_y])


def _ps(points):
    return PointSet(points, np.zeros(len(points), dtype=int), np.zeros(len(points)))


def test_correspondences_on_planes_are_exact():
    floor, walls = _grid_planes()
    target = FeatureMap(np.zeros((0, 3)), walls, floor)
    src = FeatureSet(surfaces=_ps(walls[::7] + [0.0, 0.0, 0.05]), ground=_ps(floor[::7]))
    cs = find_correspondences(src, target, Se3Pose())
    assert cs.n_planes > 100 and cs.n_lines == 0
    _, dp = cs.residuals(Se3Pose())
    assert np.all(dp < 1e-9)
    for c in cs.as_list(Se3Pose())[:20]:
        assert c.distance() < 1e-9


def test_register_recovers_offset_on_synthetic_planes():
    floor, walls = _grid_planes()
    target = FeatureMap(np.zeros((0, 3)), walls, floor)
    src = FeatureSet(surfaces=_ps(walls[::3]), ground=_ps(floor[::3]))
    truth = Se3Pose()
    guess = Se3Pose(rot_exp([0.0, 0.0, np.radians(2.0)]), [0.2, -0.15, 0.1])
    res = register(src, target, guess)
    err = truth.inverse() * res.pose
    assert np.linalg.norm(err.translation) < 1e-6
    assert err.rotation.angle() < 1e-6
    assert res.converged and res.iterations <= 30
    assert all(b <= a for a, b in res.cost_history)


def test_single_plane_is_degenerate():
    floor, _ = _grid_planes()
    target = FeatureMap(np.zeros((0, 3)), np.zeros((0, 3)), floor)
    src = FeatureSet(ground=_ps(floor[::3]))
    with pytest.raises(DegenerateGeometryError) as info:
        register(src, target, Se3Pose(translation=[0.1, 0.0, 0.0]))
    assert info.value.result.min_eigenvalue < RegistrationConfig().degeneracy_threshold


def test_empty_inputs_rejected():
    floor, walls = _grid_planes()
    with pytest.raises(ValueError):
        register(FeatureSet(), FeatureMap(np.zeros((0, 3)), walls, floor), Se3Pose())


def test_far_guess_finds_no_correspondences():
    floor, walls = _grid_planes()
    target = FeatureMap(np.zeros((0, 3)), walls, floor)
    src = FeatureSet(surfaces=_ps(walls[::3]), ground=_ps(floor[::3]))
    with pytest.raises(DegenerateGeometryError, match="correspondences"):
        register(src, target, Se3Pose(translation=[50.0, 0.0, 0.0]))


def test_from_points_thins():
    pts = np.random.default_rng(0).uniform(0, 1, size=(1000, 3))
    fm = FeatureMap.from_points(pts, voxel=0.5)
    assert len(fm.surfaces) <= 8 and np.array_equal(fm.surfaces, fm.ground)
    assert len(FeatureMap.from_points(pts)) == 2000


@pytest.mark.parametrize("offset, yaw_deg", [((0.3, 0.0, 0.0), 0.0), ((0.0, -0.2, 0.1), 3.0), ((0.1, 0.1, 0.0), -2.0)])
def test_register_scan_pair(street, offset, yaw_deg):
    world, cfg, spline, _ = street
    rng = np.random.default_rng(11)
    fa, _ = simulate_scan(world, spline, 30.0, cfg.lidar, rng=rng, static=True)
    fb, _ = simulate_scan(world, spline, 30.1, cfg.lidar, rng=rng, static=True)
    rel = spline.evaluate(30.0).inverse() * spline.evaluate(30.1)
    target = FeatureMap.from_features([(Se3Pose(), extract_target_features(fa, segment_ground(fa)))])
    src = extract_features(fb, segment_ground(fb))
    guess = rel * Se3Pose(rot_exp([0.0, 0.0, np.radians(yaw_deg)]), offset)
    res = register(src, target, guess)
    err = rel.inverse() * res.pose
    assert np.linalg.norm(err.translation) < 0.01
    assert np.degrees(err.rotation.angle()) < 0.1
