import numpy as np
import pytest

from gpslio.geo import EnuPoint, GeoLla
from gpslio.geom import Rotation, Se3Pose, rot_exp
from gpslio.imu import ImuBias, NavState, PreintegratedImu
from gpslio.posegraph import (
    GpsFactor,
    GraphError,
    LidarOdometryFactor,
    LoopClosureFactor,
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
    merge_sessions,
    optimize_window,
    remove_factor,
    total_cost,
    verify_loop_candidate,
)
from gpslio.posegraph import _gps_terms, _preint_terms, _relpose_terms
from gpslio.registration import RegistrationResult

G = np.array([0.0, 0.0, -9.80665])


def state_at(x, t, y=0.0):
    return NavState(Se3Pose(Rotation.identity(), [x, y, 0.0]), np.zeros(3), ImuBias(), t)


def _raw(rng):
    return rot_exp(rng.normal(size=3)).matrix, rng.normal(size=3) * 3, rng.normal(size=3)


def _perturb(s, d):
    r, p, v = s
    return r @ rot_exp(d[:3]).matrix, p + d[3:6], v + d[6:9]


def _numeric(fn, s, eps=1e-6):
    r0 = fn(s)
    jac = np.zeros((len(r0), 9))
    for k in range(9):
        d = np.zeros(9)
        d[k] = eps
        jac[:, k] = (fn(_perturb(s, d)) - fn(_perturb(s, -d))) / (2 * eps)
    return jac


@pytest.mark.parametrize("kind", ["preint", "relpose"])
def test_binary_jacobians(rng, kind):
    si, sj = _raw(rng), _raw(rng)
    if kind == "preint":
        f = PreintegratedImu(rot_exp(rng.normal(size=3) * 0.1), rng.normal(size=3), rng.normal(size=3), 0.1, ImuBias(), np.eye(9))
        fn = lambda a, b: _preint_terms(f, a, b, G)
    else:
        z = Se3Pose(rot_exp(rng.normal(size=3)), rng.normal(size=3))
        fn = lambda a, b: _relpose_terms(z, a, b)
    _, ji, jj = fn(si, sj)
    assert np.abs(_numeric(lambda s: fn(s, sj)[0], si) - ji).max() < 1e-7
    assert np.abs(_numeric(lambda s: fn(si, s)[0], sj) - jj).max() < 1e-7


def test_gps_jacobian(rng):
    f = GpsFactor(0, EnuPoint(1, 2, 3), np.eye(3))
    lever = np.array([0.3, -0.2, 0.5])
    s = _raw(rng)
    fn = lambda x: _gps_terms(f, x, lever, np.zeros(3))
    assert np.abs(_numeric(lambda x: fn(x)[0], s) - fn(s)[1]).max() < 1e-7


def _chain(odometry_information):
    graph = PoseGraph(anchor_first=False)
    a = add_state_node(graph, state_at(0.0, 0.0))
    b = add_state_node(graph, state_at(10.0, 1.0))
    info = np.diag([odometry_information] * 3 + [1.0] * 3)
    add_factor(graph, LidarOdometryFactor(a, b, Se3Pose(translation=[10.0, 0.0, 0.0]), info))
    add_factor(graph, GpsFactor(a, EnuPoint(0, 0, 0), np.eye(3)))
    add_factor(graph, GpsFactor(b, EnuPoint(9, 0, 0), np.eye(3)))
    report = optimize_window(graph)
    return graph, report


@pytest.mark.parametrize(
    "odometry_information, x0, x1",
    [(1.0, -1.0 / 3.0, 28.0 / 3.0), (0.5, -0.25, 9.25), (2.0, -0.4, 9.4)],
)
def test_chain_closed_form(odometry_information, x0, x1):
    graph, report = _chain(odometry_information)
    assert report.converged
    assert graph.state(0).position == pytest.approx([x0, 0, 0], abs=1e-9)
    assert graph.state(1).position == pytest.approx([x1, 0, 0], abs=1e-9)
    assert report.final_cost < report.initial_cost


def test_window_freezes_oldest_nodes():
    graph = PoseGraph(window=SlidingWindow(5))
    for k in range(8):
        add_state_node(graph, state_at(float(k), float(k)))
    fixed = [n.id for n in graph.nodes.values() if n.fixed]
    assert fixed == [0, 1, 2, 3]
    assert graph.window.active == [3, 4, 5, 6, 7]
    assert graph.window.boundary == 3


def test_frozen_nodes_do_not_move():
    graph = PoseGraph(window=SlidingWindow(3))
    for k in range(5):
        add_state_node(graph, state_at(float(k), float(k)))
    for k in range(4):
        add_factor(graph, lidar_factor(k, k + 1, Se3Pose(translation=[1.2, 0.0, 0.0])))
    optimize_window(graph)
    assert graph.state(2).position[0] == 2.0
    assert graph.state(3).position[0] == pytest.approx(3.2, abs=1e-9)
    assert graph.state(4).position[0] == pytest.approx(4.4, abs=1e-9)


def test_stamps_must_increase():
    graph = PoseGraph()
    add_state_node(graph, state_at(0.0, 1.0))
    with pytest.raises(GraphError):
        add_state_node(graph, state_at(0.0, 1.0))


def test_factor_validation():
    graph = PoseGraph()
    add_state_node(graph, state_at(0.0, 0.0))
    with pytest.raises(GraphError, match="unknown node"):
        add_factor(graph, lidar_factor(0, 3, Se3Pose()))
    with pytest.raises(GraphError, match="distinct"):
        add_factor(graph, lidar_factor(0, 0, Se3Pose()))
    with pytest.raises(GraphError, match="positive definite"):
        GpsFactor(0, EnuPoint(0, 0, 0), -np.eye(3))
    with pytest.raises(GraphError, match="6x6"):
        LidarOdometryFactor(0, 1, Se3Pose(), np.eye(3))
    with pytest.raises(GraphError):
        remove_factor(graph, 99)


def _gps_graph():
    graph = PoseGraph()
    for k in range(10):
        add_state_node(graph, state_at(float(k), float(k)))
    return graph


def test_gps_gate_and_reset():
    graph = _gps_graph()
    cfg = graph.config
    # 2 m sigma: a 3 m error gives d2 = 2.25 and passes.
    assert add_factor(graph, gps_factor(1, EnuPoint(1.0, 3.0, 0.0), cfg)) is not None
    outliers = [add_factor(graph, gps_factor(k, EnuPoint(float(k), 20.0, 0.0), cfg)) for k in range(2, 9)]
    assert outliers[:5] == [None] * 5
    assert outliers[5] is not None
    assert outliers[6] is None
    assert len(graph.rejected) == 6
    assert "chi-square" in graph.rejected[0][1]


def test_invalid_fix_quality_is_rejected():
    graph = _gps_graph()
    assert add_factor(graph, gps_factor(1, EnuPoint(1.0, 0.0, 0.0), fix_quality=0)) is None
    assert graph.rejected[-1][1] == "invalid fix quality"


def test_enu_offset_is_estimated():
    cfg = SolverConfig(estimate_enu_offset=True)
    graph = PoseGraph(config=cfg, window=SlidingWindow(10))
    offset = np.array([3.0, -2.0, 0.5])
    for k in range(6):
        add_state_node(graph, state_at(float(k), float(k)))
    for k in range(5):
        add_factor(graph, lidar_factor(k, k + 1, Se3Pose(translation=[1.0, 0.0, 0.0]), cfg))
    for k in range(6):
        add_factor(graph, GpsFactor(k, EnuPoint(*(np.array([k, 0.0, 0.0]) + offset)), np.eye(3) * 0.25))
    optimize_window(graph)
    assert graph.enu_offset == pytest.approx(offset, abs=1e-6)
    assert graph.world_position(5) == pytest.approx([5.0 + 3.0, -2.0, 0.5], abs=1e-6)


def test_preintegration_factor_holds_velocity():
    graph = PoseGraph()
    a = add_state_node(graph, NavState(Se3Pose(), [1.0, 0.0, 0.0], ImuBias(), 0.0))
    b = add_state_node(graph, NavState(Se3Pose(translation=[0.5, 0.0, 0.0]), [0.0, 0.0, 0.0], ImuBias(), 1.0))
    dv = -G  # a level body at rest measures +g in specific force
    f = PreintegratedImu(Rotation.identity(), dv * 1.0, dv * 0.5, 1.0, ImuBias(), np.eye(9), start_stamp=0.0)
    add_factor(graph, PreintegrationFactor(a, b, f))
    optimize_window(graph)
    assert graph.state(b).position == pytest.approx([1.0, 0.0, 0.0], abs=1e-9)
    assert graph.state(b).velocity == pytest.approx([1.0, 0.0, 0.0], abs=1e-9)


def test_optimize_needs_free_factor():
    graph = PoseGraph()
    add_state_node(graph, state_at(0.0, 0.0))
    with pytest.raises(GraphError):
        optimize_window(graph)


def test_total_cost():
    graph, _ = _chain(1.0)
    # Residuals -1/3, -1/3 and -1/3 along x, unit information.
    assert total_cost(graph) == pytest.approx(3.0 / 9.0, abs=1e-12)


def test_associate_gps():
    graph = _gps_graph()
    assert associate_gps(graph, 3.04) == 3
    assert associate_gps(graph, 3.5) is None
    assert associate_gps(graph, 3.5, tolerance=0.6) in (3, 4)


def test_loop_candidates_and_verification():
    graph = PoseGraph(window=SlidingWindow(3))
    for k in range(8):
        add_state_node(graph, state_at(float(k % 4), float(k)))
    assert detect_loop_candidates(graph, 7, radius=0.5, exclusion=2) == [3]
    fake = lambda guess: RegistrationResult(guess * Se3Pose(translation=[0.1, 0, 0]), 0.01, 3, True, 100)
    link = verify_loop_candidate(graph, 7, 3, fake, max_cost=0.01)
    assert isinstance(link, LoopClosureFactor) and (link.i, link.j) == (3, 7)
    assert link.relative_pose.translation == pytest.approx([0.1, 0, 0])
    bad = lambda guess: RegistrationResult(guess, 100.0, 3, True, 10)
    assert verify_loop_candidate(graph, 7, 3, bad, max_cost=0.01) is None

    def boom(guess):
        raise RuntimeError("degenerate")

    assert verify_loop_candidate(graph, 7, 3, boom, max_cost=1.0) is None


def _line_graph(n, x0, anchor):
    graph = PoseGraph(anchor=anchor)
    for k in range(n):
        add_state_node(graph, state_at(x0 + k, float(k)))
    for k in range(n - 1):
        add_factor(graph, lidar_factor(k, k + 1, Se3Pose(translation=[1.0, 0.0, 0.0])))
    return graph


def test_merge_sessions_joins_graphs():
    anchor = GeoLla.from_degrees(31.0, 121.0, 0.0)
    old = _line_graph(4, 0.0, anchor)
    new = _line_graph(3, 0.3, anchor)
    link = LoopClosureFactor(2, 0, Se3Pose(), np.eye(6))
    merged, mapping, report = merge_sessions(old, new, [link])
    assert mapping == {0: 4, 1: 5, 2: 6}
    assert merged.state(4).position == pytest.approx([2.0, 0, 0], abs=1e-6)
    assert merged.state(6).position == pytest.approx([4.0, 0, 0], abs=1e-6)
    assert all(merged.nodes[k].fixed for k in range(4))
    with pytest.raises(GraphError):
        merge_sessions(old, new, [])
    with pytest.raises(GraphError):
        merge_sessions(old, new, [LoopClosureFactor(9, 0, Se3Pose(), np.eye(6))])
