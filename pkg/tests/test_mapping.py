import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gpslio.geo import EnuPoint, GeoLla
from gpslio.geom import Se3Pose, rot_exp
from gpslio.imu import ImuBias, ImuNoiseModel, ImuSeries, NavState, preintegrate
from gpslio.mapping import (
    MapCloud,
    Session,
    SessionError,
    encode_session,
    export_ascii,
    graphs_equal,
    insert_scan,
    load_session,
    merge_map,
    save_session,
    voxel_keys,
)
from gpslio.posegraph import (
    PoseGraph,
    PreintegrationFactor,
    SlidingWindow,
    add_factor,
    add_state_node,
    gps_factor,
    lidar_factor,
    loop_factor,
)

from conftest import random_pose


def test_insert_averages_within_voxel():
    cloud = MapCloud(voxel_size=1.0)
    insert_scan(cloud, Se3Pose(), np.array([[0.1, 0.1, 0.1], [0.3, 0.5, 0.9], [1.5, 0.0, 0.0]]))
    assert cloud.keys.tolist() == [[0, 0, 0], [1, 0, 0]]
    assert cloud.centroids[0] == pytest.approx([0.2, 0.3, 0.5])
    assert cloud.counts.tolist() == [2, 1]
    insert_scan(cloud, Se3Pose(translation=[0.0, 0.0, -1.0]), np.array([[0.5, 0.5, 1.5]]))
    assert cloud.counts.tolist() == [3, 1]
    assert cloud.centroids[0] == pytest.approx([0.3, 1.1 / 3, 0.5])


def test_negative_coordinates_floor():
    assert voxel_keys(np.array([[-0.1, 0.0, 0.99]]), 0.5).tolist() == [[-1, 0, 1]]


def test_keys_stay_sorted(rng):
    cloud = MapCloud(voxel_size=0.3)
    for _ in range(5):
        insert_scan(cloud, random_pose(rng), rng.normal(size=(500, 3)) * 10)
    codes = [tuple(k) for k in cloud.keys.tolist()]
    assert codes == sorted(codes) and len(set(codes)) == len(codes)
    assert cloud.counts.sum() == 2500


@settings(max_examples=30, deadline=None)
@given(arrays(float, (40, 3), elements=st.floats(-50, 50)), st.integers(1, 39))
def test_insert_order_does_not_change_voxels(pts, split):
    a = MapCloud(voxel_size=0.5)
    insert_scan(a, Se3Pose(), pts)
    b = MapCloud(voxel_size=0.5)
    insert_scan(b, Se3Pose(), pts[split:])
    insert_scan(b, Se3Pose(), pts[:split])
    assert np.array_equal(a.keys, b.keys) and np.array_equal(a.counts, b.counts)
    assert np.allclose(a.centroids, b.centroids, atol=1e-12)


def test_merge_map_weights_by_count():
    base = MapCloud(voxel_size=1.0)
    insert_scan(base, Se3Pose(), np.array([[0.2, 0.2, 0.2]] * 3))
    other = MapCloud(voxel_size=1.0)
    insert_scan(other, Se3Pose(), np.array([[-0.4, 0.6, 0.6]]))
    merged = merge_map(base, other, Se3Pose(translation=[1.0, 0.0, 0.0]))
    assert merged.counts.tolist() == [4]
    assert merged.centroids[0] == pytest.approx([0.3, 0.3, 0.3])
    assert len(base) == 1 and base.counts.tolist() == [3]
    with pytest.raises(ValueError):
        merge_map(base, MapCloud(voxel_size=0.5))


def test_export_ascii(tmp_path):
    cloud = MapCloud(voxel_size=1.0)
    insert_scan(cloud, Se3Pose(), np.array([[0.5, 0.5, 0.5], [2.25, 0.0, 0.0]]))
    assert export_ascii(cloud, tmp_path / "m.xyz") == 2
    assert (tmp_path / "m.xyz").read_text() == "0.500000 0.500000 0.500000 1\n2.250000 0.000000 0.000000 1\n"


def _session(rng):
    anchor = GeoLla.from_degrees(31.2304, 121.4737, 4.0)
    graph = PoseGraph(anchor=anchor, window=SlidingWindow(4))
    series = ImuSeries(np.arange(41) / 400.0, rng.normal(size=(41, 3)) * 0.1, rng.normal(size=(41, 3)) + [0, 0, 9.8])
    for k in range(6):
        add_state_node(graph, NavState(random_pose(rng), rng.normal(size=3), ImuBias(rng.normal(size=3) * 1e-3), 0.1 * k))
    for k in range(5):
        add_factor(graph, lidar_factor(k, k + 1, random_pose(rng, 0.1, 1.0)))
    f = preintegrate(series, ImuBias(), ImuNoiseModel())
    add_factor(graph, PreintegrationFactor(0, 1, f))
    add_factor(graph, loop_factor(0, 5, random_pose(rng)))
    add_factor(graph, gps_factor(2, EnuPoint(*graph.state(2).position), stamp=0.2))
    graph.enu_offset = np.array([0.1, -1 / 3, 2.5])
    cloud = MapCloud(voxel_size=0.2, anchor=anchor)
    insert_scan(cloud, Se3Pose(), rng.normal(size=(300, 3)) * 5)
    return Session(graph, cloud, anchor, keyframes=[0, 3, 5])


def test_round_trip_is_byte_identical(tmp_path, rng):
    s = _session(rng)
    save_session(s, tmp_path / "a.sess")
    back = load_session(tmp_path / "a.sess")
    save_session(back, tmp_path / "b.sess")
    assert (tmp_path / "a.sess").read_bytes() == (tmp_path / "b.sess").read_bytes()
    assert graphs_equal(s.graph, back.graph)
    assert back.map == s.map
    assert back.keyframes == [0, 3, 5]
    assert back.anchor == s.anchor
    assert [n.fixed for n in back.graph.nodes.values()] == [n.fixed for n in s.graph.nodes.values()]


@pytest.mark.parametrize("section", ["header", "graph", "map"])
def test_corrupted_section_is_named(tmp_path, rng, section):
    raw = bytearray(encode_session(_session(rng)))
    start = raw.index(f"@section {section} ".encode())
    body = raw.index(b"\n", start) + 5
    raw[body] = ord("#") if raw[body] != ord("#") else ord("!")
    (tmp_path / "bad.sess").write_bytes(bytes(raw))
    with pytest.raises(SessionError, match=section) as info:
        load_session(tmp_path / "bad.sess")
    assert info.value.section == section


@pytest.mark.parametrize(
    "mangle, section",
    [
        (lambda b: b[:40], "header"),
        (lambda b: b.replace(b"GPSLIO-SESSION 1", b"GPSLIO-SESSION 9"), "header"),
        (lambda b: b[: b.index(b"@section map")], "map"),
        (lambda b: b[:-5], "map"),
        (lambda b: b"nonsense", "header"),
    ],
)
def test_truncated_or_foreign_files(tmp_path, rng, mangle, section):
    (tmp_path / "x.sess").write_bytes(mangle(encode_session(_session(rng))))
    with pytest.raises(SessionError) as info:
        load_session(tmp_path / "x.sess")
    assert info.value.section == section


def test_missing_file(tmp_path):
    with pytest.raises(SessionError, match="cannot read"):
        load_session(tmp_path / "nope.sess")


def test_session_rejects_unknown_keyframes():
    with pytest.raises(ValueError):
        Session(keyframes=[3])
