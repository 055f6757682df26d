import shutil

import numpy as np
import pytest

from gpslio.dataset import DatasetError, load_dataset, read_scan, write_scan
from gpslio.features import PointCloudFrame


def test_load_small_dataset(small_dataset):
    ds = load_dataset(small_dataset)
    assert len(ds) == 126
    assert ds.scan_stamps[:3] == pytest.approx([0.0, 0.1, 0.2])
    assert ds.lidar.rings == 16 and ds.lidar.scan_period == 0.1
    assert ds.anchor is not None and ds.header["scenario"] == "box-street"
    frame = ds.scan(3)
    assert frame.frame_stamp == pytest.approx(0.3) and len(frame) > 10000
    t, p, q = ds.ground_truth()
    assert len(t) == len(ds.imu) and np.allclose(np.linalg.norm(q, axis=1), 1.0)


def test_scan_round_trip_is_float32(tmp_path):
    pts = np.array([[1.0, 2.0, 3.0], [0.1, -0.2, 0.3]])
    f = PointCloudFrame(pts, [0, 15], [0.0, 0.05], frame_stamp=2.0)
    write_scan(tmp_path / "s.bin", f)
    back = read_scan(tmp_path / "s.bin", 2.0)
    assert np.array_equal(back.points, pts.astype(np.float32).astype(float))
    assert back.ring.tolist() == [0, 15]
    (tmp_path / "bad.bin").write_bytes(b"\0" * 21)
    with pytest.raises(DatasetError, match="20-byte"):
        read_scan(tmp_path / "bad.bin", 0.0)


@pytest.fixture
def copy(small_dataset, tmp_path):
    dst = tmp_path / "d"
    shutil.copytree(small_dataset, dst)
    return dst


def _edit_line(path, lineno, text):
    lines = path.read_text().splitlines()
    lines[lineno - 1] = text
    path.write_text("\n".join(lines) + "\n")


@pytest.mark.parametrize(
    "name, lineno, text, message",
    [
        ("imu.csv", 3, "0.0,0,0,0,0,0,9.8", "increasing"),
        ("imu.csv", 4, "0.01,0,0,x,0,0,9.8", "non-numeric"),
        ("imu.csv", 1, "t,wx,wy,wz,ax,ay", "header"),
        ("gps.csv", 2, "0.0,95.0,121.0,4.0,1", "latitude"),
        ("gps.csv", 3, "1.0,31.0,121.0,4.0,good", "integer"),
        ("scans/index.csv", 3, "5,0.1", "frame numbers"),
    ],
)
def test_errors_name_file_and_line(copy, name, lineno, text, message):
    _edit_line(copy / name, lineno, text)
    with pytest.raises(DatasetError, match=message) as info:
        load_dataset(copy)
    assert info.value.path.endswith(name)
    if lineno > 1:
        assert info.value.line == lineno


def test_missing_pieces(copy, tmp_path):
    with pytest.raises(DatasetError, match="not found"):
        load_dataset(tmp_path / "nothing")
    (copy / "imu.csv").unlink()
    with pytest.raises(DatasetError, match="missing file"):
        load_dataset(copy)


def test_gps_is_optional(copy):
    (copy / "gps.csv").unlink()
    assert load_dataset(copy).gps == []
