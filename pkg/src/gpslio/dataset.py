"""On-disk dataset layout shared by the simulator and the pipeline.

::

    dataset.toml        header: seed, RNG algorithm, sensor and config echo
    imu.csv             t,wx,wy,wz,ax,ay,az
    gps.csv             t,lat_deg,lon_deg,alt_m,fix_quality
    scans/index.csv     frame,stamp
    scans/NNNNNN.bin    little-endian float32 records x y z ring rel_time
    gt.csv              TUM trajectory of the body frame (optional)
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli_w

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .features import PointCloudFrame
from .geo import GeoLla
from .geom import Se3Pose, format_tum_line, read_tum_arrays
from .imu import ImuSeries

SCAN_DTYPE = np.dtype("<f4")


class DatasetError(ValueError):
    """Malformed dataset; the message names the file and, when known, the line."""

    def __init__(self, path, message: str, line: int | None = None):
        where = f"{path}" if line is None else f"{path}:{line}"
        super().__init__(f"{where}: {message}")
        self.path = str(path)
        self.line = line


@dataclass
class GpsRecord:
    stamp: float
    lla: GeoLla
    fix_quality: int


@dataclass
class LidarHeader:
    rings: int = 16
    scan_period: float = 0.1


@dataclass
class Dataset:
    root: Path
    imu: ImuSeries
    gps: list[GpsRecord]
    scan_stamps: np.ndarray
    lidar: LidarHeader = field(default_factory=LidarHeader)
    header: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.scan_stamps)

    def scan(self, k: int) -> PointCloudFrame:
        return read_scan(
            self.root / "scans" / f"{k:06d}.bin", float(self.scan_stamps[k]), self.lidar
        )

    def ground_truth(self):
        """``(stamps, positions, quaternions_wxyz)`` or ``None`` without ``gt.csv``."""
        gt = self.root / "gt.csv"
        return read_tum_arrays(gt) if gt.exists() else None

    @property
    def anchor(self) -> GeoLla | None:
        a = self.header.get("world", {}).get("anchor")
        if a is None:
            return None
        return GeoLla.from_degrees(a["lat_deg"], a["lon_deg"], a["alt_m"])


def _fmt(x: float) -> str:
    return repr(float(x))


def _plain(obj):
    """Dataclass trees to TOML-friendly dicts (``None`` dropped, tuples as lists)."""
    if isinstance(obj, Se3Pose):
        x, y, z = obj.translation
        qx, qy, qz, qw = obj.rotation.xyzw
        return {"translation": [float(x), float(y), float(z)], "quaternion_xyzw": [qx, qy, qz, qw]}
    if isinstance(obj, GeoLla):
        return {
            "lat_deg": math.degrees(obj.latitude),
            "lon_deg": math.degrees(obj.longitude),
            "alt_m": obj.altitude,
        }
    if dataclasses.is_dataclass(obj):
        out = {}
        for f in dataclasses.fields(obj):
            v = _plain(getattr(obj, f.name))
            if v is not None:
                out[f.name] = v
        return out
    if isinstance(obj, np.ndarray):
        return [float(v) for v in obj.reshape(-1)]
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def write_scan(path: Path, frame: PointCloudFrame) -> None:
    rec = np.empty((len(frame), 5), dtype=SCAN_DTYPE)
    rec[:, :3] = frame.points
    rec[:, 3] = frame.ring
    rec[:, 4] = frame.relative_time
    path.write_bytes(rec.tobytes())


def read_scan(path: Path, stamp: float, lidar: LidarHeader = LidarHeader()) -> PointCloudFrame:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DatasetError(path, f"cannot read scan: {exc}") from exc
    if len(raw) % (5 * SCAN_DTYPE.itemsize):
        raise DatasetError(path, "size is not a whole number of 20-byte records")
    rec = np.frombuffer(raw, dtype=SCAN_DTYPE).reshape(-1, 5).astype(float)
    rel = np.minimum(rec[:, 4], np.nextafter(lidar.scan_period, 0.0))
    try:
        return PointCloudFrame(
            rec[:, :3],
            rec[:, 3].astype(np.int64),
            rel,
            frame_stamp=stamp,
            scan_period=lidar.scan_period,
            ring_count=lidar.rings,
        )
    except ValueError as exc:
        raise DatasetError(path, str(exc)) from exc


def write_dataset_files(ds, root: Path, extra_header: dict) -> None:
    """Serialise a :class:`~gpslio.simulator.SimDataset`."""
    from .simulator import RNG_ALGORITHM

    root.mkdir(parents=True, exist_ok=True)
    (root / "scans").mkdir(exist_ok=True)
    cfg = ds.config
    header = {
        "format_version": 1,
        "generator": {"seed": cfg.seed, "rng": RNG_ALGORITHM},
        "world": {"name": ds.world.name, "anchor": _plain(ds.world.anchor), "boxes": len(ds.world.boxes)},
        "lidar": {"rings": cfg.lidar.rings, "scan_period": cfg.lidar.scan_period},
        "sim": _plain(cfg),
    }
    header.update(extra_header)
    with open(root / "dataset.toml", "wb") as fh:
        tomli_w.dump(header, fh)

    lines = ["t,wx,wy,wz,ax,ay,az"]
    imu = ds.imu
    for t, w, a in zip(imu.stamps, imu.gyro, imu.accel):
        lines.append(",".join(_fmt(v) for v in (t, *w, *a)))
    (root / "imu.csv").write_text("\n".join(lines) + "\n")

    lines = ["t,lat_deg,lon_deg,alt_m,fix_quality"]
    for fix in ds.gps:
        lines.append(
            f"{_fmt(fix.stamp)},{_fmt(math.degrees(fix.lla.latitude))},"
            f"{_fmt(math.degrees(fix.lla.longitude))},{_fmt(fix.lla.altitude)},{fix.fix_quality}"
        )
    (root / "gps.csv").write_text("\n".join(lines) + "\n")

    lines = ["frame,stamp"]
    for k, frame in enumerate(ds.frames):
        write_scan(root / "scans" / f"{k:06d}.bin", frame)
        lines.append(f"{k},{_fmt(frame.frame_stamp)}")
    (root / "scans" / "index.csv").write_text("\n".join(lines) + "\n")

    gt_lines = ["# t x y z qx qy qz qw"]
    for t, m in zip(ds.gt_stamps, ds.gt_poses):
        gt_lines.append(format_tum_line(float(t), Se3Pose.from_matrix(m)))
    (root / "gt.csv").write_text("\n".join(gt_lines) + "\n")


def _read_csv(path: Path, columns: list[str]) -> list[tuple[int, list[str]]]:
    if not path.exists():
        raise DatasetError(path, "missing file")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            head = next(reader)
        except StopIteration:
            raise DatasetError(path, "empty file, expected a header line", 1) from None
        if [h.strip() for h in head] != columns:
            raise DatasetError(path, f"header must be {','.join(columns)}", 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(columns):
                raise DatasetError(path, f"expected {len(columns)} fields, got {len(row)}", lineno)
            rows.append((lineno, row))
    return rows


def _floats(path, lineno, row) -> list[float]:
    try:
        vals = [float(v) for v in row]
    except ValueError:
        raise DatasetError(path, f"non-numeric field in {row}", lineno) from None
    if not all(math.isfinite(v) for v in vals):
        raise DatasetError(path, "non-finite value", lineno)
    return vals


def read_imu(path: Path) -> ImuSeries:
    rows = _read_csv(path, ["t", "wx", "wy", "wz", "ax", "ay", "az"])
    data = np.array([_floats(path, n, r) for n, r in rows]).reshape(-1, 7)
    for k in range(1, len(data)):
        if data[k, 0] <= data[k - 1, 0]:
            raise DatasetError(path, "timestamps must be strictly increasing", rows[k][0])
    return ImuSeries(data[:, 0], data[:, 1:4], data[:, 4:7])


def read_gps(path: Path) -> list[GpsRecord]:
    out = []
    for lineno, row in _read_csv(path, ["t", "lat_deg", "lon_deg", "alt_m", "fix_quality"]):
        t, lat, lon, alt = _floats(path, lineno, row[:4])
        try:
            q = int(row[4])
        except ValueError:
            raise DatasetError(path, f"fix_quality {row[4]!r} is not an integer", lineno) from None
        try:
            lla = GeoLla.from_degrees(lat, lon, alt)
        except ValueError as exc:
            raise DatasetError(path, str(exc), lineno) from None
        out.append(GpsRecord(t, lla, q))
    return out


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(root, "dataset directory not found")
    header = {}
    hpath = root / "dataset.toml"
    if hpath.exists():
        try:
            header = tomllib.loads(hpath.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise DatasetError(hpath, str(exc)) from exc
    lid = header.get("lidar", {})
    lidar = LidarHeader(int(lid.get("rings", 16)), float(lid.get("scan_period", 0.1)))
    imu = read_imu(root / "imu.csv")
    gps_path = root / "gps.csv"
    gps = read_gps(gps_path) if gps_path.exists() else []
    idx_path = root / "scans" / "index.csv"
    rows = _read_csv(idx_path, ["frame", "stamp"])
    stamps = []
    for k, (lineno, row) in enumerate(rows):
        frame_no, stamp = _floats(idx_path, lineno, row)
        if int(frame_no) != k:
            raise DatasetError(idx_path, f"frame numbers must run 0..N-1, got {row[0]}", lineno)
        if stamps and stamp <= stamps[-1]:
            raise DatasetError(idx_path, "frame stamps must be strictly increasing", lineno)
        stamps.append(stamp)
    return Dataset(root, imu, gps, np.array(stamps), lidar, header)
