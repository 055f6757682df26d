"""Voxel-centroid world map and session persistence.

Session file layout (``session.gfz``)::

    GPSLIO-SESSION <version>
    @section header <nbytes> <crc32>     text: key = value lines
    @section graph <nbytes> <crc32>      text: node and factor lines
    @section map <nbytes> <crc32>        binary voxel records
    @end

Each section line is followed by exactly ``nbytes`` payload bytes and a
newline. Floats in text sections use 17 significant digits, so a reload
reproduces every stored double.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import PointSet
from .geo import EnuPoint, GeoLla
from .geom import Rotation, Se3Pose
from .imu import ImuBias, NavState, PreintegratedImu
from .posegraph import (
    GpsFactor,
    LidarOdometryFactor,
    LoopClosureFactor,
    PoseGraph,
    PreintegrationFactor,
    SlidingWindow,
    StateNode,
)

FORMAT_VERSION = 1
MAGIC = "GPSLIO-SESSION"
VOXEL_DTYPE = np.dtype(
    [("ix", "<i8"), ("iy", "<i8"), ("iz", "<i8"), ("x", "<f8"), ("y", "<f8"), ("z", "<f8"), ("count", "<i8")]
)


class SessionError(ValueError):
    """Unreadable session file; ``section`` names the part that failed."""

    def __init__(self, section: str, message: str, parsed: tuple[str, ...] = ()):
        super().__init__(f"session section {section!r}: {message}")
        self.section = section
        self.parsed = parsed


# --------------------------------------------------------------------------- map


@dataclass(eq=False)
class MapCloud:
    """One centroid and hit count per occupied voxel, keys sorted lexicographically."""

    voxel_size: float = 0.2
    anchor: GeoLla | None = None
    keys: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    centroids: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        if not self.voxel_size > 0.0:
            raise ValueError("voxel size must be positive")

    def __len__(self) -> int:
        return len(self.keys)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MapCloud):
            return NotImplemented
        return (
            self.voxel_size == other.voxel_size
            and self.anchor == other.anchor
            and np.array_equal(self.keys, other.keys)
            and np.array_equal(self.centroids, other.centroids)
            and np.array_equal(self.counts, other.counts)
        )

    __hash__ = None

    def voxel_set(self) -> set[tuple[int, int, int]]:
        return set(map(tuple, self.keys.tolist()))

    def copy(self) -> "MapCloud":
        return MapCloud(self.voxel_size, self.anchor, self.keys.copy(), self.centroids.copy(), self.counts.copy())

    def _fold(self, keys: np.ndarray, sums: np.ndarray, counts: np.ndarray) -> None:
        """Add per-point (or per-voxel) coordinate sums and counts into the store."""
        codes = _encode(keys)
        uniq, first, inv = np.unique(codes, return_index=True, return_inverse=True)
        inv = inv.reshape(-1)
        add = np.column_stack([np.bincount(inv, weights=sums[:, k], minlength=len(uniq)) for k in range(3)])
        cnt = np.bincount(inv, weights=counts, minlength=len(uniq)).astype(np.int64)
        old = _encode(self.keys)
        pos = np.searchsorted(old, uniq)
        hit = pos < len(old)
        hit[hit] = old[pos[hit]] == uniq[hit]
        cents = self.centroids.copy()
        tot = self.counts.copy()
        at = pos[hit]
        merged = tot[at] + cnt[hit]
        cents[at] = (cents[at] * tot[at, None] + add[hit]) / merged[:, None]
        tot[at] = merged
        miss = ~hit
        ins = pos[miss]
        self.keys = np.insert(self.keys, ins, keys[first[miss]], axis=0)
        self.centroids = np.insert(cents, ins, add[miss] / cnt[miss, None], axis=0)
        self.counts = np.insert(tot, ins, cnt[miss])


_KEY_BITS = 21
_KEY_OFFSET = 1 << (_KEY_BITS - 1)


def _encode(keys: np.ndarray) -> np.ndarray:
    """Order-preserving 63-bit code of integer voxel keys (lexicographic)."""
    k = np.asarray(keys, dtype=np.int64).reshape(-1, 3) + _KEY_OFFSET
    if len(k) and (k.min() < 0 or k.max() >= 1 << _KEY_BITS):
        raise ValueError("voxel index outside the encodable range")
    return (k[:, 0] << (2 * _KEY_BITS)) | (k[:, 1] << _KEY_BITS) | k[:, 2]


def voxel_keys(points: np.ndarray, voxel_size: float) -> np.ndarray:
    return np.floor(np.asarray(points, dtype=float) / voxel_size).astype(np.int64)


def insert_scan(cloud: MapCloud, pose: Se3Pose, scan) -> MapCloud:
    """Fold the world-frame points of ``scan`` into ``cloud`` (in place; returned)."""
    pts = scan.points if isinstance(scan, PointSet) or hasattr(scan, "points") else np.asarray(scan)
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return cloud
    world = pose.apply(pts)
    cloud._fold(voxel_keys(world, cloud.voxel_size), world, np.ones(len(world), dtype=np.int64))
    return cloud


def merge_map(base: MapCloud, incoming: MapCloud, alignment: Se3Pose = Se3Pose.identity()) -> MapCloud:
    """New map: ``incoming`` centroids moved by ``alignment`` and folded into ``base``.

    Each representative carries its hit count as weight.
    """
    if base.voxel_size != incoming.voxel_size:
        raise ValueError(f"voxel size mismatch: {base.voxel_size} vs {incoming.voxel_size}")
    out = base.copy()
    if len(incoming) == 0:
        return out
    moved = alignment.apply(incoming.centroids)
    out._fold(voxel_keys(moved, out.voxel_size), moved * incoming.counts[:, None], incoming.counts)
    return out


def export_ascii(cloud: MapCloud, path) -> int:
    """Write ``x y z count`` lines; returns the number of points written."""
    lines = [f"{x:.6f} {y:.6f} {z:.6f} {int(c)}" for (x, y, z), c in zip(cloud.centroids, cloud.counts)]
    Path(path).write_text("".join(line + "\n" for line in lines))
    return len(lines)


# --------------------------------------------------------------------------- session


@dataclass(eq=False)
class Session:
    graph: PoseGraph = field(default_factory=PoseGraph)
    map: MapCloud = field(default_factory=MapCloud)
    anchor: GeoLla | None = None
    version: int = FORMAT_VERSION
    keyframes: list[int] = field(default_factory=list)

    def __post_init__(self):
        missing = [k for k in self.keyframes if k not in self.graph.nodes]
        if missing:
            raise ValueError(f"keyframes reference unknown nodes {missing[:5]}")


def _g(x: float) -> str:
    return format(float(x), ".17g")


def _gs(values) -> str:
    return " ".join(_g(v) for v in values)


def _pose_fields(pose: Se3Pose) -> list[float]:
    return [*pose.translation, *pose.rotation.xyzw]


def _encode_header(s: Session) -> bytes:
    g = s.graph
    lines = [f"format_version = {s.version}"]
    if s.anchor is not None:
        a = s.anchor
        lines.append(f"anchor_lla_rad = {_gs([a.latitude, a.longitude, a.altitude])}")
    lines += [
        f"voxel_size = {_g(s.map.voxel_size)}",
        f"window_size = {g.window.window_size}",
        f"gravity = {_gs(g.gravity)}",
        f"lever_arm = {_gs(g.lever_arm)}",
        f"enu_offset = {_gs(g.enu_offset)}",
        f"anchor_first = {int(g.anchor_first)}",
        f"keyframes = {' '.join(str(k) for k in s.keyframes)}",
    ]
    return ("\n".join(lines) + "\n").encode()


def _encode_graph(g: PoseGraph) -> bytes:
    lines = ["# node id t x y z qx qy qz qw vx vy vz bgx bgy bgz bax bay baz fixed"]
    for n in g.nodes.values():
        s = n.state
        vals = [s.stamp, *_pose_fields(s.pose), *s.velocity, *s.bias.gyro, *s.bias.accel]
        lines.append(f"node {n.id} {_gs(vals)} {int(n.fixed)}")
    lines.append("# factors carry their full information matrix, row-major")
    for fid, f in g.factors.items():
        if isinstance(f, PreintegrationFactor):
            p = f.factor
            vals = [
                p.start_stamp,
                p.duration,
                *p.delta_rotation.xyzw,
                *p.delta_velocity,
                *p.delta_position,
                *p.bias_reference.gyro,
                *p.bias_reference.accel,
                *p.information.ravel(),
            ]
            lines.append(f"imu {fid} {f.i} {f.j} {_gs(vals)}")
        elif isinstance(f, LidarOdometryFactor):
            tag = "loop" if isinstance(f, LoopClosureFactor) else "lidar"
            vals = [*_pose_fields(f.relative_pose), *f.information.ravel()]
            lines.append(f"{tag} {fid} {f.i} {f.j} {_gs(vals)}")
        elif isinstance(f, GpsFactor):
            stamp = "nan" if f.stamp is None else _g(f.stamp)
            vals = [*f.vector, *f.information.ravel()]
            lines.append(f"gps {fid} {f.i} {f.fix_quality} {stamp} {_gs(vals)}")
    lines.append(f"next_factor {g._next_factor}")
    return ("\n".join(lines) + "\n").encode()


def _encode_map(m: MapCloud) -> bytes:
    rec = np.empty(len(m), dtype=VOXEL_DTYPE)
    if len(m):
        rec["ix"], rec["iy"], rec["iz"] = m.keys.T
        rec["x"], rec["y"], rec["z"] = m.centroids.T
        rec["count"] = m.counts
    return rec.tobytes()


def encode_session(session: Session) -> bytes:
    out = [f"{MAGIC} {session.version}\n".encode()]
    for name, payload in (
        ("header", _encode_header(session)),
        ("graph", _encode_graph(session.graph)),
        ("map", _encode_map(session.map)),
    ):
        crc = zlib.crc32(payload) & 0xFFFFFFFF
        out.append(f"@section {name} {len(payload)} {crc:08x}\n".encode())
        out.append(payload)
        out.append(b"\n")
    out.append(b"@end\n")
    return b"".join(out)


def save_session(session: Session, path) -> None:
    Path(path).write_bytes(encode_session(session))


def _split_sections(raw: bytes) -> dict[str, bytes]:
    nl = raw.find(b"\n")
    if nl < 0:
        raise SessionError("header", "truncated file: no magic line")
    magic = raw[:nl].decode(errors="replace").split()
    if len(magic) != 2 or magic[0] != MAGIC:
        raise SessionError("header", "not a session file")
    if magic[1] != str(FORMAT_VERSION):
        raise SessionError("header", f"format version {magic[1]} not supported (expected {FORMAT_VERSION})")
    pos = nl + 1
    sections: dict[str, bytes] = {}
    for expected in ("header", "graph", "map"):
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise SessionError(expected, "truncated file: section line missing", tuple(sections))
        parts = raw[pos:nl].decode(errors="replace").split()
        if len(parts) != 4 or parts[0] != "@section" or parts[1] != expected:
            raise SessionError(expected, f"malformed section line {raw[pos:nl][:60]!r}", tuple(sections))
        try:
            size, crc = int(parts[2]), int(parts[3], 16)
        except ValueError:
            raise SessionError(expected, "bad size or checksum field", tuple(sections)) from None
        start = nl + 1
        end = start + size
        if end + 1 > len(raw):
            raise SessionError(expected, "truncated file: payload shorter than declared", tuple(sections))
        payload = raw[start:end]
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise SessionError(expected, "checksum mismatch", tuple(sections))
        if raw[end : end + 1] != b"\n":
            raise SessionError(expected, "payload not terminated", tuple(sections))
        sections[expected] = payload
        pos = end + 1
    if raw[pos:].strip() != b"@end":
        raise SessionError("map", "missing end marker", tuple(sections))
    return sections


def _floats(tokens, section: str, lineno: int) -> list[float]:
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise SessionError(section, f"line {lineno}: non-numeric field") from None


def _decode_header(payload: bytes) -> dict:
    out = {}
    for lineno, line in enumerate(payload.decode().splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise SessionError("header", f"line {lineno}: expected key = value")
        out[key.strip()] = value.strip()
    return out


def _pose(vals) -> Se3Pose:
    return Se3Pose(Rotation.from_xyzw(*vals[3:7]), vals[0:3])


def _decode_graph(payload: bytes, graph: PoseGraph) -> None:
    for lineno, line in enumerate(payload.decode().splitlines(), start=1):
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        kind = tok[0]
        try:
            if kind == "node":
                v = _floats(tok[2:-1], "graph", lineno)
                if len(v) != 17:
                    raise SessionError("graph", f"line {lineno}: node needs 17 values")
                state = NavState(_pose(v[1:8]), v[8:11], ImuBias(v[11:14], v[14:17]), v[0])
                nid = int(tok[1])
                graph.nodes[nid] = StateNode(nid, state, tok[-1] == "1")
            elif kind == "imu":
                fid, i, j = int(tok[1]), int(tok[2]), int(tok[3])
                v = _floats(tok[4:], "graph", lineno)
                if len(v) != 2 + 4 + 3 + 3 + 6 + 81:
                    raise SessionError("graph", f"line {lineno}: imu factor has {len(v)} values")
                p = PreintegratedImu(
                    Rotation.from_xyzw(*v[2:6]),
                    np.array(v[6:9]),
                    np.array(v[9:12]),
                    v[1],
                    ImuBias(v[12:15], v[15:18]),
                    np.array(v[18:]).reshape(9, 9),
                    v[0],
                )
                graph.factors[fid] = PreintegrationFactor(i, j, p)
            elif kind in ("lidar", "loop"):
                fid, i, j = int(tok[1]), int(tok[2]), int(tok[3])
                v = _floats(tok[4:], "graph", lineno)
                if len(v) != 7 + 36:
                    raise SessionError("graph", f"line {lineno}: {kind} factor has {len(v)} values")
                cls = LoopClosureFactor if kind == "loop" else LidarOdometryFactor
                graph.factors[fid] = cls(i, j, _pose(v[:7]), np.array(v[7:]).reshape(6, 6))
            elif kind == "gps":
                fid, i, q = int(tok[1]), int(tok[2]), int(tok[3])
                stamp = float(tok[4])
                v = _floats(tok[5:], "graph", lineno)
                if len(v) != 3 + 9:
                    raise SessionError("graph", f"line {lineno}: gps factor has {len(v)} values")
                graph.factors[fid] = GpsFactor(
                    i, EnuPoint(*v[:3]), np.array(v[3:]).reshape(3, 3), q, None if np.isnan(stamp) else stamp
                )
            elif kind == "next_factor":
                graph._next_factor = int(tok[1])
            else:
                raise SessionError("graph", f"line {lineno}: unknown record {kind!r}")
        except SessionError:
            raise
        except (ValueError, IndexError) as exc:
            raise SessionError("graph", f"line {lineno}: {exc}") from None
    for f in graph.factors.values():
        ids = (f.i,) if isinstance(f, GpsFactor) else (f.i, f.j)
        for k in ids:
            if k not in graph.nodes:
                raise SessionError("graph", f"factor references unknown node {k}")


def _decode_map(payload: bytes, voxel_size: float, anchor) -> MapCloud:
    if len(payload) % VOXEL_DTYPE.itemsize:
        raise SessionError("map", "payload is not a whole number of voxel records", ("header", "graph"))
    rec = np.frombuffer(payload, dtype=VOXEL_DTYPE)
    keys = np.stack([rec["ix"], rec["iy"], rec["iz"]], axis=1).astype(np.int64).reshape(-1, 3)
    cents = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(float).reshape(-1, 3)
    return MapCloud(voxel_size, anchor, keys, cents, rec["count"].astype(np.int64))


def load_session(path) -> Session:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise SessionError("header", f"cannot read {path}: {exc}") from exc
    sec = _split_sections(raw)
    hdr = _decode_header(sec["header"])
    try:
        version = int(hdr["format_version"])
        anchor = None
        if "anchor_lla_rad" in hdr:
            lat, lon, alt = (float(x) for x in hdr["anchor_lla_rad"].split())
            anchor = GeoLla(lat, lon, alt)
        voxel = float(hdr["voxel_size"])
        window = int(hdr["window_size"])
        gravity = np.array([float(x) for x in hdr["gravity"].split()])
        lever = np.array([float(x) for x in hdr["lever_arm"].split()])
        offset = np.array([float(x) for x in hdr["enu_offset"].split()])
        anchor_first = hdr["anchor_first"] == "1"
        keyframes = [int(x) for x in hdr["keyframes"].split()]
    except (KeyError, ValueError) as exc:
        raise SessionError("header", f"missing or invalid field: {exc}") from None
    graph = PoseGraph(
        window=SlidingWindow(window),
        gravity=gravity,
        lever_arm=lever,
        anchor=anchor,
        anchor_first=anchor_first,
        enu_offset=offset,
    )
    _decode_graph(sec["graph"], graph)
    graph.window.active = list(graph.nodes)[-window:]
    frozen = [k for k in graph.window.active if graph.nodes[k].fixed]
    graph.window.boundary = frozen[-1] if len(graph.nodes) > window and frozen else None
    cloud = _decode_map(sec["map"], voxel, anchor)
    try:
        return Session(graph, cloud, anchor, version, keyframes)
    except ValueError as exc:
        raise SessionError("header", str(exc)) from None


def graphs_equal(a: PoseGraph, b: PoseGraph) -> bool:
    """Node states, fixed flags and factor payloads compare exactly."""
    if list(a.nodes) != list(b.nodes) or list(a.factors) != list(b.factors):
        return False
    for k in a.nodes:
        if a.nodes[k].fixed != b.nodes[k].fixed or not a.nodes[k].state == b.nodes[k].state:
            return False
    for k, fa in a.factors.items():
        fb = b.factors[k]
        if type(fa) is not type(fb):
            return False
        if isinstance(fa, PreintegrationFactor):
            if (fa.i, fa.j) != (fb.i, fb.j) or not fa.factor == fb.factor:
                return False
        elif isinstance(fa, LidarOdometryFactor):
            if (fa.i, fa.j) != (fb.i, fb.j) or not fa.relative_pose == fb.relative_pose:
                return False
            if not np.array_equal(fa.information, fb.information):
                return False
        elif isinstance(fa, GpsFactor):
            if (fa.i, fa.fix_quality, fa.stamp) != (fb.i, fb.fix_quality, fb.stamp):
                return False
            if not (np.array_equal(fa.vector, fb.vector) and np.array_equal(fa.information, fb.information)):
                return False
    return np.array_equal(a.enu_offset, b.enu_offset)
