"""Ground segmentation and edge / surface feature selection for spinning LiDAR scans."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True, eq=False)
class PointSet:
    """Points with their ring index and time offset inside the sweep."""

    points: np.ndarray
    ring: np.ndarray
    relative_time: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        ring = np.asarray(self.ring, dtype=np.int64).reshape(-1)
        rel = np.asarray(self.relative_time, dtype=float).reshape(-1)
        if not (len(pts) == len(ring) == len(rel)):
            raise ValueError("points, ring and relative_time must have equal length")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "ring", ring)
        object.__setattr__(self, "relative_time", rel)

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> "PointSet":
        return cls(np.zeros((0, 3)), np.zeros(0, dtype=np.int64), np.zeros(0))

    def subset(self, idx) -> "PointSet":
        return PointSet(self.points[idx], self.ring[idx], self.relative_time[idx])

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointSet):
            return NotImplemented
        return (
            np.array_equal(self.points, other.points)
            and np.array_equal(self.ring, other.ring)
            and np.array_equal(self.relative_time, other.relative_time)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class PointCloudFrame(PointSet):
    frame_stamp: float = 0.0
    scan_period: float = 0.1
    ring_count: int = 16

    def __post_init__(self):
        super().__post_init__()
        if len(self.ring) and (self.ring.min() < 0 or self.ring.max() >= self.ring_count):
            raise ValueError(f"ring index outside [0, {self.ring_count})")
        if len(self.relative_time) and (
            self.relative_time.min() < 0.0 or self.relative_time.max() >= self.scan_period
        ):
            raise ValueError("relative_time must lie in [0, scan_period)")

    def subset(self, idx) -> "PointCloudFrame":
        return replace(
            self,
            points=self.points[idx],
            ring=self.ring[idx],
            relative_time=self.relative_time[idx],
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloudFrame):
            return NotImplemented
        return PointSet.__eq__(self, other) and (
            self.frame_stamp,
            self.scan_period,
            self.ring_count,
        ) == (other.frame_stamp, other.scan_period, other.ring_count)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class FeatureSet:
    edges: PointSet = field(default_factory=PointSet.empty)
    surfaces: PointSet = field(default_factory=PointSet.empty)
    ground: PointSet = field(default_factory=PointSet.empty)
    frame_stamp: float = 0.0

    def planar(self) -> PointSet:
        """Surface and ground points together (both feed point-plane terms)."""
        return PointSet(
            np.vstack([self.surfaces.points, self.ground.points]),
            np.concatenate([self.surfaces.ring, self.ground.ring]),
            np.concatenate([self.surfaces.relative_time, self.ground.relative_time]),
        )

    def total(self) -> int:
        return len(self.edges) + len(self.surfaces) + len(self.ground)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureSet):
            return NotImplemented
        return (
            self.edges == other.edges
            and self.surfaces == other.surfaces
            and self.ground == other.ground
            and self.frame_stamp == other.frame_stamp
        )

    __hash__ = None


@dataclass(frozen=True)
class FeatureConfig:
    window: int = 5
    sectors: int = 6
    max_edges_per_sector: int = 4
    max_surfaces_per_sector: int = 8
    edge_threshold: float = 0.5
    surface_threshold: float = 0.05
    min_range: float = 1.0
    max_range: float = 80.0
    ground_max_angle_deg: float = 10.0
    ground_seed_tolerance: float = 0.3
    # Largest height change between consecutive ground rings; the angle test
    # alone admits wall bases when far rings are metres apart.
    ground_max_step: float = 0.05
    ground_voxel: float = 1.0
    azimuth_columns: int = 1800
    # Relative depth jump that marks an occlusion boundary.
    occlusion_ratio: float = 0.1
    # Largest azimuth step (in columns) still treated as a contiguous ring.
    max_column_gap: int = 3


def _azimuth_columns(points: np.ndarray, columns: int) -> np.ndarray:
    az = np.arctan2(points[:, 1], points[:, 0])
    col = np.floor((az + math.pi) / (2.0 * math.pi) * columns).astype(np.int64)
    return np.clip(col, 0, columns - 1)


def _range_mask(points: np.ndarray, config: FeatureConfig) -> np.ndarray:
    r = np.linalg.norm(points, axis=1)
    return (r >= config.min_range) & (r <= config.max_range)


def segment_ground(
    frame: PointCloudFrame, sensor_height: float = 1.8, config: FeatureConfig = FeatureConfig()
) -> np.ndarray:
    """Boolean ground label per point.

    Points are arranged on a (ring, azimuth column) grid. In each column the
    lowest ring's point seeds the search if it sits near ``-sensor_height``;
    the label then climbs ring by ring while the slope between consecutive
    rings stays under ``ground_max_angle_deg`` and the height step under
    ``ground_max_step``.
    """
    n = len(frame)
    if n == 0:
        raise ValueError("cannot segment an empty frame")
    pts = frame.points
    cols = _azimuth_columns(pts, config.azimuth_columns)
    grid = np.full((frame.ring_count, config.azimuth_columns), -1, dtype=np.int64)
    # Later indices overwrite earlier ones; collisions are resolved below.
    grid[frame.ring, cols] = np.arange(n)
    ground_grid = np.zeros(grid.shape, dtype=bool)
    occupied = grid >= 0
    idx_safe = np.where(occupied, grid, 0)
    z = pts[idx_safe, 2]
    xy = np.hypot(pts[idx_safe, 0], pts[idx_safe, 1])
    tan_max = math.tan(math.radians(config.ground_max_angle_deg))

    seeded = np.zeros(config.azimuth_columns, dtype=bool)
    prev_ring = np.full(config.azimuth_columns, -1, dtype=np.int64)
    active = np.ones(config.azimuth_columns, dtype=bool)
    for r in range(frame.ring_count):
        occ = occupied[r] & active
        first = occ & ~seeded
        seed_ok = first & (np.abs(z[r] + sensor_height) < config.ground_seed_tolerance)
        ground_grid[r, seed_ok] = True
        # Columns whose lowest point missed the ground never seed.
        active &= ~(first & ~seed_ok)
        climb = occ & seeded
        if np.any(climb):
            pr = prev_ring[climb]
            cidx = np.nonzero(climb)[0]
            dz = np.abs(z[r, cidx] - z[pr, cidx])
            dxy = np.abs(xy[r, cidx] - xy[pr, cidx])
            ok = (dz <= tan_max * dxy) & (dz <= config.ground_max_step)
            ground_grid[r, cidx[ok]] = True
            stop = cidx[~ok]
            active[stop] = False
        seeded |= seed_ok
        prev_ring = np.where(occ & (seed_ok | ground_grid[r]), r, prev_ring)

    labels = np.zeros(n, dtype=bool)
    labels[grid[occupied]] = ground_grid[occupied]
    # Points that lost their grid cell inherit the winner's label.
    winner = grid[frame.ring, cols]
    return labels[winner]


def compute_smoothness(ring_points: np.ndarray, window: int = 5) -> np.ndarray:
    """Local smoothness ``|sum_j (x_i - x_j)| / (2 * window * |x_i|)`` along one ring.

    Points closer than ``window`` to either end get NaN. Rings too short to
    hold a single full window return an empty array.
    """
    pts = np.asarray(ring_points, dtype=float).reshape(-1, 3)
    m = len(pts)
    if m < 2 * window + 1:
        return np.zeros(0)
    csum = np.vstack([np.zeros((1, 3)), np.cumsum(pts, axis=0)])
    i = np.arange(window, m - window)
    neigh = csum[i + window + 1] - csum[i - window] - pts[i]
    diff = 2 * window * pts[i] - neigh
    scores = np.full(m, np.nan)
    scores[i] = np.linalg.norm(diff, axis=1) / (2 * window * np.linalg.norm(pts[i], axis=1))
    return scores


@dataclass
class _RingLayout:
    order: np.ndarray  # frame indices sorted by (ring, time)
    starts: np.ndarray  # start offset of each ring in ``order``
    counts: np.ndarray
    scores: np.ndarray  # in ``order`` layout, NaN where unusable


def _ring_layout(frame: PointCloudFrame, valid: np.ndarray, config: FeatureConfig) -> _RingLayout:
    idx = np.nonzero(valid)[0]
    az = np.arctan2(frame.points[idx, 1], frame.points[idx, 0])
    order = idx[np.lexsort((frame.relative_time[idx], az, frame.ring[idx]))]
    rings = frame.ring[order]
    counts = np.bincount(rings, minlength=frame.ring_count)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    pts = frame.points[order]
    w = config.window
    n = len(order)
    rng = np.linalg.norm(pts, axis=1)
    cols = _azimuth_columns(pts, config.azimuth_columns)
    # Smoothness over all rings at once from one cumulative sum.
    pos = np.arange(n) - np.repeat(starts, counts)
    cnt = np.repeat(counts, counts)
    inner = (pos >= w) & (pos < cnt - w) & (cnt >= 2 * w + 1)
    csum = np.vstack([np.zeros((1, 3)), np.cumsum(pts, axis=0)])
    i = np.nonzero(inner)[0]
    diff = 2 * w * pts[i] - (csum[i + w + 1] - csum[i - w] - pts[i])
    scores = np.full(n, np.nan)
    scores[i] = np.linalg.norm(diff, axis=1) / (2 * w * rng[i])
    # Events between consecutive points of the same ring.
    same = np.zeros(max(n - 1, 0), dtype=bool)
    same[:] = pos[1:] > 0
    gap = same & (np.diff(cols) > config.max_column_gap)
    jump = same & ~gap & (np.abs(np.diff(rng)) > config.occlusion_ratio * np.minimum(rng[:-1], rng[1:]))
    k = np.nonzero(gap | jump)[0]
    lo = np.where(gap[k] | (rng[k] > rng[k + 1]), k - w + 1, k + 1)
    hi = np.where(gap[k] | (rng[k] <= rng[k + 1]), k + w + 1, k + 1)
    # Unreliable on the far side of a depth jump, and on both sides of a hole;
    # the ranges never leave the ring.
    ring_lo = np.repeat(starts, counts)[k]
    ring_hi = ring_lo + cnt[k]
    lo = np.maximum(lo, ring_lo)
    hi = np.minimum(hi, ring_hi)
    marks = np.zeros(n + 1, dtype=np.int64)
    np.add.at(marks, lo, 1)
    np.add.at(marks, hi, -1)
    scores[np.cumsum(marks[:-1]) > 0] = np.nan
    return _RingLayout(order, starts, counts, scores)


def _voxel_pick(points: np.ndarray, voxel: float) -> np.ndarray:
    """Index of the first point in each occupied voxel, in input order."""
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    keys = np.floor(points / voxel).astype(np.int64)
    keys -= keys.min(axis=0)
    if keys.max() < 1 << 21:
        # Packing the three indices into one integer keeps np.unique one-dimensional.
        codes = (keys[:, 0] << 42) | (keys[:, 1] << 21) | keys[:, 2]
        _, first = np.unique(codes, return_index=True)
    else:
        _, first = np.unique(keys, axis=0, return_index=True)
    return np.sort(first)


def extract_features(
    frame: PointCloudFrame, labels: np.ndarray, config: FeatureConfig = FeatureConfig()
) -> FeatureSet:
    """Quota-limited edge, surface and ground sets for one scan.

    Each ring is split into ``config.sectors`` equal index ranges. Within a
    sector the sharpest non-ground points above ``edge_threshold`` become
    edges and the flattest below ``surface_threshold`` become surfaces;
    picking a point suppresses its ``window`` neighbours on the ring.
    """
    labels = np.asarray(labels, dtype=bool)
    valid = _range_mask(frame.points, config)
    if not np.any(valid):
        return FeatureSet(frame_stamp=frame.frame_stamp)
    lay = _ring_layout(frame, valid, config)
    ground_sorted = labels[lay.order]
    w = config.window
    edge_sel, surf_sel = [], []
    for r in range(frame.ring_count):
        s, c = int(lay.starts[r]), int(lay.counts[r])
        if c < 2 * w + 1:
            continue
        sc = lay.scores[s : s + c]
        grd = ground_sorted[s : s + c]
        taken = np.zeros(c, dtype=bool)
        bounds = np.linspace(w, c - w, config.sectors + 1).astype(int)
        for a, b in zip(bounds[:-1], bounds[1:]):
            if b <= a:
                continue
            seg = np.arange(a, b)
            seg = seg[np.isfinite(sc[seg]) & ~grd[seg]]
            if len(seg) == 0:
                continue
            by_score = seg[np.argsort(-sc[seg], kind="stable")]
            picked = 0
            for k in by_score:
                if sc[k] <= config.edge_threshold or picked >= config.max_edges_per_sector:
                    break
                if taken[k]:
                    continue
                edge_sel.append(s + k)
                picked += 1
                taken[max(0, k - w) : k + w + 1] = True
            picked = 0
            for k in by_score[::-1]:
                if sc[k] >= config.surface_threshold or picked >= config.max_surfaces_per_sector:
                    break
                if taken[k]:
                    continue
                surf_sel.append(s + k)
                picked += 1
                taken[max(0, k - w) : k + w + 1] = True
    edges = lay.order[np.array(edge_sel, dtype=np.int64)]
    surfaces = lay.order[np.array(surf_sel, dtype=np.int64)]
    ground_idx = np.nonzero(valid & labels)[0]
    ground_idx = ground_idx[_voxel_pick(frame.points[ground_idx], config.ground_voxel)]
    return FeatureSet(
        frame.subset(edges), frame.subset(surfaces), frame.subset(ground_idx), frame.frame_stamp
    )


def extract_target_features(
    frame: PointCloudFrame,
    labels: np.ndarray,
    config: FeatureConfig = FeatureConfig(),
    voxel: float = 0.5,
) -> FeatureSet:
    """Dense feature sets for the registration target map.

    No per-sector quota: every usable non-ground point above the edge
    threshold is an edge and every one below the surface threshold a
    surface. Surfaces and ground are thinned on a ``voxel`` grid.
    """
    labels = np.asarray(labels, dtype=bool)
    valid = _range_mask(frame.points, config)
    if not np.any(valid):
        return FeatureSet(frame_stamp=frame.frame_stamp)
    lay = _ring_layout(frame, valid, config)
    ground_sorted = labels[lay.order]
    finite = np.isfinite(lay.scores)
    sc = np.where(finite, lay.scores, 0.0)
    edge_k = np.nonzero(finite & ~ground_sorted & (sc > config.edge_threshold))[0]
    surf_k = np.nonzero(finite & ~ground_sorted & (sc < config.surface_threshold))[0]
    edges = lay.order[edge_k]
    surfaces = lay.order[surf_k]
    surfaces = surfaces[_voxel_pick(frame.points[surfaces], voxel)]
    ground_idx = np.nonzero(valid & labels)[0]
    ground_idx = ground_idx[_voxel_pick(frame.points[ground_idx], voxel)]
    return FeatureSet(
        frame.subset(edges), frame.subset(surfaces), frame.subset(ground_idx), frame.frame_stamp
    )


def transform_features(features: FeatureSet, pose) -> FeatureSet:
    """Apply a rigid transform to every feature point."""

    def move(ps: PointSet) -> PointSet:
        return PointSet(pose.apply(ps.points) if len(ps) else ps.points, ps.ring, ps.relative_time)

    return FeatureSet(move(features.edges), move(features.surfaces), move(features.ground), features.frame_stamp)
