"""Point-to-line / point-to-plane scan registration.

The target is a :class:`FeatureMap` of edge, surface and ground points in
the map frame. For every source point, neighbours in the map define a line
or a plane; the pose is refined by Levenberg-Marquardt on the Huber-weighted
distances, refreshing correspondences at every outer iteration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .features import FeatureSet, PointSet, _voxel_pick
from .geom import Rotation, Se3Pose, rot_exp, skew_batch

log = logging.getLogger(__name__)


class DegenerateGeometryError(RuntimeError):
    """Registration could not constrain all six degrees of freedom."""

    def __init__(self, message: str, result: "RegistrationResult"):
        super().__init__(message)
        self.result = result


def point_line_distance(p, a, b) -> float:
    p, a, b = (np.asarray(v, dtype=float) for v in (p, a, b))
    ab = np.linalg.norm(a - b)
    if ab < 1e-6:
        raise ValueError("line endpoints closer than 1e-6 m")
    return float(np.linalg.norm(np.cross(p - a, p - b)) / ab)


def point_plane_distance(p, q1, q2, q3) -> float:
    p, q1, q2, q3 = (np.asarray(v, dtype=float) for v in (p, q1, q2, q3))
    n = np.cross(q2 - q1, q3 - q1)
    area2 = np.linalg.norm(n)
    if area2 < 2e-8:
        raise ValueError("plane points are collinear")
    return float(abs((p - q1) @ n) / area2)


@dataclass(frozen=True)
class LineCorrespondence:
    point: np.ndarray
    line_a: np.ndarray
    line_b: np.ndarray

    def distance(self) -> float:
        return point_line_distance(self.point, self.line_a, self.line_b)


@dataclass(frozen=True)
class PlaneCorrespondence:
    point: np.ndarray
    plane_pts: tuple[np.ndarray, np.ndarray, np.ndarray]

    def distance(self) -> float:
        return point_plane_distance(self.point, *self.plane_pts)


@dataclass
class CorrespondenceSet:
    """Array form of the matched features.

    ``line_src`` / ``plane_src`` hold source points in the source frame; the
    geometry (``line_point``, ``line_dir``, ``plane_point``, ``plane_normal``)
    lives in the target frame.
    """

    line_src: np.ndarray
    line_point: np.ndarray
    line_dir: np.ndarray
    plane_src: np.ndarray
    plane_point: np.ndarray
    plane_normal: np.ndarray
    plane_axes: np.ndarray

    def __len__(self) -> int:
        return len(self.line_src) + len(self.plane_src)

    @property
    def n_lines(self) -> int:
        return len(self.line_src)

    @property
    def n_planes(self) -> int:
        return len(self.plane_src)

    def residuals(self, pose: Se3Pose) -> tuple[np.ndarray, np.ndarray]:
        """Distances of the line and plane terms under ``pose``."""
        r_line = _line_vectors(self, pose)
        r_plane = _plane_scalars(self, pose)
        return np.linalg.norm(r_line, axis=1), np.abs(r_plane)

    def as_list(self, pose: Se3Pose) -> list:
        """Explicit correspondences with source points moved into the target frame."""
        out: list = []
        if self.n_lines:
            src = pose.apply(self.line_src)
            for p, c, d in zip(src, self.line_point, self.line_dir):
                out.append(LineCorrespondence(p, c - 0.5 * d, c + 0.5 * d))
        if self.n_planes:
            src = pose.apply(self.plane_src)
            for p, c, ax in zip(src, self.plane_point, self.plane_axes):
                out.append(PlaneCorrespondence(p, (c, c + 0.5 * ax[0], c + 0.5 * ax[1])))
        return out


def _line_vectors(cs: CorrespondenceSet, pose: Se3Pose) -> np.ndarray:
    if cs.n_lines == 0:
        return np.zeros((0, 3))
    pw = pose.apply(cs.line_src) - cs.line_point
    along = np.einsum("ij,ij->i", pw, cs.line_dir)
    return pw - along[:, None] * cs.line_dir


def _plane_scalars(cs: CorrespondenceSet, pose: Se3Pose) -> np.ndarray:
    if cs.n_planes == 0:
        return np.zeros(0)
    pw = pose.apply(cs.plane_src) - cs.plane_point
    return np.einsum("ij,ij->i", pw, cs.plane_normal)


class FeatureMap:
    """Edge, surface and ground points in a common frame, each with a KD-tree."""

    def __init__(self, edges: np.ndarray, surfaces: np.ndarray, ground: np.ndarray):
        self.edges = np.asarray(edges, dtype=float).reshape(-1, 3)
        self.surfaces = np.asarray(surfaces, dtype=float).reshape(-1, 3)
        self.ground = np.asarray(ground, dtype=float).reshape(-1, 3)
        self.trees = {
            name: cKDTree(pts) if len(pts) else None
            for name, pts in (("edges", self.edges), ("surfaces", self.surfaces), ("ground", self.ground))
        }

    @classmethod
    def from_features(
        cls, items: Sequence[tuple[Se3Pose, FeatureSet]], voxel: float | None = None
    ) -> "FeatureMap":
        """Stack posed feature sets; ``voxel`` thins surfaces and ground."""
        parts: dict[str, list] = {"edges": [], "surfaces": [], "ground": []}
        for pose, fs in items:
            for name in parts:
                ps = getattr(fs, name)
                if len(ps):
                    parts[name].append(pose.apply(ps.points))
        stacked = {k: np.vstack(v) if v else np.zeros((0, 3)) for k, v in parts.items()}
        if voxel:
            for name in ("surfaces", "ground"):
                stacked[name] = _thin(stacked[name], voxel)
        return cls(stacked["edges"], stacked["surfaces"], stacked["ground"])

    @classmethod
    def from_points(cls, points: np.ndarray, voxel: float | None = None) -> "FeatureMap":
        """Unclassified points used as both surface and ground targets."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        if voxel:
            pts = _thin(pts, voxel)
        return cls(np.zeros((0, 3)), pts, pts)

    def __len__(self) -> int:
        return len(self.edges) + len(self.surfaces) + len(self.ground)


def _thin(points: np.ndarray, voxel: float) -> np.ndarray:
    if len(points) == 0:
        return points
    return points[_voxel_pick(points, voxel)]


@dataclass(frozen=True)
class RegistrationConfig:
    max_iterations: int = 30
    max_correspondence_distance: float = 1.0
    neighbours: int = 8
    huber_delta: float = 0.1
    initial_damping: float = 1e-4
    translation_tolerance: float = 1e-5
    rotation_tolerance: float = 1e-5
    min_correspondences: int = 10
    # Smallest eigenvalue of the per-correspondence normal matrix below which
    # a direction is considered unobserved.
    degeneracy_threshold: float = 1e-3
    line_ratio: float = 3.0
    plane_max_deviation: float = 0.03
    line_max_deviation: float = 0.05
    plane_min_spread: float = 0.2
    max_rejections: int = 6
    # Once converged, correspondences farther than this are dropped and the
    # solve continues; quantised edge samples otherwise bias the result.
    refine_gate: float | None = 0.05


@dataclass
class RegistrationResult:
    pose: Se3Pose
    final_cost: float
    iterations: int
    converged: bool
    inlier_count: int
    min_eigenvalue: float = float("nan")
    cost_history: list = field(default_factory=list)


def _neighbourhoods(src: np.ndarray, pts: np.ndarray, tree, cfg: RegistrationConfig, need: int):
    """Indices of source points with enough close target neighbours, their
    neighbour weights (1 inside the radius) and the weighted mean and scatter."""
    k = min(cfg.neighbours, len(pts))
    if tree is None or k < need or len(src) == 0:
        return None
    # The bound prunes the search; missing neighbours come back as index len(pts).
    dist, idx = tree.query(src, k=k, distance_upper_bound=cfg.max_correspondence_distance * (1 + 1e-12))
    dist = dist.reshape(len(src), k)
    idx = idx.reshape(len(src), k)
    within = dist <= cfg.max_correspondence_distance
    sel = np.nonzero(within.sum(axis=1) >= need)[0]
    if len(sel) == 0:
        return None
    nb = pts[np.minimum(idx[sel], len(pts) - 1)]
    w = within[sel].astype(float)
    cnt = w.sum(axis=1)
    centroid = (nb * w[:, :, None]).sum(axis=1) / cnt[:, None]
    d = (nb - centroid[:, None, :]) * w[:, :, None]
    cov = np.einsum("mki,mkj->mij", d, d) / cnt[:, None, None]
    evals, evecs = np.linalg.eigh(cov)
    return sel, centroid, d, evals, evecs


def _fit_lines(src: np.ndarray, target: FeatureMap, cfg: RegistrationConfig):
    got = _neighbourhoods(src, target.edges, target.trees["edges"], cfg, 2)
    if got is None:
        return None
    sel, centroid, d, evals, evecs = got
    direction = evecs[:, :, 2]
    along = np.einsum("mki,mi->mk", d, direction)
    off = np.linalg.norm(d - along[:, :, None] * direction[:, None, :], axis=2).max(axis=1)
    linear = (
        (evals[:, 2] > cfg.line_ratio * np.maximum(evals[:, 1], 1e-12))
        & (evals[:, 2] > 1e-12)
        & (off < cfg.line_max_deviation)
    )
    return sel[linear], centroid[linear], direction[linear]


def _fit_planes(src: np.ndarray, pts: np.ndarray, tree, cfg: RegistrationConfig):
    got = _neighbourhoods(src, pts, tree, cfg, 3)
    if got is None:
        return None
    sel, centroid, d, evals, evecs = got
    normal = evecs[:, :, 0]
    # Every neighbour must sit on the plane, and the neighbours must span two
    # directions: points along a single ring leave the normal undetermined.
    dev = np.abs(np.einsum("mki,mi->mk", d, normal)).max(axis=1)
    spread = np.sqrt(np.maximum(evals[:, 1], 0.0))
    planar = (dev < cfg.plane_max_deviation) & (spread > cfg.plane_min_spread)
    axes = np.stack([evecs[:, :, 2], evecs[:, :, 1]], axis=1)
    return sel[planar], centroid[planar], normal[planar], axes[planar]


def find_correspondences(
    features: FeatureSet,
    target: FeatureMap,
    guess: Se3Pose,
    config: RegistrationConfig = RegistrationConfig(),
) -> CorrespondenceSet:
    """Match source features (moved by ``guess``) against ``target``.

    Edges fit lines to the nearest target edges; surfaces and ground fit
    planes to the nearest target points of the same class. A candidate is
    dropped unless enough neighbours lie within ``max_correspondence_distance``
    and they form a clean line or plane.
    """
    empty3 = np.zeros((0, 3))
    line_src, line_pt, line_dir = empty3, empty3, empty3
    if len(features.edges):
        src = features.edges.points
        fit = _fit_lines(guess.apply(src), target, config)
        if fit is not None:
            sel, line_pt, line_dir = fit
            line_src = src[sel]
    planes = []
    for name in ("surfaces", "ground"):
        ps = getattr(features, name)
        if not len(ps):
            continue
        fit = _fit_planes(guess.apply(ps.points), getattr(target, name), target.trees[name], config)
        if fit is not None:
            sel, c, n, ax = fit
            planes.append((ps.points[sel], c, n, ax))
    if planes:
        plane_src, plane_pt, plane_n, plane_ax = (np.concatenate(z) for z in zip(*planes))
    else:
        plane_src, plane_pt, plane_n, plane_ax = empty3, empty3, empty3, np.zeros((0, 2, 3))
    return CorrespondenceSet(line_src, line_pt, line_dir, plane_src, plane_pt, plane_n, plane_ax)


def _huber_weights(d: np.ndarray, delta: float) -> np.ndarray:
    w = np.ones_like(d)
    big = d > delta
    w[big] = delta / d[big]
    return w


def _robust_cost(d: np.ndarray, delta: float) -> float:
    # 2 * Huber, equal to the squared distance for inliers.
    a = np.abs(d)
    return float(np.sum(np.where(a <= delta, a * a, 2.0 * delta * a - delta * delta)))


def _cost(cs: CorrespondenceSet, pose: Se3Pose, delta: float) -> float:
    dl, dp = cs.residuals(pose)
    return _robust_cost(dl, delta) + _robust_cost(dp, delta)


def _normal_equations(cs: CorrespondenceSet, pose: Se3Pose, delta: float):
    """Gauss-Newton system for the perturbation ``R <- R exp(dtheta)``, ``t <- t + dt``.

    Parameter order is ``(dt, dtheta)``.
    """
    rmat = pose.rotation.matrix
    h = np.zeros((6, 6))
    g = np.zeros(6)
    if cs.n_lines:
        r = _line_vectors(cs, pose)  # (L, 3)
        d = np.linalg.norm(r, axis=1)
        w = _huber_weights(d, delta)
        proj = np.eye(3) - cs.line_dir[:, :, None] * cs.line_dir[:, None, :]
        dpw_dtheta = -rmat @ skew_batch(cs.line_src)  # (L, 3, 3)
        jac = np.concatenate([proj, proj @ dpw_dtheta], axis=2)  # (L, 3, 6)
        h += np.einsum("l,lki,lkj->ij", w, jac, jac)
        g += np.einsum("l,lki,lk->i", w, jac, r)
    if cs.n_planes:
        r = _plane_scalars(cs, pose)
        w = _huber_weights(np.abs(r), delta)
        n = cs.plane_normal
        dpw_dtheta = -rmat @ skew_batch(cs.plane_src)
        jac = np.concatenate([n, np.einsum("pi,pij->pj", n, dpw_dtheta)], axis=1)  # (P, 6)
        h += np.einsum("p,pi,pj->ij", w, jac, jac)
        g += np.einsum("p,pi,p->i", w, jac, r)
    return h, g


def _gate(cs: CorrespondenceSet, pose: Se3Pose, gate: float) -> CorrespondenceSet:
    dl, dp = cs.residuals(pose)
    keep_l = np.asarray(dl) <= gate
    keep_p = np.abs(np.asarray(dp)) <= gate
    return CorrespondenceSet(
        cs.line_src[keep_l],
        cs.line_point[keep_l],
        cs.line_dir[keep_l],
        cs.plane_src[keep_p],
        cs.plane_point[keep_p],
        cs.plane_normal[keep_p],
        cs.plane_axes[keep_p],
    )


def _retract(pose: Se3Pose, step: np.ndarray) -> Se3Pose:
    return Se3Pose(pose.rotation * rot_exp(step[3:]), pose.translation + step[:3])


def register(
    features: FeatureSet,
    target: FeatureMap,
    guess: Se3Pose,
    config: RegistrationConfig = RegistrationConfig(),
) -> RegistrationResult:
    """Align ``features`` to ``target`` starting from ``guess``.

    Raises :class:`DegenerateGeometryError` (carrying the partial result)
    when the final iteration has too few correspondences or the normal
    matrix leaves a direction unconstrained.
    """
    if features.total() == 0 or len(target) == 0:
        raise ValueError("registration needs non-empty source features and target")
    pose = guess
    lam = config.initial_damping
    converged = False
    iterations = 0
    history: list = []
    cs = None
    h = np.zeros((6, 6))
    refining = False
    for iterations in range(1, config.max_iterations + 1):
        cs = find_correspondences(features, target, pose, config)
        if refining:
            cs = _gate(cs, pose, config.refine_gate)
        if len(cs) < config.min_correspondences:
            break
        cost = _cost(cs, pose, config.huber_delta)
        h, g = _normal_equations(cs, pose, config.huber_delta)
        step = None
        for _ in range(config.max_rejections):
            a = h + lam * np.diag(np.maximum(np.diag(h), 1e-9))
            try:
                cand_step = -np.linalg.solve(a, g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand = _retract(pose, cand_step)
            new_cost = _cost(cs, cand, config.huber_delta)
            if new_cost <= cost:
                step = cand_step
                pose = cand
                history.append((cost, new_cost))
                lam = max(lam / 10.0, 1e-12)
                break
            lam *= 10.0
        small = step is None or (
            np.linalg.norm(step[:3]) < config.translation_tolerance
            and np.linalg.norm(step[3:]) < config.rotation_tolerance
        )
        if small:
            if refining or config.refine_gate is None:
                converged = True
                break
            refining = True

    if cs is None or len(cs) < config.min_correspondences:
        n = 0 if cs is None else len(cs)
        result = RegistrationResult(pose, float("inf"), iterations, False, n, cost_history=history)
        raise DegenerateGeometryError(f"only {n} correspondences in final iteration", result)
    final_cost = _cost(cs, pose, config.huber_delta)
    dl, dp = cs.residuals(pose)
    inliers = int(np.sum(dl <= config.huber_delta) + np.sum(dp <= config.huber_delta))
    h_norm = h / max(len(cs), 1)
    min_eig = float(np.linalg.eigvalsh(h_norm)[0])
    result = RegistrationResult(pose, final_cost, iterations, converged, inliers, min_eig, history)
    if min_eig < config.degeneracy_threshold:
        raise DegenerateGeometryError(
            f"normal matrix nearly singular (min eigenvalue {min_eig:.3g})", result
        )
    return result
