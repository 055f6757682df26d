"""Sliding-window pose graph fusing IMU, LiDAR odometry, GPS and loop factors.

Node states are perturbed on the manifold as ``R <- R exp(dtheta)``,
``p <- p + dp``, ``v <- v + dv``; each free node contributes a 9-dof block
``[dtheta, dp, dv]``. IMU biases stay at the values the node was created
with. The graph's frame is a local ENU frame whose offset from the session
anchor may be estimated alongside the window (``estimate_enu_offset``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geo import EnuAnchor, EnuPoint, GeoLla, lla_to_ecef, reanchor
from .geom import (
    Rotation,
    Se3Pose,
    right_jacobian_inverse_batch,
    skew,
    skew_batch,
    so3_exp_batch,
    so3_log_batch,
)
from .imu import STANDARD_GRAVITY, NavState, PreintegratedImu

log = logging.getLogger(__name__)

BLOCK = 9
CHI2_GATE_3DOF = 13.8


class GraphError(ValueError):
    """Invalid node or factor submitted to a :class:`PoseGraph`."""


class AnchorMismatchError(GraphError):
    pass


@dataclass
class StateNode:
    id: int
    state: NavState
    fixed: bool = False

    @property
    def stamp(self) -> float:
        return self.state.stamp


def _check_information(info, size: int, what: str) -> np.ndarray:
    info = np.array(info, dtype=float)
    if info.shape != (size, size):
        raise GraphError(f"{what} information must be {size}x{size}, got {info.shape}")
    if not np.allclose(info, info.T, rtol=1e-9, atol=1e-12):
        raise GraphError(f"{what} information is not symmetric")
    if np.linalg.eigvalsh(0.5 * (info + info.T))[0] <= 0.0:
        raise GraphError(f"{what} information is not positive definite")
    info.flags.writeable = False
    return info


@dataclass(frozen=True)
class PreintegrationFactor:
    i: int
    j: int
    factor: PreintegratedImu

    def __post_init__(self):
        _check_information(self.factor.information, 9, "preintegration")


@dataclass(frozen=True, eq=False)
class LidarOdometryFactor:
    """``relative_pose`` is ``T_i^-1 T_j``; information is ordered ``[trans, rot]``."""

    i: int
    j: int
    relative_pose: Se3Pose
    information: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "information", _check_information(self.information, 6, "odometry"))


@dataclass(frozen=True, eq=False)
class LoopClosureFactor(LidarOdometryFactor):
    pass


@dataclass(frozen=True, eq=False)
class GpsFactor:
    i: int
    position: EnuPoint
    information: np.ndarray
    fix_quality: int = 1
    stamp: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "information", _check_information(self.information, 3, "GPS"))

    @property
    def vector(self) -> np.ndarray:
        return self.position.vector()


Factor = Union[PreintegrationFactor, LidarOdometryFactor, LoopClosureFactor, GpsFactor]


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 10
    translation_tolerance: float = 1e-6
    rotation_tolerance: float = 1e-6
    initial_damping: float = 1e-9
    max_damping_steps: int = 10
    # Default information diagonals: odometry/loop ordered [trans, rot].
    # Rotation is weighted well above the scaled IMU factors so that a gyro
    # bias error cannot steer the heading.
    lidar_information: tuple = (100.0, 100.0, 100.0, 1e5, 1e5, 1e5)
    loop_information: tuple = (100.0, 100.0, 100.0, 1e5, 1e5, 1e5)
    # 2 m standard deviation on every axis.
    gps_information: tuple = (0.25, 0.25, 0.25)
    imu_information_scale: float = 1.0
    gps_gate: float = CHI2_GATE_3DOF
    # Accept a fix after this many consecutive gate rejections (0: never).
    gps_gate_reset: int = 5
    estimate_enu_offset: bool = False

    def __post_init__(self):
        scalars = (
            self.max_iterations,
            self.translation_tolerance,
            self.rotation_tolerance,
            self.initial_damping,
            self.max_damping_steps,
            self.imu_information_scale,
            self.gps_gate,
        )
        vectors = self.lidar_information + self.loop_information + self.gps_information
        if min(scalars) <= 0 or min(vectors) <= 0:
            raise ValueError("solver settings and information scales must be positive")
        if self.gps_gate_reset < 0:
            raise ValueError("gps_gate_reset must be non-negative")


@dataclass
class SlidingWindow:
    window_size: int = 20
    active: list[int] = field(default_factory=list)
    boundary: int | None = None

    def __post_init__(self):
        if self.window_size < 2:
            raise ValueError("window must hold at least two nodes")


@dataclass
class OptimizationReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool
    message: str = ""


@dataclass
class PoseGraph:
    """Nodes, factors and the sliding window.

    ``anchor`` is the geodetic origin of the graph's ENU frame. ``enu_offset``
    is the estimated translation from graph coordinates to that frame.
    """

    window: SlidingWindow = field(default_factory=SlidingWindow)
    config: SolverConfig = field(default_factory=SolverConfig)
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -STANDARD_GRAVITY]))
    lever_arm: np.ndarray = field(default_factory=lambda: np.zeros(3))
    anchor: GeoLla | None = None
    anchor_first: bool = True
    nodes: dict[int, StateNode] = field(default_factory=dict)
    factors: dict[int, Factor] = field(default_factory=dict)
    rejected: list[tuple[Factor, str]] = field(default_factory=list)
    enu_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    _next_factor: int = 0
    _gps_misses: int = 0

    def node_ids(self) -> list[int]:
        return list(self.nodes)

    def last_node(self) -> StateNode | None:
        if not self.nodes:
            return None
        return self.nodes[next(reversed(self.nodes))]

    def state(self, node_id: int) -> NavState:
        return self.nodes[node_id].state

    def world_position(self, node_id: int) -> np.ndarray:
        """Node translation expressed in the anchor ENU frame."""
        return self.nodes[node_id].state.pose.translation + self.enu_offset

    def world_pose(self, node_id: int) -> Se3Pose:
        pose = self.nodes[node_id].state.pose
        return Se3Pose(pose.rotation, pose.translation + self.enu_offset)

    def factors_of(self, kind) -> list[Factor]:
        return [f for f in self.factors.values() if type(f) is kind]

    def copy(self) -> "PoseGraph":
        return replace(
            self,
            window=replace(self.window, active=list(self.window.active)),
            nodes={k: replace(n) for k, n in self.nodes.items()},
            factors=dict(self.factors),
            rejected=list(self.rejected),
            enu_offset=self.enu_offset.copy(),
        )


# --------------------------------------------------------------------------- construction


def _update_window(graph: PoseGraph) -> None:
    win = graph.window
    ids = list(graph.nodes)
    win.active = ids[-win.window_size :]
    if len(ids) > win.window_size:
        oldest = win.active[0]
        for k in ids[: len(ids) - win.window_size + 1]:
            graph.nodes[k].fixed = True
        win.boundary = oldest
    else:
        win.boundary = None


def add_state_node(graph: PoseGraph, state: NavState, fixed: bool | None = None) -> int:
    """Append a node and slide the window; nodes leaving it are frozen.

    The first node is fixed as the gauge anchor unless ``fixed`` says
    otherwise or the graph was built with ``anchor_first=False``.
    """
    last = graph.last_node()
    if last is not None and not state.stamp > last.stamp:
        raise GraphError(f"node stamp {state.stamp} not after previous stamp {last.stamp}")
    node_id = 0 if last is None else last.id + 1
    if fixed is None:
        fixed = last is None and graph.anchor_first
    graph.nodes[node_id] = StateNode(node_id, state, bool(fixed))
    _update_window(graph)
    return node_id


def _require(graph: PoseGraph, *ids: int) -> None:
    for k in ids:
        if k not in graph.nodes:
            raise GraphError(f"factor references unknown node {k}")


def gps_residual(graph: PoseGraph, factor: GpsFactor) -> np.ndarray:
    pose = graph.nodes[factor.i].state.pose
    return pose.translation + pose.rotation.apply(graph.lever_arm) + graph.enu_offset - factor.vector


def gps_mahalanobis(graph: PoseGraph, factor: GpsFactor) -> float:
    r = gps_residual(graph, factor)
    return float(r @ factor.information @ r)


def add_factor(graph: PoseGraph, factor: Factor) -> int | None:
    """Store ``factor`` and return its id; gated GPS factors return ``None``.

    Rejections are recorded in ``graph.rejected`` as ``(factor, reason)``.
    """
    if isinstance(factor, GpsFactor):
        _require(graph, factor.i)
        if factor.fix_quality < 1:
            graph.rejected.append((factor, "invalid fix quality"))
            return None
        d2 = gps_mahalanobis(graph, factor)
        cfg = graph.config
        if d2 > cfg.gps_gate:
            graph._gps_misses += 1
            if not (cfg.gps_gate_reset and graph._gps_misses > cfg.gps_gate_reset):
                graph.rejected.append((factor, f"chi-square gate: {d2:.3g} > {cfg.gps_gate}"))
                return None
            log.warning("accepting GPS fix after %d consecutive gate rejections", graph._gps_misses - 1)
        graph._gps_misses = 0
    elif isinstance(factor, (PreintegrationFactor, LidarOdometryFactor)):
        _require(graph, factor.i, factor.j)
        if factor.i == factor.j:
            raise GraphError("binary factor must link two distinct nodes")
    else:
        raise GraphError(f"unsupported factor type {type(factor).__name__}")
    fid = graph._next_factor
    graph._next_factor += 1
    graph.factors[fid] = factor
    return fid


def remove_factor(graph: PoseGraph, factor_id: int) -> Factor:
    try:
        return graph.factors.pop(factor_id)
    except KeyError:
        raise GraphError(f"unknown factor id {factor_id}") from None


def lidar_factor(i: int, j: int, relative_pose: Se3Pose, config: SolverConfig = SolverConfig()):
    return LidarOdometryFactor(i, j, relative_pose, np.diag(config.lidar_information))


def loop_factor(i: int, j: int, relative_pose: Se3Pose, config: SolverConfig = SolverConfig()):
    return LoopClosureFactor(i, j, relative_pose, np.diag(config.loop_information))


def gps_factor(i: int, position: EnuPoint, config: SolverConfig = SolverConfig(), fix_quality: int = 1, stamp=None):
    return GpsFactor(i, position, np.diag(config.gps_information), fix_quality, stamp)


def associate_gps(graph: PoseGraph, stamp: float, tolerance: float = 0.05) -> int | None:
    """Nearest node within ``tolerance`` seconds of ``stamp``; no interpolation."""
    best, best_dt = None, tolerance
    for node in reversed(graph.nodes.values()):
        dt = abs(node.stamp - stamp)
        if dt <= best_dt + 1e-12:
            best, best_dt = node.id, dt
        elif node.stamp < stamp - tolerance:
            break
    return best


# --------------------------------------------------------------------------- linearisation


def _preint_batch(dr_t, dv, dp, dt, ri, pi, vi, rj, pj, vj, g):
    """Stacked residuals ``[rot, vel, pos]`` and Jacobians w.r.t. ``[dtheta, dp, dv]``."""
    n = len(dt)
    rit = np.transpose(ri, (0, 2, 1))
    dtc = dt[:, None]
    dv_w = vj - vi - g * dtc
    dp_w = pj - pi - vi * dtc - 0.5 * g * dtc * dtc
    r_rot = so3_log_batch(dr_t @ rit @ rj)
    lv = np.einsum("nij,nj->ni", rit, dv_w)
    lp = np.einsum("nij,nj->ni", rit, dp_w)
    r = np.concatenate([r_rot, lv - dv, lp - dp], axis=1)
    jri = right_jacobian_inverse_batch(r_rot)
    ji = np.zeros((n, 9, 9))
    jj = np.zeros((n, 9, 9))
    ji[:, 0:3, 0:3] = -jri @ np.transpose(rj, (0, 2, 1)) @ ri
    jj[:, 0:3, 0:3] = jri
    ji[:, 3:6, 0:3] = skew_batch(lv)
    ji[:, 3:6, 6:9] = -rit
    jj[:, 3:6, 6:9] = rit
    ji[:, 6:9, 0:3] = skew_batch(lp)
    ji[:, 6:9, 3:6] = -rit
    ji[:, 6:9, 6:9] = -rit * dt[:, None, None]
    jj[:, 6:9, 3:6] = rit
    return r, ji, jj


def _relpose_batch(zr_t, zt, ri, pi, rj, pj):
    """Stacked residuals ``[trans, rot]`` of ``T_i^-1 T_j`` against the measurements."""
    n = len(zt)
    rit = np.transpose(ri, (0, 2, 1))
    d = np.einsum("nij,nj->ni", rit, pj - pi)
    r_rot = so3_log_batch(zr_t @ rit @ rj)
    r = np.concatenate([d - zt, r_rot], axis=1)
    jri = right_jacobian_inverse_batch(r_rot)
    ji = np.zeros((n, 6, 9))
    jj = np.zeros((n, 6, 9))
    ji[:, 0:3, 0:3] = skew_batch(d)
    ji[:, 0:3, 3:6] = -rit
    jj[:, 0:3, 3:6] = rit
    ji[:, 3:6, 0:3] = -jri @ np.transpose(rj, (0, 2, 1)) @ ri
    jj[:, 3:6, 0:3] = jri
    return r, ji, jj


def _gps_batch(z, ri, pi, lever, offset):
    r = pi + ri @ lever + offset - z
    ji = np.zeros((len(z), 3, 9))
    ji[:, :, 0:3] = -ri @ skew(lever)
    ji[:, :, 3:6] = np.eye(3)
    return r, ji


def _unpack(s):
    r, p, v = s
    return r[None], p[None], v[None]


def _preint_terms(f: PreintegratedImu, si, sj, g):
    """Single-factor form of :func:`_preint_batch`."""
    dr_t = f.delta_rotation.matrix.T[None]
    r, ji, jj = _preint_batch(
        dr_t, f.delta_velocity[None], f.delta_position[None], np.array([f.duration]), *_unpack(si), *_unpack(sj), g
    )
    return r[0], ji[0], jj[0]


def _relpose_terms(z: Se3Pose, si, sj):
    """Single-factor form of :func:`_relpose_batch`."""
    ri, pi, _ = _unpack(si)
    rj, pj, _ = _unpack(sj)
    r, ji, jj = _relpose_batch(z.rotation.matrix.T[None], z.translation[None], ri, pi, rj, pj)
    return r[0], ji[0], jj[0]


def _gps_terms(f: GpsFactor, si, lever, offset):
    ri, pi, _ = _unpack(si)
    r, ji = _gps_batch(f.vector[None], ri, pi, lever, offset)
    return r[0], ji[0]


class _Problem:
    """Working copy of the states touched by one optimisation, with factors grouped by kind."""

    def __init__(self, graph: PoseGraph, free: list[int], factors: list[Factor], offset_free: bool):
        self.graph = graph
        self.free = free
        self.factors = factors
        self.offset_free = offset_free
        self.offset_col = len(free) * BLOCK
        self.dim = self.offset_col + (3 if offset_free else 0)
        touched = list(free)
        seen = set(free)
        for f in factors:
            for k in (f.i,) if isinstance(f, GpsFactor) else (f.i, f.j):
                if k not in seen:
                    seen.add(k)
                    touched.append(k)
        self.index = {k: n for n, k in enumerate(touched)}
        nodes = [graph.nodes[k].state for k in touched]
        self.rot = np.array([s.pose.rotation.matrix for s in nodes]).reshape(-1, 3, 3)
        self.pos = np.array([s.pose.translation for s in nodes], dtype=float).reshape(-1, 3)
        self.vel = np.array([s.velocity for s in nodes], dtype=float).reshape(-1, 3)
        self.nfree = len(free)
        # Column of each touched state, -1 when held fixed.
        self.cols = np.full(len(touched), -1)
        self.cols[: self.nfree] = np.arange(self.nfree) * BLOCK
        self.offset = graph.enu_offset.copy()
        scale = graph.config.imu_information_scale
        pre = [f for f in factors if isinstance(f, PreintegrationFactor)]
        rel = [f for f in factors if isinstance(f, LidarOdometryFactor)]
        gps = [f for f in factors if isinstance(f, GpsFactor)]
        ix = self.index
        self.pre = None
        if pre:
            self.pre = dict(
                i=np.array([ix[f.i] for f in pre]),
                j=np.array([ix[f.j] for f in pre]),
                dr_t=np.array([f.factor.delta_rotation.matrix.T for f in pre]),
                dv=np.array([f.factor.delta_velocity for f in pre]),
                dp=np.array([f.factor.delta_position for f in pre]),
                dt=np.array([f.factor.duration for f in pre], dtype=float),
                info=np.array([f.factor.information for f in pre]) * scale,
            )
        self.rel = None
        if rel:
            self.rel = dict(
                i=np.array([ix[f.i] for f in rel]),
                j=np.array([ix[f.j] for f in rel]),
                zr_t=np.array([f.relative_pose.rotation.matrix.T for f in rel]),
                zt=np.array([f.relative_pose.translation for f in rel]),
                info=np.array([f.information for f in rel]),
            )
        self.gps = None
        if gps:
            self.gps = dict(
                i=np.array([ix[f.i] for f in gps]),
                z=np.array([f.vector for f in gps]),
                info=np.array([f.information for f in gps]),
            )

    def _groups(self):
        """Yield ``(r, info, ji, jj, idx_i, idx_j)`` per factor kind; ``jj`` is None for GPS."""
        g = self.graph
        if self.pre is not None:
            a = self.pre
            i, j = a["i"], a["j"]
            r, ji, jj = _preint_batch(
                a["dr_t"], a["dv"], a["dp"], a["dt"],
                self.rot[i], self.pos[i], self.vel[i], self.rot[j], self.pos[j], self.vel[j], g.gravity,
            )
            yield r, a["info"], ji, jj, i, j
        if self.rel is not None:
            a = self.rel
            i, j = a["i"], a["j"]
            r, ji, jj = _relpose_batch(a["zr_t"], a["zt"], self.rot[i], self.pos[i], self.rot[j], self.pos[j])
            yield r, a["info"], ji, jj, i, j
        if self.gps is not None:
            a = self.gps
            i = a["i"]
            r, ji = _gps_batch(a["z"], self.rot[i], self.pos[i], g.lever_arm, self.offset)
            yield r, a["info"], ji, None, i, None

    def cost(self) -> float:
        total = 0.0
        for r, info, *_ in self._groups():
            total += float(np.einsum("ni,nij,nj->", r, info, r))
        return total

    def linearise(self):
        rows, cols, vals = [], [], []
        grad = np.zeros(self.dim)
        total = 0.0
        for r, info, ji, jj, i, j in self._groups():
            total += float(np.einsum("ni,nij,nj->", r, info, r))
            ir = np.einsum("nij,nj->ni", info, r)
            blocks = [(self.cols[i], ji)]
            if jj is not None:
                blocks.append((self.cols[j], jj))
            elif self.offset_free:
                eye = np.broadcast_to(np.eye(3)[None, :, :], (len(r), 3, 3))
                blocks.append((np.full(len(r), self.offset_col), eye))
            for ca, ja in blocks:
                keep = ca >= 0
                if not keep.any():
                    continue
                ga = np.einsum("nki,nk->ni", ja[keep], ir[keep])
                na = ja.shape[2]
                np.add.at(grad, ca[keep][:, None] + np.arange(na), ga)
                ija = info[keep] @ ja[keep]
                for cb, jb in blocks:
                    both = keep & (cb >= 0)
                    if not both.any():
                        continue
                    sub = both[keep]
                    blk = np.einsum("nki,nkj->nij", jb[both], ija[sub]).transpose(0, 2, 1)
                    nb = jb.shape[2]
                    ra = ca[both][:, None, None] + np.arange(na)[None, :, None]
                    cc = cb[both][:, None, None] + np.arange(nb)[None, None, :]
                    rows.append(np.broadcast_to(ra, blk.shape).ravel())
                    cols.append(np.broadcast_to(cc, blk.shape).ravel())
                    vals.append(blk.ravel())
        h = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(self.dim, self.dim)
        ).tocsc()
        return h, grad, total

    def snapshot(self):
        return self.rot.copy(), self.pos.copy(), self.vel.copy(), self.offset.copy()

    def restore(self, snap):
        self.rot, self.pos, self.vel, self.offset = (a.copy() for a in snap)

    def retract(self, step: np.ndarray) -> None:
        n = self.nfree
        blocks = step[: n * BLOCK].reshape(n, BLOCK)
        self.rot[:n] = self.rot[:n] @ so3_exp_batch(blocks[:, 0:3])
        self.pos[:n] += blocks[:, 3:6]
        self.vel[:n] += blocks[:, 6:9]
        if self.offset_free:
            self.offset = self.offset + step[self.offset_col :]

    def step_is_small(self, step: np.ndarray, rot_tol: float, trans_tol: float) -> bool:
        blocks = step[: self.nfree * BLOCK].reshape(self.nfree, BLOCK)
        if np.any(np.linalg.norm(blocks[:, 0:3], axis=1) > rot_tol):
            return False
        if np.any(np.linalg.norm(blocks[:, 3:9], axis=1) > trans_tol):
            return False
        return not (self.offset_free and np.linalg.norm(step[self.offset_col :]) > trans_tol)

    def write_back(self) -> None:
        for n, k in enumerate(self.free):
            old = self.graph.nodes[k].state
            pose = Se3Pose(Rotation.from_matrix(self.rot[n]), self.pos[n].copy())
            self.graph.nodes[k].state = NavState(pose, self.vel[n].copy(), old.bias, old.stamp)
        if self.offset_free:
            self.graph.enu_offset = self.offset.copy()


def _window_problem(graph: PoseGraph, config: SolverConfig) -> _Problem:
    free = [k for k in graph.window.active if not graph.nodes[k].fixed]
    free_set = set(free)
    offset_free = config.estimate_enu_offset
    chosen = []
    for f in graph.factors.values():
        if isinstance(f, GpsFactor):
            if f.i in free_set or (offset_free and f.i in graph.nodes):
                chosen.append(f)
        elif f.i in free_set or f.j in free_set:
            chosen.append(f)
    has_gps = any(isinstance(f, GpsFactor) for f in chosen)
    return _Problem(graph, free, chosen, offset_free and has_gps)


def optimize_window(graph: PoseGraph, config: SolverConfig | None = None) -> OptimizationReport:
    """Damped Gauss-Newton over the free nodes of the active window.

    A step is kept only when it lowers the total cost; otherwise damping
    grows tenfold. When no damping level yields descent on the first
    iteration the states are left untouched and the report says so.
    """
    config = config or graph.config
    prob = _window_problem(graph, config)
    if not prob.free or not prob.factors:
        raise GraphError("window has no free node with a factor")
    h, grad, cost = prob.linearise()
    initial = cost
    lam = config.initial_damping
    converged = False
    message = ""
    it = 0
    for it in range(1, config.max_iterations + 1):
        diag = np.maximum(h.diagonal(), 1e-12)
        accepted = False
        for _ in range(config.max_damping_steps):
            a = (h + sp.diags(lam * diag)).tocsc()
            try:
                step = -spla.splu(a).solve(grad)
            except RuntimeError:
                step = None
            if step is not None and np.all(np.isfinite(step)):
                snap = prob.snapshot()
                prob.retract(step)
                new_cost = prob.cost()
                if new_cost <= cost:
                    accepted = True
                    lam = max(lam * 0.1, config.initial_damping)
                    break
                prob.restore(snap)
            lam *= 10.0
        if not accepted:
            if it == 1:
                message = "no descent step after damping escalation"
                return OptimizationReport(it, initial, initial, False, message)
            converged = True
            break
        cost = new_cost
        small = prob.step_is_small(step, config.rotation_tolerance, config.translation_tolerance)
        if small:
            converged = True
            break
        h, grad, cost = prob.linearise()
    prob.write_back()
    return OptimizationReport(it, initial, cost, converged, message)


def total_cost(graph: PoseGraph) -> float:
    """``sum r^T I r`` over every factor in the graph."""
    free = list(graph.nodes)
    prob = _Problem(graph, free, list(graph.factors.values()), False)
    return prob.cost()


# --------------------------------------------------------------------------- loops and merging


def detect_loop_candidates(graph: PoseGraph, current: int, radius: float, exclusion: int) -> list[int]:
    """Frozen nodes within ``radius`` of ``current``, skipping the latest ``exclusion`` nodes."""
    if current not in graph.nodes:
        raise GraphError(f"unknown node {current}")
    ids = list(graph.nodes)
    recent = set(ids[max(0, ids.index(current) - exclusion) :])
    here = graph.nodes[current].state.pose.translation
    out = []
    for k in ids:
        node = graph.nodes[k]
        if k in recent or not node.fixed:
            continue
        if np.linalg.norm(node.state.pose.translation - here) <= radius:
            out.append(k)
    return out


def verify_loop_candidate(
    graph: PoseGraph,
    current: int,
    candidate: int,
    register_fn: Callable[[Se3Pose], object],
    max_cost: float,
    config: SolverConfig | None = None,
) -> LoopClosureFactor | None:
    """Run ``register_fn(initial_relative_pose)`` and turn a good result into a factor.

    ``register_fn`` aligns the current scan to the candidate's map and
    returns a registration result (``pose``, ``converged``, ``final_cost``,
    ``inlier_count``) or raises on degenerate geometry.
    """
    config = config or graph.config
    guess = graph.nodes[candidate].state.pose.inverse() * graph.nodes[current].state.pose
    try:
        res = register_fn(guess)
    except (RuntimeError, ValueError) as exc:
        log.info("loop %d->%d rejected: %s", candidate, current, exc)
        return None
    mean_cost = res.final_cost / max(res.inlier_count, 1)
    if not res.converged or mean_cost > max_cost:
        return None
    return loop_factor(candidate, current, res.pose, config)


def _anchor_rotation(src: GeoLla, dst: GeoLla) -> np.ndarray:
    return EnuAnchor.from_lla(dst).rotation @ EnuAnchor.from_lla(src).rotation.T


def merge_sessions(
    old: PoseGraph,
    new: PoseGraph,
    links: list[LoopClosureFactor],
    fix_old: bool = True,
    config: SolverConfig | None = None,
) -> tuple[PoseGraph, dict[int, int], OptimizationReport]:
    """Union of two graphs joined by ``links`` (``i`` in ``old``, ``j`` in ``new``).

    New node ids continue after the old ones; the returned mapping takes
    ``new`` ids to merged ids. New states are re-expressed in the old
    anchor frame when the anchors differ. One joint optimisation runs over
    every free node.
    """
    if not links:
        raise GraphError("merging needs at least one verified link factor")
    config = config or old.config
    rot = np.eye(3)
    shift = np.zeros(3)
    if old.anchor is not None and new.anchor is not None and old.anchor != new.anchor:
        sep = np.linalg.norm(lla_to_ecef(old.anchor).vector() - lla_to_ecef(new.anchor).vector())
        if sep > 1000.0:
            raise AnchorMismatchError(f"session anchors are {sep:.1f} m apart (limit 1000 m)")
        rot = _anchor_rotation(new.anchor, old.anchor)
        shift = reanchor(np.zeros((1, 3)), EnuAnchor.from_lla(new.anchor), EnuAnchor.from_lla(old.anchor))[0]
    merged = old.copy()
    merged.rejected = []
    base = (max(old.nodes) + 1) if old.nodes else 0
    mapping = {k: base + n for n, k in enumerate(new.nodes)}
    rot_r = Rotation.from_matrix(rot)
    for k, node in new.nodes.items():
        s = node.state
        p = rot @ (s.pose.translation + new.enu_offset) + shift - old.enu_offset
        pose = Se3Pose(rot_r * s.pose.rotation, p)
        state = NavState(pose, rot @ s.velocity, s.bias, s.stamp)
        merged.nodes[mapping[k]] = StateNode(mapping[k], state, False)
    for k in old.nodes:
        merged.nodes[k].fixed = fix_old or old.nodes[k].fixed
    for f in new.factors.values():
        if isinstance(f, GpsFactor):
            g = replace(f, i=mapping[f.i], position=EnuPoint(*(rot @ f.vector + shift)))
        else:
            g = replace(f, i=mapping[f.i], j=mapping[f.j])
        merged.factors[merged._next_factor] = g
        merged._next_factor += 1
    for link in links:
        if link.i not in old.nodes or link.j not in new.nodes:
            raise GraphError(f"link {link.i}->{link.j} must join an old node to a new node")
        g = replace(link, j=mapping[link.j])
        merged.factors[merged._next_factor] = g
        merged._next_factor += 1
    merged.window = SlidingWindow(max(len(merged.nodes), 2), list(merged.nodes), None)
    report = optimize_window(merged, replace(config, estimate_enu_offset=False))
    return merged, mapping, report
