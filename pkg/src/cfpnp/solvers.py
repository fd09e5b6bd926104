"""Iterative registration engines.

``irls_register`` maximizes the truncated kernel sum: at every outer
iteration the kernel weights are frozen at the current pose, one damped
Gauss-Newton (Levenberg-Marquardt) step is taken on the reweighted
least-squares problem plus the pose prior, and the candidate is kept only if
the kernel sum did not drop.  ``dticp_register`` is the plain
closest-point / least-squares alternation used as a baseline.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import ConfigurationError, DegenerateGeometryError
from .liegeo import (
    CameraIntrinsics,
    DEPTH_EPSILON,
    Pose,
    adjoint,
    exp_map,
    relative_log,
    project_points,
    projection_jacobian,
    se3_distance,
    se3_left_jacobian_inv,
    so3_exp,
    so3_left_jacobian_inv,
    so3_log,
)
from .objectives import (
    KernelConfig,
    huber_rho,
    huber_weights,
    scale_at,
)
from .spatial import STACK_SIZE, TargetIndex, radius_knn_one


@dataclass(frozen=True)
class SolverConfig:
    max_outer_iterations: int = 50
    lm_initial_damping: float = 1e-3
    lm_damping_up: float = 10.0
    lm_damping_down: float = 0.1
    twist_tolerance: float = 1e-7
    energy_tolerance: float = 1e-6
    max_rejected_steps: int = 5
    # candidates whose mean depth exceeds this multiple of the start depth are rejected
    depth_guard: float = 10.0
    huber_delta: float = 5.0

    def __post_init__(self):
        if self.max_outer_iterations < 1:
            raise ConfigurationError("max_outer_iterations must be >= 1")
        if min(self.lm_initial_damping, self.twist_tolerance, self.energy_tolerance) <= 0:
            raise ConfigurationError("damping and tolerances must be positive")
        if not (self.lm_damping_up > 1 and 0 < self.lm_damping_down < 1):
            raise ConfigurationError("need damping_up > 1 and 0 < damping_down < 1")
        if self.max_rejected_steps < 1 or self.depth_guard <= 1 or self.huber_delta <= 0:
            raise ConfigurationError("invalid rejection / guard / huber settings")


MIN_DAMPING = 1e-12


class Termination(str, enum.Enum):
    CONVERGED = "converged"
    MAX_ITERATIONS = "max_iterations"
    DEGENERATE = "degenerate"


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    ell: float
    e_data_before: float
    e_data: float
    e_init: float
    objective: float
    median_tre: float
    accepted: bool
    excluded: int
    step_norm: float
    damping: float
    guarded: bool = False


@dataclass
class RegistrationResult:
    pose: Pose
    trace: list[IterationRecord] = field(default_factory=list)
    wall_time_ms: float = 0.0
    termination: Termination = Termination.MAX_ITERATIONS

    @property
    def iterations(self) -> int:
        return len(self.trace)


@dataclass(frozen=True, eq=False)
class FixedPairing:
    """Frozen pairing: source row i is always matched to ``points[target_idx[i]]``."""

    points: np.ndarray
    target_idx: np.ndarray


PIVOTS = ("camera", "object")


def apply_update(pose: Pose, delta: np.ndarray, rotation_only: bool = False, pivot: str = "camera") -> Pose:
    """Left update.  Rotation-only updates turn the scene about the camera
    center (``pivot="camera"``, so the translation turns too) or about the
    model origin (``pivot="object"``, translation kept)."""
    if rotation_only:
        r = so3_exp(delta)
        t = pose.translation if pivot == "object" else r @ pose.translation
        return Pose(r @ pose.rotation, t, pose.compositions)
    return exp_map(delta) @ pose


@numba.njit(cache=True)
def _normal_equations(rot, trans, src, idx, targets, w, fx, fy, cx, cy, rotation_only, object_pivot):
    """Gauss-Newton H, g and the frozen-weight cost, aggregated per point.

    sum_j w_ij |u_i - q_j|^2 has the same derivatives as
    W_i |u_i - qbar_i|^2 + const with W_i = sum_j w_ij, so each point
    contributes one 2-row Jacobian block.
    """
    dof = 3 if rotation_only else 6
    h = np.zeros((dof, dof))
    g = np.zeros(dof)
    cost = 0.0
    jac = np.zeros((2, 6))
    for i in range(src.shape[0]):
        wsum = 0.0
        for j in range(idx.shape[1]):
            if idx[i, j] >= 0:
                wsum += w[i, j]
        if wsum <= 0.0:
            continue
        px, py, pz = src[i, 0], src[i, 1], src[i, 2]
        x = rot[0, 0] * px + rot[0, 1] * py + rot[0, 2] * pz + trans[0]
        y = rot[1, 0] * px + rot[1, 1] * py + rot[1, 2] * pz + trans[1]
        z = rot[2, 0] * px + rot[2, 1] * py + rot[2, 2] * pz + trans[2]
        iz = 1.0 / z
        u = fx * x * iz + cx
        v = fy * y * iz + cy
        ru = 0.0
        rv = 0.0
        for j in range(idx.shape[1]):
            t = idx[i, j]
            if t >= 0:
                du = u - targets[t, 0]
                dv = v - targets[t, 1]
                cost += w[i, j] * (du * du + dv * dv)
                ru += w[i, j] * du
                rv += w[i, j] * dv
        a00 = fx * iz
        a02 = -fx * x * iz * iz
        a11 = fy * iz
        a12 = -fy * y * iz * iz
        # lever of the rotation: the camera-frame point, or R p when the
        # rotation turns about the model origin
        lx, ly, lz = x, y, z
        if rotation_only and object_pivot:
            lx, ly, lz = x - trans[0], y - trans[1], z - trans[2]
        # d(pixel)/d(phi) = dpi * (-lever^)
        r0 = a02 * ly
        r1 = a00 * lz - a02 * lx
        r2 = -a00 * ly
        s0 = -a11 * lz + a12 * ly
        s1 = -a12 * lx
        s2 = a11 * lx
        off = 0
        if not rotation_only:
            jac[0, 0], jac[0, 1], jac[0, 2] = a00, 0.0, a02
            jac[1, 0], jac[1, 1], jac[1, 2] = 0.0, a11, a12
            off = 3
        jac[0, off], jac[0, off + 1], jac[0, off + 2] = r0, r1, r2
        jac[1, off], jac[1, off + 1], jac[1, off + 2] = s0, s1, s2
        for a in range(dof):
            g[a] += jac[0, a] * ru + jac[1, a] * rv
            for b in range(a, dof):
                h[a, b] += wsum * (jac[0, a] * jac[0, b] + jac[1, a] * jac[1, b])
    for a in range(dof):
        for b in range(a):
            h[a, b] = h[b, a]
    return h, g, cost


@numba.njit(cache=True)
def _weighted_cost(rot, trans, src, idx, targets, w, fx, fy, cx, cy, eps):
    cost = 0.0
    for i in range(src.shape[0]):
        active = False
        for j in range(idx.shape[1]):
            if idx[i, j] >= 0 and w[i, j] > 0.0:
                active = True
        if not active:
            continue
        px, py, pz = src[i, 0], src[i, 1], src[i, 2]
        z = rot[2, 0] * px + rot[2, 1] * py + rot[2, 2] * pz + trans[2]
        if z <= eps:
            return np.inf
        x = rot[0, 0] * px + rot[0, 1] * py + rot[0, 2] * pz + trans[0]
        y = rot[1, 0] * px + rot[1, 1] * py + rot[1, 2] * pz + trans[1]
        u = fx * x / z + cx
        v = fy * y / z + cy
        for j in range(idx.shape[1]):
            t = idx[i, j]
            if t >= 0:
                du = u - targets[t, 0]
                dv = v - targets[t, 1]
                cost += w[i, j] * (du * du + dv * dv)
    return cost


class PairResiduals:
    """Residuals sqrt(w_ij) * (pi(T p_i) - q_j) with frozen weights and targets.

    ``target_idx`` and ``weights`` are (n, m); slot j of point i pairs it
    with ``targets[target_idx[i, j]]``, and -1 marks an unused slot.
    Jacobians are taken with respect to the left twist (or, with
    ``rotation_only``, the rotational part only; with ``pivot="object"``
    the rotation acts on ``R p`` and the translation is held).
    """

    def __init__(self, src, target_idx, targets, weights, camera: CameraIntrinsics, rotation_only=False,
                 pivot="camera"):
        self.src = np.ascontiguousarray(src, dtype=float)
        self.idx = np.ascontiguousarray(target_idx, dtype=np.int64)
        self.targets = np.ascontiguousarray(targets, dtype=float)
        w = np.asarray(weights, dtype=float)
        self.weights = np.ascontiguousarray(np.where(self.idx >= 0, w, 0.0))
        self.camera = camera
        self.rotation_only = rotation_only
        if pivot not in PIVOTS:
            raise ConfigurationError(f"unknown pivot {pivot!r}")
        self.pivot = pivot

    @classmethod
    def _trusted(cls, src, target_idx, targets, weights, camera, rotation_only, pivot):
        # inner-loop constructor: arrays are already contiguous and unused
        # slots already carry zero weight
        self = cls.__new__(cls)
        self.src, self.idx, self.targets, self.weights = src, target_idx, targets, weights
        self.camera, self.rotation_only, self.pivot = camera, rotation_only, pivot
        return self

    @property
    def dof(self) -> int:
        return 3 if self.rotation_only else 6

    def _cam(self):
        c = self.camera
        return c.fx, c.fy, c.cx, c.cy

    def cost(self, pose: Pose) -> float:
        """Frozen-weight objective; inf if a weighted point is behind the camera."""
        return _weighted_cost(
            pose.rotation, pose.translation, self.src, self.idx, self.targets,
            self.weights, *self._cam(), DEPTH_EPSILON,
        )

    def normal_equations(self, pose: Pose) -> tuple[np.ndarray, np.ndarray, float]:
        return _normal_equations(
            pose.rotation, pose.translation, self.src, self.idx, self.targets,
            self.weights, *self._cam(), self.rotation_only, self.pivot == "object",
        )

    # dense forms, used by tests and finite-difference checks
    def residuals(self, pose: Pose) -> np.ndarray:
        uv, _ = project_points(pose, self.src, self.camera)
        q = self.targets[np.maximum(self.idx, 0)]
        sw = np.sqrt(self.weights)[:, :, None]
        return (sw * (uv[:, None, :] - q)).reshape(-1)

    def jacobian(self, pose: Pose) -> np.ndarray:
        x = pose.apply(self.src)
        lever = x - pose.translation if self.rotation_only and self.pivot == "object" else None
        j = projection_jacobian(x, self.camera, self.rotation_only, lever)
        sw = np.sqrt(self.weights)[:, :, None, None]
        return (sw * j[:, None, :, :]).reshape(-1, self.dof)


@dataclass(frozen=True)
class PosePrior:
    """lam * |log(anchor^-1 T)|^2.  Rotation-only solves use the rotational part."""

    anchor: Pose
    lam: float

    def __post_init__(self):
        object.__setattr__(self, "_ad_inv", adjoint(self.anchor.inverse()))

    def residual(self, pose: Pose, rotation_only: bool = False) -> np.ndarray:
        if rotation_only:
            return so3_log(self.anchor.rotation.T @ pose.rotation)
        return relative_log(self.anchor, pose)

    def jacobian(self, pose: Pose, e: np.ndarray, rotation_only: bool = False) -> np.ndarray:
        # log(A^-1 exp(d) T) = log(exp(Ad(A^-1) d) A^-1 T) ~ e + Jl^-1(e) Ad(A^-1) d
        if rotation_only:
            return so3_left_jacobian_inv(e) @ self.anchor.rotation.T
        return se3_left_jacobian_inv(e) @ self._ad_inv

    def cost(self, pose: Pose, rotation_only: bool = False) -> float:
        if self.lam == 0:
            return 0.0
        e = self.residual(pose, rotation_only)
        return self.lam * float(e @ e)


def lm_step(
    pose: Pose,
    problem: PairResiduals,
    prior: PosePrior | None,
    damping: float,
    cfg: SolverConfig = SolverConfig(),
    return_costs: bool = False,
):
    """One damped Gauss-Newton step on ``problem`` (+ prior).

    Returns ``(candidate, new_damping, delta)``, plus the objective at
    ``pose`` and at the candidate when ``return_costs``.  The damping is
    lowered if the frozen-weight objective decreased at the candidate and
    raised otherwise.  Raises DegenerateGeometryError if the damped normal
    matrix is still singular after three escalations.
    """
    rot = problem.rotation_only
    h, g, cost = problem.normal_equations(pose)
    if prior is not None and prior.lam > 0:
        e = prior.residual(pose, rot)
        jp = prior.jacobian(pose, e, rot)
        h = h + prior.lam * (jp.T @ jp)
        g = g + prior.lam * (jp.T @ e)
        cost += prior.lam * float(e @ e)
    if not np.any(g):
        out = (pose, max(damping * cfg.lm_damping_down, MIN_DAMPING), np.zeros(problem.dof))
        return out + (cost, cost) if return_costs else out
    mu = damping
    for _ in range(4):
        a = h + mu * np.diag(np.diag(h))
        try:
            chol = np.linalg.cholesky(a)
        except np.linalg.LinAlgError:
            mu *= cfg.lm_damping_up
            continue
        if np.all(np.isfinite(chol)):
            break
        mu *= cfg.lm_damping_up
    else:
        raise DegenerateGeometryError("normal equations singular after damping escalation")
    delta = -np.linalg.solve(chol.T, np.linalg.solve(chol, g))
    candidate = apply_update(pose, delta, rot, problem.pivot)
    new_cost = problem.cost(candidate)
    if prior is not None:
        new_cost += prior.cost(candidate, rot)
    if new_cost < cost:
        mu = max(mu * cfg.lm_damping_down, MIN_DAMPING)
    else:
        mu *= cfg.lm_damping_up
    if return_costs:
        return candidate, mu, delta, cost, new_cost
    return candidate, mu, delta


@numba.njit(cache=True)
def _project_one(rot, trans, p):
    x = rot[0, 0] * p[0] + rot[0, 1] * p[1] + rot[0, 2] * p[2] + trans[0]
    y = rot[1, 0] * p[0] + rot[1, 1] * p[1] + rot[1, 2] * p[2] + trans[1]
    z = rot[2, 0] * p[0] + rot[2, 1] * p[1] + rot[2, 2] * p[2] + trans[2]
    return x, y, z


@numba.njit(cache=True)
def _evaluate_tree(rot, trans, src, tree, k, r2, fx, fy, cx, cy, eps, uv, depth, idx, d2):
    stack_node = np.empty(STACK_SIZE, dtype=np.int64)
    stack_bound = np.empty(STACK_SIZE, dtype=np.float64)
    for i in range(src.shape[0]):
        x, y, z = _project_one(rot, trans, src[i])
        depth[i] = z
        if z <= eps:
            uv[i, 0] = np.nan
            uv[i, 1] = np.nan
            for j in range(k):
                idx[i, j] = -1
                d2[i, j] = np.inf
            continue
        u = fx * x / z + cx
        v = fy * y / z + cy
        uv[i, 0] = u
        uv[i, 1] = v
        radius_knn_one(
            tree[0], tree[1], tree[2], tree[3], tree[4], tree[5],
            u, v, k, r2, idx, d2, i, stack_node, stack_bound,
        )


@numba.njit(cache=True)
def _evaluate_fixed(rot, trans, src, points, target_idx, fx, fy, cx, cy, eps, uv, depth, idx, d2):
    for i in range(src.shape[0]):
        x, y, z = _project_one(rot, trans, src[i])
        depth[i] = z
        if z <= eps:
            uv[i, 0] = np.nan
            uv[i, 1] = np.nan
            idx[i, 0] = -1
            d2[i, 0] = np.inf
            continue
        u = fx * x / z + cx
        v = fy * y / z + cy
        uv[i, 0] = u
        uv[i, 1] = v
        t = target_idx[i]
        idx[i, 0] = t
        d2[i, 0] = (u - points[t, 0]) ** 2 + (v - points[t, 1]) ** 2


@numba.njit(cache=True)
def _kernel_weights(idx, d2, ell, radius_factor, pw, out_idx, out_w):
    """Truncated kernel weights (times point weights) and the kernel sum.

    Slot 0 (the nearest target) is always kept; further slots only within
    ``radius_factor * ell``.  Summation order: per point, then ascending
    source index.
    """
    thr = (radius_factor * ell) ** 2
    inv = 1.0 / (2.0 * ell * ell)
    total = 0.0
    for i in range(idx.shape[0]):
        acc = 0.0
        for j in range(idx.shape[1]):
            if idx[i, j] >= 0 and (j == 0 or d2[i, j] <= thr):
                kv = np.exp(-d2[i, j] * inv)
                out_idx[i, j] = idx[i, j]
                out_w[i, j] = kv * pw[i]
                acc += kv
            else:
                out_idx[i, j] = -1
                out_w[i, j] = 0.0
        total += pw[i] * acc
    return total


@numba.njit(cache=True)
def _snapshot_stats(depth, d2, eps):
    # (mean depth, median nearest distance) over the visible rows
    n = 0
    total = 0.0
    dist = np.empty(depth.shape[0])
    for i in range(depth.shape[0]):
        if depth[i] > eps:
            total += depth[i]
            dist[n] = np.sqrt(d2[i, 0])
            n += 1
    if n == 0:
        return np.nan, np.nan
    return total / n, np.median(dist[:n])


class _Snapshot:
    """Projection and neighbor table at one pose.

    ``r2`` bounds the neighbor search radius; rows keep their nearest
    target even when it lies outside.
    """

    def __init__(self, pose, src, provider, camera, k, r2=np.inf):
        self.pose = pose
        n = len(src)
        self.uv = np.empty((n, 2))
        self.depth = np.empty(n)
        c = camera
        if isinstance(provider, FixedPairing):
            self.idx = np.empty((n, 1), dtype=np.int64)
            self.d2 = np.empty((n, 1))
            _evaluate_fixed(
                pose.rotation, pose.translation, src, provider.points, provider.target_idx,
                c.fx, c.fy, c.cx, c.cy, DEPTH_EPSILON, self.uv, self.depth, self.idx, self.d2,
            )
        else:
            self.idx = np.empty((n, k), dtype=np.int64)
            self.d2 = np.empty((n, k))
            _evaluate_tree(
                pose.rotation, pose.translation, src, provider.arrays, k, float(r2),
                c.fx, c.fy, c.cx, c.cy, DEPTH_EPSILON,
                self.uv, self.depth, self.idx, self.d2,
            )
        self.valid = self.depth > DEPTH_EPSILON
        self._weights = None
        self._mean_depth, self._median_tre = _snapshot_stats(self.depth, self.d2, DEPTH_EPSILON)

    def weights(self, ell, radius_factor, pw):
        """(masked idx, weights, e_data) at bandwidth ``ell``, cached per ell."""
        if self._weights is None or self._weights[0] != ell:
            idx = np.empty_like(self.idx)
            w = np.empty_like(self.d2)
            e = _kernel_weights(self.idx, self.d2, ell, radius_factor, pw, idx, w)
            self._weights = (ell, idx, w, e)
        return self._weights[1:]

    def median_tre(self) -> float:
        return self._median_tre

    def mean_depth(self) -> float:
        return self._mean_depth


def _check_inputs(src):
    src = np.ascontiguousarray(src, dtype=float)
    if src.ndim != 2 or src.shape[1] != 3 or len(src) == 0:
        raise ConfigurationError("source must be a non-empty (N, 3) array")
    return src


def kernel_register(
    src: np.ndarray,
    provider: TargetIndex | FixedPairing,
    camera: CameraIntrinsics,
    T0: Pose,
    kcfg: KernelConfig = KernelConfig(),
    scfg: SolverConfig = SolverConfig(),
    rotation_only: bool = False,
    pivot: str = "camera",
) -> RegistrationResult:
    """Shared outer loop for the full, rotation-only and fixed-pairing solves.

    ``T0`` is both the start pose and the anchor of the pose prior.
    """
    t_start = time.perf_counter()
    if pivot not in PIVOTS:
        raise ConfigurationError(f"unknown pivot {pivot!r}")
    src = _check_inputs(src)
    pw = kcfg.weights_for(len(src))
    fixed = isinstance(provider, FixedPairing)
    k = 1 if fixed else kcfg.max_neighbors
    targets = np.ascontiguousarray(provider.points, dtype=float)
    state = _Snapshot(T0, src, provider, camera, k)
    result = RegistrationResult(pose=T0)
    if not state.valid.any():
        result.termination = Termination.DEGENERATE
        result.wall_time_ms = 1e3 * (time.perf_counter() - t_start)
        return result

    ell0 = float(np.sqrt(np.max(state.d2[state.valid, 0])))
    depth0 = state.mean_depth()
    pose = T0
    damping = scfg.lm_initial_damping
    extra_halvings = 0
    rejections = 0
    termination = Termination.MAX_ITERATIONS

    for it in range(scfg.max_outer_iterations):
        ell = scale_at(ell0, it, kcfg.shrink_period, kcfg.ell_floor, extra_halvings)
        at_floor = ell <= kcfg.ell_floor
        r2 = (kcfg.radius_factor * ell) ** 2
        w_idx, w, e_cur = state.weights(ell, kcfg.radius_factor, pw)
        prior = PosePrior(T0, kcfg.prior_weight(ell))
        problem = PairResiduals._trusted(src, w_idx, targets, w, camera, rotation_only, pivot)
        try:
            candidate, new_damping, delta, obj_cur, obj_cand = lm_step(
                pose, problem, prior, damping, scfg, return_costs=True
            )
        except DegenerateGeometryError:
            termination = Termination.DEGENERATE
            break
        step = float(np.linalg.norm(delta))
        cand_state = _Snapshot(candidate, src, provider, camera, k, r2)
        guarded = False
        if cand_state.valid.any():
            e_cand = cand_state.weights(ell, kcfg.radius_factor, pw)[2]
            guarded = cand_state.mean_depth() > scfg.depth_guard * depth0
        else:
            e_cand = 0.0
        accepted = (not guarded) and cand_state.valid.any() and e_cand >= e_cur
        if accepted:
            pose, state = candidate, cand_state
            damping = new_damping
            rejections = 0
        else:
            damping = max(new_damping, damping) * scfg.lm_damping_up
            rejections += 1

        result.trace.append(
            IterationRecord(
                iteration=it,
                ell=ell,
                e_data_before=e_cur,
                e_data=e_cand if accepted else e_cur,
                e_init=se3_distance(T0, pose),
                objective=obj_cand if accepted else obj_cur,
                median_tre=state.median_tre(),
                accepted=accepted,
                excluded=int((~state.valid).sum()),
                step_norm=step,
                damping=damping,
                guarded=guarded,
            )
        )

        if at_floor:
            if step < scfg.twist_tolerance:
                termination = Termination.CONVERGED
                break
            if accepted and abs(e_cand - e_cur) <= scfg.energy_tolerance * max(abs(e_cur), 1e-300):
                termination = Termination.CONVERGED
                break
            if rejections >= scfg.max_rejected_steps:
                termination = Termination.CONVERGED
                break
        elif rejections >= scfg.max_rejected_steps:
            extra_halvings += 1
            rejections = 0

    result.pose = pose
    result.termination = termination
    result.wall_time_ms = 1e3 * (time.perf_counter() - t_start)
    return result


def irls_register(src, index, camera, T0, kcfg=KernelConfig(), scfg=SolverConfig()):
    """Full 6-DoF kernel registration from ``T0``."""
    return kernel_register(src, index, camera, T0, kcfg, scfg, rotation_only=False)


def rotation_only_register(
    src, index, camera, T0, kcfg=KernelConfig(), scfg=SolverConfig(), pivot="camera"
):
    """Kernel registration over a rotation only (zero translational twist).

    With the default camera pivot the model turns about the camera center,
    so a lateral translation offset can be absorbed by a small rotation;
    the translation vector is unchanged only when it is zero.  With
    ``pivot="object"`` the translation of ``T0`` is kept exactly.
    """
    return kernel_register(src, index, camera, T0, kcfg, scfg, rotation_only=True, pivot=pivot)


def dticp_register(
    src: np.ndarray,
    index: TargetIndex,
    camera: CameraIntrinsics,
    T0: Pose,
    scfg: SolverConfig = SolverConfig(),
    loss: str = "squared",
) -> RegistrationResult:
    """Closest-point pairing alternated with a squared or Huber least-squares step.

    A step is kept when the loss at the current pairing does not increase;
    the pairing is rebuilt after every accepted step.
    """
    if loss not in ("squared", "huber"):
        raise ConfigurationError(f"unknown loss {loss!r}")
    t_start = time.perf_counter()
    src = _check_inputs(src)
    targets = index.points
    state = _Snapshot(T0, src, index, camera, 1)
    result = RegistrationResult(pose=T0)
    if not state.valid.any():
        result.termination = Termination.DEGENERATE
        result.wall_time_ms = 1e3 * (time.perf_counter() - t_start)
        return result
    pose = T0
    damping = scfg.lm_initial_damping
    rejections = 0
    termination = Termination.MAX_ITERATIONS

    def robust(uv, depth, q, active):
        if np.any(depth[active] <= DEPTH_EPSILON):
            return np.inf
        r = np.linalg.norm(uv[active] - q[active], axis=1)
        if loss == "huber":
            return float(huber_rho(r, scfg.huber_delta).sum())
        return float((r * r).sum())

    for it in range(scfg.max_outer_iterations):
        active = state.valid
        q = targets[np.maximum(state.idx[:, 0], 0)]
        r = np.sqrt(np.where(active, state.d2[:, 0], 0.0))
        w = active.astype(float)
        if loss == "huber":
            w = w * huber_weights(r, scfg.huber_delta)
        problem = PairResiduals(src, state.idx, targets, w[:, None], camera)
        e_cur = robust(state.uv, state.depth, q, active)
        try:
            candidate, new_damping, delta = lm_step(pose, problem, None, damping, scfg)
        except DegenerateGeometryError:
            termination = Termination.DEGENERATE
            break
        step = float(np.linalg.norm(delta))
        uv_c, depth_c = project_points(candidate, src, camera)
        e_cand = robust(uv_c, depth_c, q, active)
        accepted = e_cand <= e_cur
        if accepted:
            pose = candidate
            state = _Snapshot(candidate, src, index, camera, 1)
            damping = new_damping
            rejections = 0
        else:
            damping = max(new_damping, damping) * scfg.lm_damping_up
            rejections += 1
        result.trace.append(
            IterationRecord(
                iteration=it,
                ell=np.nan,
                e_data_before=np.nan,
                e_data=np.nan,
                e_init=se3_distance(T0, pose),
                objective=e_cand if accepted else e_cur,
                median_tre=state.median_tre(),
                accepted=accepted,
                excluded=int((~state.valid).sum()),
                step_norm=step,
                damping=damping,
            )
        )
        if not state.valid.any():
            termination = Termination.DEGENERATE
            break
        if step < scfg.twist_tolerance or rejections >= scfg.max_rejected_steps:
            termination = Termination.CONVERGED
            break
        if accepted and abs(e_cur - e_cand) <= scfg.energy_tolerance * max(e_cur, 1e-300):
            termination = Termination.CONVERGED
            break

    result.pose = pose
    result.termination = termination
    result.wall_time_ms = 1e3 * (time.perf_counter() - t_start)
    return result
