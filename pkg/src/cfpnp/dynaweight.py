"""Alternating registration: full-set kernel solves interleaved with solves on
a small anchor subset (graph nodes or farthest-point samples) whose pairing
is frozen for the duration of each subset solve.

A rotation-only solve initializes the pose, then alternations run (at least
one) until the median closest-point distance of the full set drops below
``tre_threshold``; the alternation pose with the lowest median distance is
returned.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, DegenerateGeometryError
from .liegeo import CameraIntrinsics, Pose, project_points, visible
from .objectives import KernelConfig
from .solvers import (
    FixedPairing,
    RegistrationResult,
    SolverConfig,
    Termination,
    irls_register,
    kernel_register,
    rotation_only_register,
)
from .spatial import TargetIndex

MIN_SUBSET = 4


class SubsetStrategy(str, enum.Enum):
    GRAPH_NODES = "graph_nodes"
    FARTHEST_POINT_K = "farthest_point_k"


@dataclass(frozen=True)
class AlternationConfig:
    """``tre_threshold`` is in pixels.  ``subset_k=None`` means max(8, N // 20).
    ``subset_first`` swaps the order of the two solves in each alternation.
    ``precheck`` returns ``T0`` untouched when its median distance is already
    below the threshold; by default at least one alternation always runs."""

    tre_threshold: float = 2.0
    max_alternations: int = 20
    subset_strategy: SubsetStrategy = SubsetStrategy.GRAPH_NODES
    subset_k: int | None = None
    subset_first: bool = False
    precheck: bool = False

    def __post_init__(self):
        if not self.tre_threshold > 0:
            raise ConfigurationError("tre_threshold must be positive")
        if self.max_alternations < 1:
            raise ConfigurationError("max_alternations must be >= 1")
        if self.subset_k is not None and self.subset_k < MIN_SUBSET:
            raise ConfigurationError(f"subset size must be >= {MIN_SUBSET}")
        object.__setattr__(self, "subset_strategy", SubsetStrategy(self.subset_strategy))

    def k_for(self, n: int) -> int:
        return self.subset_k if self.subset_k is not None else max(8, n // 20)


@dataclass(frozen=True)
class AlternationRecord:
    alternation: int
    pose_subset: Pose
    pose_full: Pose
    tre_full: float
    tre_subset: float


@dataclass
class AlternationTrace:
    initial_tre: float = np.nan
    records: list[AlternationRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)


def farthest_point_sampling(points: np.ndarray, k: int) -> np.ndarray:
    """Greedy farthest-point order starting at row 0; ties go to the lowest index."""
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if k > n:
        raise ConfigurationError(f"cannot sample {k} of {n} points")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = 0
    d2 = ((pts - pts[0]) ** 2).sum(axis=1)
    for s in range(1, k):
        nxt = int(np.argmax(d2))
        chosen[s] = nxt
        np.minimum(d2, ((pts - pts[nxt]) ** 2).sum(axis=1), out=d2)
    return chosen


def select_subset(
    src: np.ndarray,
    labels: np.ndarray | None = None,
    strategy: SubsetStrategy | str = SubsetStrategy.GRAPH_NODES,
    k: int | None = None,
) -> np.ndarray:
    """Indices of the anchor subset.

    ``graph_nodes`` returns the rows labelled as nodes (label > 0) when there
    are at least 4 of them and falls back to farthest-point sampling
    otherwise.  Sources with fewer than 4 points are rejected.
    """
    src = np.asarray(src, dtype=float)
    n = len(src)
    if n < MIN_SUBSET:
        raise ConfigurationError(f"need at least {MIN_SUBSET} source points for a subset")
    strategy = SubsetStrategy(strategy)
    if strategy is SubsetStrategy.GRAPH_NODES and labels is not None:
        nodes = np.flatnonzero(np.asarray(labels) > 0)
        if len(nodes) >= MIN_SUBSET:
            return nodes
        k = MIN_SUBSET
    if k is None:
        k = max(8, n // 20)
    return np.sort(farthest_point_sampling(src, min(max(k, MIN_SUBSET), n)))


def _closest(pose, pts, index, camera):
    uv, depth = project_points(pose, pts, camera)
    ok = visible(depth)
    idx = np.full(len(pts), -1, dtype=np.int64)
    d2 = np.full(len(pts), np.inf)
    if ok.any():
        i, d = index.query(uv[ok], 1)
        idx[ok], d2[ok] = i[:, 0], d[:, 0]
    return idx, d2, ok


def median_tre(pose: Pose, pts: np.ndarray, index: TargetIndex, camera: CameraIntrinsics) -> float:
    """Median closest-target distance over the visible points (inf if none)."""
    _, d2, ok = _closest(pose, pts, index, camera)
    return float(np.median(np.sqrt(d2[ok]))) if ok.any() else np.inf


def dynaweight_register(
    src: np.ndarray,
    index: TargetIndex,
    camera: CameraIntrinsics,
    T0: Pose,
    kcfg: KernelConfig = KernelConfig(),
    scfg: SolverConfig = SolverConfig(),
    acfg: AlternationConfig = AlternationConfig(),
    labels: np.ndarray | None = None,
    subset: np.ndarray | None = None,
) -> tuple[RegistrationResult, AlternationTrace]:
    """Rotation-only start, then alternate full-set and subset kernel solves.

    ``subset`` overrides ``select_subset``.  Each solve starts from, and is
    anchored at, the pose the previous one returned.  The returned result
    carries the concatenated inner traces and the lowest-median-distance pose.
    """
    t_start = time.perf_counter()
    src = np.ascontiguousarray(src, dtype=float)
    if subset is None:
        subset = select_subset(src, labels, acfg.subset_strategy, acfg.k_for(len(src)))
    subset = np.asarray(subset, dtype=np.int64)
    if len(subset) < MIN_SUBSET:
        raise ConfigurationError(f"subset needs at least {MIN_SUBSET} points")
    sub_src = np.ascontiguousarray(src[subset])
    sub_kcfg = kcfg
    if kcfg.point_weights is not None:
        sub_kcfg = replace(kcfg, point_weights=np.asarray(kcfg.point_weights)[subset])

    result = RegistrationResult(pose=T0)
    trace = AlternationTrace()

    def finish(pose, termination):
        result.pose = pose
        result.termination = termination
        result.wall_time_ms = 1e3 * (time.perf_counter() - t_start)
        return result, trace

    xi0 = median_tre(T0, src, index, camera)
    trace.initial_tre = xi0
    if acfg.precheck and xi0 < acfg.tre_threshold:
        return finish(T0, Termination.CONVERGED)
    init = rotation_only_register(src, index, camera, T0, kcfg, scfg)
    result.trace.extend(init.trace)
    if init.termination is Termination.DEGENERATE:
        return finish(init.pose, Termination.DEGENERATE)
    pose = best_pose = init.pose
    best_xi = np.inf

    def full_solve(p):
        r = irls_register(src, index, camera, p, kcfg, scfg)
        result.trace.extend(r.trace)
        if r.termination is Termination.DEGENERATE:
            raise DegenerateGeometryError("full-set solve degenerated")
        return r.pose

    def subset_solve(p):
        # pairing rebuilt here, then frozen for the whole solve
        tgt, _, ok = _closest(p, sub_src, index, camera)
        if ok.sum() < MIN_SUBSET:
            return p
        pairing = FixedPairing(index.points, np.where(ok, tgt, 0))
        rows = np.flatnonzero(ok)
        k = sub_kcfg
        if len(rows) < len(sub_src):
            k = replace(sub_kcfg, point_weights=ok.astype(float) * sub_kcfg.weights_for(len(sub_src)))
        r = kernel_register(sub_src, pairing, camera, p, k, scfg)
        result.trace.extend(r.trace)
        if r.termination is Termination.DEGENERATE:
            return p
        return r.pose

    termination = Termination.MAX_ITERATIONS
    try:
        for a in range(acfg.max_alternations):
            if acfg.subset_first:
                pose_sub = subset_solve(pose)
                pose = pose_full = full_solve(pose_sub)
            else:
                pose_full = full_solve(pose)
                pose = pose_sub = subset_solve(pose_full)
            xi = median_tre(pose, src, index, camera)
            trace.records.append(
                AlternationRecord(a, pose_sub, pose_full, xi, median_tre(pose, sub_src, index, camera))
            )
            if xi < best_xi:
                best_pose, best_xi = pose, xi
            if xi < acfg.tre_threshold:
                termination = Termination.CONVERGED
                break
    except DegenerateGeometryError:
        termination = Termination.DEGENERATE
    return finish(best_pose, termination)
