"""Euclidean, Huber and Gaussian-kernel (RKHS) energies, IRLS weights and the
coarse-to-fine bandwidth schedule.

The kernel double sum over all targets is truncated to the ``max_neighbors``
nearest targets within ``radius_factor * ell`` of each projected point.  A
point with no target in that radius keeps its single nearest neighbor so that
every visible point contributes a strictly positive weight.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError
from .liegeo import CameraIntrinsics, Pose, project_points, se3_distance, visible
from .spatial import CorrespondenceSet, TargetIndex


@dataclass(frozen=True)
class KernelConfig:
    """Gaussian-kernel settings.

    ``ell`` is the current bandwidth in pixels; ``None`` means it will be
    set from the initial pairing distances by ``update_scale``.  ``lam``
    weighs the pose prior against the kernel sum (see ``prior_weight``).

    The experiment hyperparameters quoted with the original method
    (100, 1, 0.1, 10, 1) have no documented binding to any term used here
    and are not exposed.
    """

    ell: float | None = None
    lam: float = 1.0
    shrink_period: int = 5
    ell_floor: float = 0.5
    point_weights: np.ndarray | None = None
    max_neighbors: int = 8
    radius_factor: float = 3.0
    prior_scaling: str = "kernel"

    def __post_init__(self):
        if self.ell is not None and self.ell <= 0:
            raise ConfigurationError("ell must be positive")
        if self.ell_floor <= 0:
            raise ConfigurationError("ell_floor must be positive")
        if self.lam < 0:
            raise ConfigurationError("lambda must be non-negative")
        if self.shrink_period < 1 or self.max_neighbors < 1:
            raise ConfigurationError("shrink_period and max_neighbors must be >= 1")
        if self.radius_factor <= 0:
            raise ConfigurationError("radius_factor must be positive")
        if self.prior_scaling not in ("kernel", "literal"):
            raise ConfigurationError("prior_scaling must be 'kernel' or 'literal'")

    def prior_weight(self, ell: float) -> float:
        """Weight of the pose prior inside the reweighted least-squares step.

        The frozen-weight LS gradient equals -2 ell**2 times the kernel-sum
        gradient, so ``2 ell**2 lam`` makes the step descend
        ``-(e_data - lam * e_init)`` at every bandwidth ("kernel").  With
        "literal" the prior weight is ``lam`` regardless of ell.
        """
        if self.prior_scaling == "kernel":
            return 2.0 * ell * ell * self.lam
        return self.lam

    def weights_for(self, n: int) -> np.ndarray:
        if self.point_weights is None:
            return np.ones(n)
        w = np.asarray(self.point_weights, dtype=float)
        if w.shape != (n,):
            raise ConfigurationError(f"expected {n} point weights, got {w.shape}")
        return w

    def require_ell(self) -> float:
        if self.ell is None:
            raise ConfigurationError("kernel bandwidth not initialized; call update_scale")
        return self.ell


@dataclass(frozen=True)
class EnergyBreakdown:
    e_data: float
    e_init: float
    weighted_ls: float


def update_scale(
    cfg: KernelConfig,
    iteration: int,
    initial_distances: np.ndarray,
    extra_halvings: int = 0,
) -> KernelConfig:
    """Bandwidth for ``iteration``.

    ``initial_distances`` are squared pixel distances at the start pose; the
    starting bandwidth is the largest distance (ell**2 = max squared
    distance), halved every ``shrink_period`` iterations plus
    ``extra_halvings`` forced shrinks, never below ``ell_floor``.
    """
    if iteration < 0:
        raise ConfigurationError("iteration must be >= 0")
    d2 = np.asarray(initial_distances, dtype=float).ravel()
    if d2.size == 0:
        raise ConfigurationError("no distances to initialize the scale from")
    ell0 = float(np.sqrt(np.max(d2)))
    return replace(cfg, ell=scale_at(ell0, iteration, cfg.shrink_period, cfg.ell_floor, extra_halvings))


def scale_at(ell0: float, iteration: int, period: int, floor: float, extra_halvings: int = 0) -> float:
    return max(floor, ell0 * 0.5 ** (iteration // period + extra_halvings))


def truncation_mask(idx: np.ndarray, d2: np.ndarray, ell: float, radius_factor: float) -> np.ndarray:
    """Which of the k-nearest candidates enter the kernel sum."""
    present = idx >= 0
    mask = present & (d2 <= (radius_factor * ell) ** 2)
    mask[:, 0] = present[:, 0]
    return mask


def kernel_values(d2: np.ndarray, ell: float, mask: np.ndarray | None = None) -> np.ndarray:
    k = np.exp(-np.where(np.isfinite(d2), d2, 0.0) / (2.0 * ell * ell))
    if mask is not None:
        k = np.where(mask, k, 0.0)
    return k


def kernel_sum(kern: np.ndarray, point_weights: np.ndarray) -> float:
    # fixed order: per-point inner sum, then ascending source index
    return float(point_weights @ kern.sum(axis=1))


def neighbor_table(
    index: TargetIndex, uv: np.ndarray, valid: np.ndarray, k: int
) -> tuple[np.ndarray, np.ndarray]:
    """(n, k) nearest-target table; rows of invalid points hold -1 / inf."""
    idx = np.full((len(uv), k), -1, dtype=np.int64)
    d2 = np.full((len(uv), k), np.inf)
    rows = np.flatnonzero(valid)
    if len(rows):
        i, d = index.query(uv[rows], k)
        idx[rows], d2[rows] = i, d
    return idx, d2


@dataclass(frozen=True)
class IrlsWeights:
    """Frozen kernel weights at the linearization pose.

    ``target`` and ``weight`` are (n, m); masked slots have weight 0 and
    target -1.  ``weight`` already includes the per-point weights.
    """

    target: np.ndarray
    weight: np.ndarray
    ell: float


def irls_weights(
    pose: Pose,
    src: np.ndarray,
    index: TargetIndex,
    camera: CameraIntrinsics,
    cfg: KernelConfig,
) -> IrlsWeights:
    ell = cfg.require_ell()
    uv, depth = project_points(pose, src, camera)
    idx, d2 = neighbor_table(index, uv, visible(depth), cfg.max_neighbors)
    mask = truncation_mask(idx, d2, ell, cfg.radius_factor)
    w = kernel_values(d2, ell, mask) * cfg.weights_for(len(src))[:, None]
    return IrlsWeights(np.where(mask, idx, -1), w, ell)


def weighted_ls_value(
    pose: Pose,
    src: np.ndarray,
    targets: np.ndarray,
    weights: IrlsWeights,
    camera: CameraIntrinsics,
) -> float:
    """Frozen-weight objective sum_ij w_ij |pi(T p_i) - q_j|^2 (no prior)."""
    uv, depth = project_points(pose, src, camera)
    q = targets[np.maximum(weights.target, 0)]
    r2 = ((uv[:, None, :] - q) ** 2).sum(axis=2)
    return float((weights.weight * np.where(weights.target >= 0, r2, 0.0)).sum())


def rkhs_energy(
    pose: Pose,
    src: np.ndarray,
    index: TargetIndex,
    camera: CameraIntrinsics,
    cfg: KernelConfig,
    prior: Pose | None = None,
) -> EnergyBreakdown:
    """Truncated kernel sum, prior distance to ``prior`` and the
    self-weighted least-squares value at ``pose``."""
    ell = cfg.require_ell()
    uv, depth = project_points(pose, src, camera)
    idx, d2 = neighbor_table(index, uv, visible(depth), cfg.max_neighbors)
    mask = truncation_mask(idx, d2, ell, cfg.radius_factor)
    kern = kernel_values(d2, ell, mask)
    pw = cfg.weights_for(len(src))
    e_data = kernel_sum(kern, pw)
    wls = float(pw @ (kern * np.where(mask, d2, 0.0)).sum(axis=1))
    e_init = 0.0 if prior is None else se3_distance(prior, pose)
    return EnergyBreakdown(e_data, e_init, wls)


def full_kernel_sum(
    pose: Pose, src: np.ndarray, targets: np.ndarray, camera: CameraIntrinsics, ell: float
) -> float:
    """Untruncated double sum over every (source, target) pair.  Test oracle."""
    uv, depth = project_points(pose, src, camera)
    uv = uv[visible(depth)]
    total = 0.0
    for p in uv:
        d2 = ((targets - p) ** 2).sum(axis=1)
        total += float(np.exp(-d2 / (2 * ell * ell)).sum())
    return total


def euclidean_energy(
    pose: Pose,
    corr: CorrespondenceSet,
    src: np.ndarray,
    tgt: np.ndarray,
    camera: CameraIntrinsics,
) -> float:
    """Sum of squared pixel distances to the paired targets; excluded points add 0."""
    uv, _ = project_points(pose, src[corr.source], camera)
    r = uv - np.asarray(tgt)[corr.target]
    return float((r * r).sum())


def huber_rho(r: np.ndarray, delta: float) -> np.ndarray:
    """Huber penalty on residual norms, equal to r**2 inside ``delta``."""
    r = np.abs(r)
    return np.where(r <= delta, r * r, 2.0 * delta * r - delta * delta)


def huber_weights(r: np.ndarray, delta: float) -> np.ndarray:
    r = np.abs(r)
    return np.where(r <= delta, 1.0, delta / np.maximum(r, 1e-300))


def huber_energy(
    pose: Pose,
    corr: CorrespondenceSet,
    src: np.ndarray,
    tgt: np.ndarray,
    camera: CameraIntrinsics,
    delta: float = 5.0,
) -> float:
    uv, _ = project_points(pose, src[corr.source], camera)
    r = np.linalg.norm(uv - np.asarray(tgt)[corr.target], axis=1)
    return float(huber_rho(r, delta).sum())
