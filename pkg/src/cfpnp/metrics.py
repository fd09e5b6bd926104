"""Evaluation metrics: projection residual, gross failure rate, TRE, pose error."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigurationError
from .liegeo import CameraIntrinsics, Pose, project_points, rotation_angle, visible
from .spatial import CorrespondenceSet, TargetIndex


@dataclass(frozen=True)
class MetricsReport:
    mean_pr: float
    median_pr: float
    pr_p75: float
    pr_p95: float
    gfr: float
    median_tre: float
    angular_error: float
    translational_error: float
    runtime_ms: float

    def to_dict(self) -> dict:
        return asdict(self)


def projection_residual(
    pose: Pose,
    src: np.ndarray,
    mode: str,
    reference,
    camera: CameraIntrinsics,
) -> float:
    """Root-mean-square pixel residual of the projected source.

    ``mode="known"``: ``reference`` is an (N, 2) array of true pixel
    positions, row-aligned with ``src``.  ``mode="closest"``: ``reference``
    is a TargetIndex and each point is compared with its nearest target.
    Points behind the camera are skipped.
    """
    src = np.asarray(src, dtype=float)
    if len(src) == 0:
        raise ConfigurationError("empty source set")
    uv, depth = project_points(pose, src, camera)
    ok = visible(depth)
    if mode == "known":
        ref = np.asarray(reference, dtype=float)
        d2 = ((uv[ok] - ref[ok]) ** 2).sum(axis=1)
    elif mode == "closest":
        _, d2 = reference.query(uv[ok], 1)
        d2 = d2[:, 0]
    else:
        raise ConfigurationError(f"unknown correspondence mode {mode!r}")
    if len(d2) == 0:
        raise ConfigurationError("no visible source point")
    return float(np.sqrt(d2.mean()))


def per_point_residuals(pose, src, mode, reference, camera) -> np.ndarray:
    uv, depth = project_points(pose, np.asarray(src, dtype=float), camera)
    ok = visible(depth)
    if mode == "known":
        return np.linalg.norm(uv[ok] - np.asarray(reference)[ok], axis=1)
    _, d2 = reference.query(uv[ok], 1)
    return np.sqrt(d2[:, 0])


def gross_failure_rate(prs, threshold: float = 5.0) -> float:
    """Fraction of trials whose PR is strictly above ``threshold``."""
    prs = np.asarray(prs, dtype=float)
    if prs.size == 0:
        raise ConfigurationError("no PR values")
    if threshold <= 0:
        raise ConfigurationError("threshold must be positive")
    return float(np.count_nonzero(prs > threshold) / prs.size)


def pose_difference(a: Pose, b: Pose) -> tuple[float, float]:
    """(rotation angle of R_a R_b^T in degrees, |t_a - t_b|)."""
    angle = np.degrees(rotation_angle(a.rotation @ b.rotation.T))
    return float(angle), float(np.linalg.norm(a.translation - b.translation))


def median_tre(corr: CorrespondenceSet) -> float:
    if len(corr) == 0:
        raise ConfigurationError("empty correspondence set")
    return float(np.median(np.sqrt(corr.d2)))


def known_pair_tre(pose: Pose, src, truth_uv, camera) -> float:
    """Median distance to the true pixel of each source point (simulation)."""
    return float(np.median(per_point_residuals(pose, src, "known", truth_uv, camera)))


def report(
    pose: Pose,
    src: np.ndarray,
    camera: CameraIntrinsics,
    index: TargetIndex,
    truth: Pose | None = None,
    truth_uv: np.ndarray | None = None,
    runtime_ms: float = 0.0,
    gfr_threshold: float = 5.0,
) -> MetricsReport:
    """Single-registration report.  PR percentiles are over per-point residuals;
    GFR is 1.0 if the run's PR exceeds ``gfr_threshold`` and 0.0 otherwise."""
    if truth_uv is not None:
        mode, ref = "known", truth_uv
    else:
        mode, ref = "closest", index
    if truth is not None:
        ang, dist = pose_difference(pose, truth)
    else:
        ang, dist = np.nan, np.nan
    res = per_point_residuals(pose, src, mode, ref, camera)
    if res.size == 0:
        # nothing in front of the camera: no residuals, counted as a gross failure
        return MetricsReport(np.nan, np.nan, np.nan, np.nan, 1.0, np.nan, ang, dist, runtime_ms)
    pr = float(np.sqrt(np.mean(res**2)))
    uv, depth = project_points(pose, src, camera)
    _, d2 = index.query(uv[visible(depth)], 1)
    tre = float(np.median(np.sqrt(d2[:, 0])))
    return MetricsReport(
        mean_pr=pr,
        median_pr=float(np.median(res)),
        pr_p75=float(np.percentile(res, 75)),
        pr_p95=float(np.percentile(res, 95)),
        gfr=gross_failure_rate([pr], gfr_threshold),
        median_tre=tre,
        angular_error=ang,
        translational_error=dist,
        runtime_ms=runtime_ms,
    )
