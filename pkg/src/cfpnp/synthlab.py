"""Synthetic scenes: the edge-on square toy model, branching vessel-like trees,
pose disturbances, leaf pruning and the rotation/translation duality demo."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, PreconditionError
from .liegeo import CameraIntrinsics, Pose, exp_map, project_points, so3_exp

SQUARE_CORNERS = np.array(
    [[5.0, 0.0, 10.0], [10.0, 0.0, 10.0], [10.0, 0.0, 15.0], [5.0, 0.0, 15.0]]
)
SQUARE_CAMERA = CameraIntrinsics(520.0, 520.0, 512.0, 512.0, 1024.0, 1024.0)
TREE_CAMERA = CameraIntrinsics(1500.0, 1500.0, 512.0, 512.0, 1024.0, 1024.0)

NODE_LABEL = 1


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    """Source points, ground-truth pose and the 2D targets they produce.

    ``target_source[j]`` is the source row whose projection is target j,
    which gives the known pairing used by simulation metrics.
    ``segment_ids`` / ``leaf_segments`` describe the tree structure (empty
    for scenes without one).
    """

    source3d: np.ndarray
    ground_truth_pose: Pose
    targets2d: np.ndarray
    camera: CameraIntrinsics
    rng_seed: int | None = None
    labels: np.ndarray | None = None
    target_source: np.ndarray | None = None
    segment_ids: np.ndarray | None = None
    leaf_segments: tuple[int, ...] = ()
    meta: dict = field(default_factory=dict)

    @property
    def node_indices(self) -> np.ndarray:
        if self.labels is None:
            return np.empty(0, dtype=np.int64)
        return np.flatnonzero(self.labels == NODE_LABEL)

    def truth_uv(self) -> np.ndarray:
        return project_points(self.ground_truth_pose, self.source3d, self.camera)[0]


def _scene_from_source(source, pose, camera, seed, labels, segment_ids=None, leaves=(), meta=None):
    uv, depth = project_points(pose, source, camera)
    if np.any(depth <= 0):
        raise ConfigurationError("ground-truth pose puts points behind the camera")
    return SyntheticScene(
        source3d=source,
        ground_truth_pose=pose,
        targets2d=uv,
        camera=camera,
        rng_seed=seed,
        labels=labels,
        target_source=np.arange(len(source)),
        segment_ids=segment_ids,
        leaf_segments=tuple(leaves),
        meta=meta or {},
    )


def make_square_scene(edge_point_count: int) -> SyntheticScene:
    """Perimeter of the edge-on square, ``edge_point_count`` points in total.

    Each edge is cut into ``edge_point_count / 4`` equal intervals, so the
    corners are always included; corners carry the node label.
    """
    n = int(edge_point_count)
    if n < 4 or n % 4:
        raise ConfigurationError("edge_point_count must be a multiple of 4, at least 4")
    per_edge = n // 4
    pts, labels = [], []
    for e in range(4):
        a, b = SQUARE_CORNERS[e], SQUARE_CORNERS[(e + 1) % 4]
        for s in range(per_edge):
            pts.append(a + (b - a) * s / per_edge)
            labels.append(NODE_LABEL if s == 0 else 0)
    return _scene_from_source(
        np.array(pts), Pose.identity(), SQUARE_CAMERA, None, np.array(labels)
    )


def min_depth_ratio(points: np.ndarray) -> float:
    """Smallest z / max(|x|, |y|) over the set (inf for on-axis points)."""
    p = np.asarray(points, dtype=float)
    lateral = np.maximum(np.abs(p[:, 0]), np.abs(p[:, 1]))
    with np.errstate(divide="ignore"):
        return float(np.min(np.where(lateral > 0, p[:, 2] / lateral, np.inf)))


def shift_to_depth_ratio(points: np.ndarray, ratio: float) -> np.ndarray:
    """Translate along z so that ``min_depth_ratio`` equals ``ratio``."""
    p = np.array(points, dtype=float)
    lateral = np.maximum(np.abs(p[:, 0]), np.abs(p[:, 1]))
    p[:, 2] += np.max(ratio * lateral - p[:, 2])
    return p


# ---------------------------------------------------------------- trees


def _bezier(ctrl: np.ndarray, s: np.ndarray) -> np.ndarray:
    s = s[:, None]
    return (
        (1 - s) ** 3 * ctrl[0]
        + 3 * (1 - s) ** 2 * s * ctrl[1]
        + 3 * (1 - s) * s**2 * ctrl[2]
        + s**3 * ctrl[3]
    )


def _unit(v):
    return v / np.linalg.norm(v)


def _grow(rng, start, direction, length, leaves, level, segments, parent):
    """Append cubic segments of a binary subtree with ``leaves`` leaves."""
    end = start + direction * length
    bend = rng.normal(scale=0.25 * length, size=3)
    bend[2] *= 0.5
    ctrl = np.array(
        [start, start + direction * length / 3 + bend, end - direction * length / 3 + bend / 2, end]
    )
    seg = len(segments)
    segments.append({"ctrl": ctrl, "parent": parent, "children": []})
    if parent >= 0:
        segments[parent]["children"].append(seg)
    if leaves == 1:
        return
    left = int(rng.integers(1, leaves))
    spread = rng.uniform(0.35, 0.8)
    for sign, n_leaves in ((+1, left), (-1, leaves - left)):
        c, s = np.cos(sign * spread), np.sin(sign * spread)
        d = np.array([c * direction[0] - s * direction[1], s * direction[0] + c * direction[1], 0.0])
        d[2] = rng.normal(scale=0.4)
        _grow(rng, end, _unit(d), length * rng.uniform(0.6, 0.85), n_leaves, level + 1, segments, seg)


def make_tree_scene(
    branches: int = 8,
    depth_range: tuple[float, float] = (380.0, 420.0),
    seed: int = 0,
    n_points: int = 2000,
    camera: CameraIntrinsics = TREE_CAMERA,
    lateral_half_extent: float = 60.0,
) -> SyntheticScene:
    """Random binary tree of cubic Bezier segments with ``branches`` leaves.

    World coordinates are centered on the tree; the ground-truth pose
    rotates the tree randomly about the viewing axis and places it so that
    camera depths span ``depth_range``.  Bifurcation points carry the node
    label; there are ``branches - 1`` of them.
    """
    if branches < 2:
        raise ConfigurationError("a tree needs at least 2 branches")
    if not (1500 <= n_points <= 3000):
        raise ConfigurationError("n_points must lie in [1500, 3000]")
    near, far = depth_range
    if not (0 < near < far):
        raise ConfigurationError("depth_range must satisfy 0 < near < far")
    rng = np.random.default_rng(seed)
    segments: list[dict] = []
    _grow(rng, np.zeros(3), np.array([0.0, 1.0, 0.0]), 1.0, branches, 0, segments, -1)

    # dense sampling to measure arc length, then resample to n_points overall
    fine = np.linspace(0.0, 1.0, 400)
    lengths = []
    for seg in segments:
        c = _bezier(seg["ctrl"], fine)
        lengths.append(float(np.linalg.norm(np.diff(c, axis=0), axis=1).sum()))
    total = sum(lengths)
    budget = n_points - 1  # the root start point is added separately
    counts = [max(2, int(round(budget * L / total))) for L in lengths]
    counts[int(np.argmax(lengths))] += budget - sum(counts)

    pts = [segments[0]["ctrl"][0]]
    labels = [0]
    seg_ids = [0]
    for k, (seg, cnt) in enumerate(zip(segments, counts)):
        c = _bezier(seg["ctrl"], fine)
        arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(c, axis=0), axis=1))])
        s = np.interp(np.linspace(0, arc[-1], cnt + 1)[1:], arc, fine)
        p = _bezier(seg["ctrl"], s)
        pts.extend(p)
        lab = [0] * cnt
        if seg["children"]:
            lab[-1] = NODE_LABEL  # segment end is the bifurcation
        labels.extend(lab)
        seg_ids.extend([k] * cnt)
    pts = np.array(pts)
    pts -= pts.mean(axis=0)

    # scale laterally, squash depth into the requested range
    lat = np.max(np.abs(pts[:, :2]))
    pts[:, :2] *= lateral_half_extent / lat
    zspan = np.ptp(pts[:, 2])
    pts[:, 2] = (pts[:, 2] - pts[:, 2].min()) / max(zspan, 1e-12) * (far - near) - (far - near) / 2

    roll = rng.uniform(-np.pi, np.pi)
    gt = Pose(so3_exp(np.array([0.0, 0.0, roll])), np.array([0.0, 0.0, (near + far) / 2]))
    leaves = [k for k, seg in enumerate(segments) if not seg["children"]]
    scene = _scene_from_source(
        pts,
        gt,
        camera,
        seed,
        np.array(labels),
        np.array(seg_ids),
        leaves,
        meta={"branches": branches, "segment_parents": [s["parent"] for s in segments]},
    )
    return scene


def prune_branches(scene: SyntheticScene, leaf_count: int, seed: int = 0) -> SyntheticScene:
    """Drop the 2D targets of ``leaf_count`` random leaf segments; the 3D source is kept."""
    if leaf_count == 0:
        return scene
    if scene.segment_ids is None or not scene.leaf_segments:
        raise ConfigurationError("scene has no tree structure to prune")
    if leaf_count < 0 or leaf_count >= len(scene.leaf_segments):
        raise ConfigurationError(
            f"cannot prune {leaf_count} of {len(scene.leaf_segments)} leaves"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(np.array(scene.leaf_segments), size=leaf_count, replace=False)
    src_of_target = scene.target_source
    keep = ~np.isin(scene.segment_ids[src_of_target], chosen)
    meta = dict(scene.meta, pruned_leaves=sorted(int(c) for c in chosen))
    return replace(
        scene,
        targets2d=scene.targets2d[keep],
        target_source=src_of_target[keep],
        meta=meta,
    )


# ---------------------------------------------------------------- disturbances


@dataclass(frozen=True)
class DisturbanceSpec:
    sigma_translation: float
    sigma_angle: float  # degrees
    trials: int = 1

    def __post_init__(self):
        if self.sigma_translation < 0 or self.sigma_angle < 0:
            raise ConfigurationError("disturbance sigmas must be non-negative")


def disturbance_twist(spec: DisturbanceSpec, rng: np.random.Generator) -> np.ndarray:
    rho = rng.normal(scale=1.0, size=3) * spec.sigma_translation
    phi = rng.normal(scale=1.0, size=3) * np.radians(spec.sigma_angle)
    return np.concatenate([rho, phi])


def perturb_pose(truth: Pose, spec: DisturbanceSpec, seed, frame: str = "object") -> Pose:
    """Disturb ``truth`` with an isotropic Gaussian ``delta = (rho, phi)``.

    ``frame="object"``: ``(exp(phi) R, t + rho)``, i.e. sensor-frame axes
    with the rotation taken about the model origin, so the translation
    offset is exactly ``rho``.  ``frame="sensor"``: ``exp(delta) @ truth``,
    rotating about the camera center.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    delta = disturbance_twist(spec, rng)
    if frame == "sensor":
        return exp_map(delta) @ truth
    if frame != "object":
        raise ConfigurationError(f"unknown disturbance frame {frame!r}")
    return Pose(so3_exp(delta[3:]) @ truth.rotation, truth.translation + delta[:3])


def ball_twist(radius: float, rng: np.random.Generator) -> np.ndarray:
    """Twist drawn uniformly from the radius-``radius`` ball in R^6."""
    d = rng.normal(size=6)
    d /= np.linalg.norm(d)
    return d * radius * rng.uniform() ** (1.0 / 6.0)


# ---------------------------------------------------------------- duality demo


@dataclass(frozen=True)
class AmbiguityReport:
    phi: np.ndarray
    residuals: np.ndarray
    displacements: np.ndarray
    ratios: np.ndarray
    depth_ratio: float

    @property
    def mean_ratio(self) -> float:
        return float(self.ratios.mean())

    @property
    def mean_residual(self) -> float:
        return float(self.residuals.mean())


def golden_section(f, lo: float, hi: float, tol: float = 1e-10, max_iter: int = 200) -> float:
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a < tol:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def ambiguity_demo(
    points: np.ndarray,
    t: np.ndarray,
    camera: CameraIntrinsics,
    min_ratio: float = 5.0,
    phi3_bounds: tuple[float, float] = (-0.2, 0.2),
) -> AmbiguityReport:
    """Compare a pure translation ``t`` with its small-rotation dual.

    The dual rotation uses phi_1 = -t_y / (z + t_z), phi_2 = t_x / (z + t_z)
    with z the mean depth of the set, and phi_3 found by golden-section
    search to minimize the summed pixel gap.  Ratios are gap over the
    translation-induced displacement, per point.
    """
    p = np.asarray(points, dtype=float)
    t = np.asarray(t, dtype=float).reshape(3)
    ratio = min_depth_ratio(p)
    if ratio < min_ratio:
        raise PreconditionError(f"depth ratio {ratio:.3g} below required {min_ratio}")
    ident = Pose.identity()
    q_id, _ = project_points(ident, p, camera)
    q_t, _ = project_points(Pose(np.eye(3), t), p, camera)
    zbar = float(p[:, 2].mean())
    phi1 = -t[1] / (zbar + t[2])  # y shifts by -phi_1 z under I + phi^
    phi2 = t[0] / (zbar + t[2])

    def q_rot(phi3):
        r = so3_exp(np.array([phi1, phi2, phi3]))
        return project_points(Pose(r, np.zeros(3)), p, camera)[0]

    def gap(phi3):
        return float(np.linalg.norm(q_rot(phi3) - q_t, axis=1).sum())

    phi3 = 0.0 if not np.any(t) else golden_section(gap, *phi3_bounds)
    res = np.linalg.norm(q_rot(phi3) - q_t, axis=1)
    disp = np.linalg.norm(q_t - q_id, axis=1)
    ratios = np.divide(res, disp, out=np.zeros_like(res), where=disp > 0)
    return AmbiguityReport(np.array([phi1, phi2, phi3]), res, disp, ratios, ratio)
