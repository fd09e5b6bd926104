"""SE(3)/SO(3) operations and pinhole projection.

Twists are 6-vectors ordered ``[rho, phi]``: translational part first,
rotational part (axis-angle, radians) second.  Poses map world points into
the camera frame, ``x_cam = R @ p + t``.  Updates act on the left,
``T <- exp(delta) @ T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import BehindCameraError, ConfigurationError, CutLocusError

SMALL_ANGLE = 1e-8
# Series threshold for the Jacobian coefficients, whose closed forms cancel badly.
JACOBIAN_SERIES_ANGLE = 1e-3
CUT_LOCUS_MARGIN = 1e-6
DEPTH_EPSILON = 1e-6
RENORMALIZE_EVERY = 50


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector."""
    return _hat(np.asarray(v, dtype=float))


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]], dtype=float)


def nearest_rotation(m: np.ndarray) -> np.ndarray:
    """Orthogonal polar factor of ``m`` with determinant +1."""
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


# Small dense kernels.  Loops instead of ``@`` keep numba off BLAS, which
# is slower than plain code for 3x3 operands.


@numba.njit(cache=True)
def _hat(v):
    m = np.zeros((3, 3))
    m[0, 1], m[0, 2] = -v[2], v[1]
    m[1, 0], m[1, 2] = v[2], -v[0]
    m[2, 0], m[2, 1] = -v[1], v[0]
    return m


@numba.njit(cache=True)
def _mm(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for k in range(a.shape[1]):
            aik = a[i, k]
            for j in range(b.shape[1]):
                out[i, j] += aik * b[k, j]
    return out


@numba.njit(cache=True)
def _mv(a, v):
    out = np.zeros(a.shape[0])
    for i in range(a.shape[0]):
        for k in range(a.shape[1]):
            out[i] += a[i, k] * v[k]
    return out


@numba.njit(cache=True)
def _norm3(v):
    return np.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])


@numba.njit(cache=True)
def _poly(a, b, k):
    # I + a K + b K^2
    k2 = _mm(k, k)
    out = a * k + b * k2
    for i in range(3):
        out[i, i] += 1.0
    return out


@numba.njit(cache=True)
def _so3_exp(phi):
    theta = _norm3(phi)
    k = _hat(phi)
    if theta < SMALL_ANGLE:
        return _poly(1.0, 0.0, k)
    return _poly(np.sin(theta) / theta, (1.0 - np.cos(theta)) / (theta * theta), k)


@numba.njit(cache=True)
def _rotation_angle(r):
    wx = r[2, 1] - r[1, 2]
    wy = r[0, 2] - r[2, 0]
    wz = r[1, 0] - r[0, 1]
    s = 0.5 * np.sqrt(wx * wx + wy * wy + wz * wz)
    c = 0.5 * (r[0, 0] + r[1, 1] + r[2, 2] - 1.0)
    return np.arctan2(s, c)


@numba.njit(cache=True)
def _so3_log(r):
    # returns (phi, theta); the caller rejects the cut locus
    theta = _rotation_angle(r)
    w = np.empty(3)
    w[0] = r[2, 1] - r[1, 2]
    w[1] = r[0, 2] - r[2, 0]
    w[2] = r[1, 0] - r[0, 1]
    if theta < SMALL_ANGLE:
        return 0.5 * w, theta
    return theta / (2.0 * np.sin(theta)) * w, theta


@numba.njit(cache=True)
def _jacobian_coefficients(theta):
    if theta < JACOBIAN_SERIES_ANGLE:
        t2 = theta * theta
        return 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    return (1.0 - np.cos(theta)) / theta**2, (theta - np.sin(theta)) / theta**3


@numba.njit(cache=True)
def _so3_jl(phi):
    a, b = _jacobian_coefficients(_norm3(phi))
    return _poly(a, b, _hat(phi))


@numba.njit(cache=True)
def _so3_jl_inv(phi):
    theta = _norm3(phi)
    if theta < JACOBIAN_SERIES_ANGLE:
        c = 1.0 / 12.0 + theta**2 / 720.0
    else:
        c = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return _poly(-0.5, c, _hat(phi))


@numba.njit(cache=True)
def _se3_q(rho, phi):
    # Off-diagonal block of the SE(3) left Jacobian (Barfoot, eq. 7.86).
    theta = _norm3(phi)
    p, r = _hat(phi), _hat(rho)
    if theta < JACOBIAN_SERIES_ANGLE:
        t2 = theta * theta
        c1 = 1.0 / 6.0 - t2 / 120.0
        c2 = 1.0 / 24.0 - t2 / 720.0
        c3 = 1.0 / 120.0 - t2 / 2520.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        c1 = (theta - s) / theta**3
        c2 = (theta**2 + 2.0 * c - 2.0) / (2.0 * theta**4)
        c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * theta**5)
    pr = _mm(p, r)
    rp = _mm(r, p)
    prp = _mm(pr, p)
    return (
        0.5 * r
        + c1 * (pr + rp + prp)
        + c2 * (_mm(p, pr) + _mm(rp, p) - 3.0 * prp)
        + c3 * (_mm(prp, p) + _mm(p, prp))
    )


@numba.njit(cache=True)
def _se3_jl_inv(xi):
    rho, phi = xi[:3], xi[3:]
    jinv = _so3_jl_inv(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = jinv
    out[3:, 3:] = jinv
    out[:3, 3:] = -_mm(_mm(jinv, _se3_q(rho, phi)), jinv)
    return out


@numba.njit(cache=True)
def _se3_log(r, t):
    phi, theta = _so3_log(r)
    xi = np.empty(6)
    xi[:3] = _mv(_so3_jl_inv(phi), t)
    xi[3:] = phi
    return xi, theta


@numba.njit(cache=True)
def _relative_log(ra, ta, r, t):
    # log(A^-1 T) for A = (ra, ta), T = (r, t)
    rel_r = _mm(ra.T, r)
    rel_t = _mv(ra.T, t - ta)
    return _se3_log(rel_r, rel_t)


def _check_angle(theta: float) -> None:
    if theta >= np.pi - CUT_LOCUS_MARGIN:
        raise CutLocusError(f"rotation angle {theta:.12f} is at the cut locus")


def so3_exp(phi: np.ndarray) -> np.ndarray:
    return _so3_exp(np.asarray(phi, dtype=float).reshape(3))


def rotation_angle(r: np.ndarray) -> float:
    """Angle of a rotation matrix in [0, pi], robust near both ends."""
    return float(_rotation_angle(np.asarray(r, dtype=float)))


def so3_log(r: np.ndarray) -> np.ndarray:
    phi, theta = _so3_log(np.asarray(r, dtype=float))
    _check_angle(theta)
    return phi


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    return _so3_jl(np.asarray(phi, dtype=float).reshape(3))


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    return _so3_jl_inv(np.asarray(phi, dtype=float).reshape(3))


def se3_left_jacobian(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, phi = xi[:3], xi[3:]
    j = _so3_jl(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = j
    out[3:, 3:] = j
    out[:3, 3:] = _se3_q(rho, phi)
    return out


def se3_left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    return _se3_jl_inv(np.asarray(xi, dtype=float).reshape(6))


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> R x + t``.

    ``compositions`` counts products since the rotation was last projected
    back onto SO(3); every ``RENORMALIZE_EVERY`` products the rotation is
    re-orthonormalized to bound round-off drift.
    """

    rotation: np.ndarray
    translation: np.ndarray
    compositions: int = field(default=0, repr=False)

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> Pose:
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> Pose:
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation, self.compositions)

    def __matmul__(self, other: Pose) -> Pose:
        r = self.rotation @ other.rotation
        t = self.rotation @ other.translation + self.translation
        n = max(self.compositions, other.compositions) + 1
        if n >= RENORMALIZE_EVERY:
            r, n = nearest_rotation(r), 0
        return Pose(r, t, n)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) array (or a single 3-vector)."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def allclose(self, other: Pose, atol: float = 1e-9) -> bool:
        return np.allclose(self.matrix(), other.matrix(), rtol=0.0, atol=atol)


def exp_map(xi: np.ndarray) -> Pose:
    """Exact SE(3) exponential of a twist ``[rho, phi]``."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, phi = xi[:3], xi[3:]
    return Pose(_so3_exp(phi), _mv(_so3_jl(phi), rho))


def log_map(pose: Pose) -> np.ndarray:
    """Twist ``[rho, phi]`` with ``exp_map(log_map(T)) == T``.

    Raises CutLocusError when the rotation angle is within 1e-6 of pi.
    """
    xi, theta = _se3_log(pose.rotation, pose.translation)
    _check_angle(theta)
    return xi


def adjoint(pose: Pose) -> np.ndarray:
    """6x6 adjoint for ``[rho, phi]`` ordering: exp(Ad x) = T exp(x) T^-1."""
    r, t = pose.rotation, pose.translation
    out = np.zeros((6, 6))
    out[:3, :3] = r
    out[3:, 3:] = r
    out[:3, 3:] = hat(t) @ r
    return out


def se3_distance(a: Pose, b: Pose) -> float:
    """Squared norm of the relative twist ``log(a^-1 b)``."""
    xi = relative_log(a, b)
    return float(xi @ xi)


def relative_log(a: Pose, b: Pose) -> np.ndarray:
    """``log(a^-1 b)`` without forming the intermediate Pose."""
    xi, theta = _relative_log(a.rotation, a.translation, b.rotation, b.translation)
    _check_angle(theta)
    return xi


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: float
    height: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigurationError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ConfigurationError("optical center must lie inside the image")

    def contains(self, uv: np.ndarray) -> np.ndarray:
        uv = np.atleast_2d(uv)
        return (
            (uv[:, 0] >= 0)
            & (uv[:, 0] <= self.width)
            & (uv[:, 1] >= 0)
            & (uv[:, 1] <= self.height)
        )


def project(pose: Pose, p: np.ndarray, camera: CameraIntrinsics) -> np.ndarray:
    """Pixel coordinates of one point, given as a 3-vector or homogeneous 4-vector."""
    p = np.asarray(p, dtype=float).reshape(-1)
    if p.size == 4:
        if p[3] == 0:
            raise ConfigurationError("point at infinity")
        p = p[:3] / p[3]
    x = pose.apply(p)
    if x[2] <= DEPTH_EPSILON:
        raise BehindCameraError(f"depth {x[2]:.3g} is not in front of the camera")
    return np.array(
        [camera.fx * x[0] / x[2] + camera.cx, camera.fy * x[1] / x[2] + camera.cy]
    )


def project_points(
    pose: Pose, points: np.ndarray, camera: CameraIntrinsics
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of (N, 3) points.

    Returns ``(uv, depth)``.  Rows with ``depth <= DEPTH_EPSILON`` hold
    garbage in ``uv``; callers mask them with ``visible(depth)``.
    """
    x = pose.apply(points)
    z = x[:, 2]
    safe = np.where(z > DEPTH_EPSILON, z, 1.0)
    uv = np.empty((len(x), 2))
    uv[:, 0] = camera.fx * x[:, 0] / safe + camera.cx
    uv[:, 1] = camera.fy * x[:, 1] / safe + camera.cy
    return uv, z


def visible(depth: np.ndarray) -> np.ndarray:
    return depth > DEPTH_EPSILON


def projection_jacobian(
    cam_points: np.ndarray,
    camera: CameraIntrinsics,
    rotation_only: bool = False,
    lever: np.ndarray | None = None,
) -> np.ndarray:
    """d(pixel)/d(left twist) for points already in the camera frame.

    Shape (N, 2, 6).  With ``rotation_only`` only the three rotational
    columns are returned, (N, 2, 3).  ``lever`` is the vector the
    rotation acts on; it defaults to the camera-frame point, which is the
    full left update.  Rotation-only solves keep the translation fixed and
    pass ``R p`` instead.
    """
    x, y, z = cam_points[:, 0], cam_points[:, 1], cam_points[:, 2]
    iz = 1.0 / z
    n = len(cam_points)
    dpi = np.zeros((n, 2, 3))
    dpi[:, 0, 0] = camera.fx * iz
    dpi[:, 0, 2] = -camera.fx * x * iz * iz
    dpi[:, 1, 1] = camera.fy * iz
    dpi[:, 1, 2] = -camera.fy * y * iz * iz
    a = cam_points if lever is None else lever
    # d(exp(delta) a)/d(phi) = -a^
    neg_hat = np.zeros((n, 3, 3))
    neg_hat[:, 0, 1], neg_hat[:, 0, 2] = a[:, 2], -a[:, 1]
    neg_hat[:, 1, 0], neg_hat[:, 1, 2] = -a[:, 2], a[:, 0]
    neg_hat[:, 2, 0], neg_hat[:, 2, 1] = a[:, 1], -a[:, 0]
    rot = np.einsum("nij,njk->nik", dpi, neg_hat)
    if rotation_only:
        return rot
    return np.concatenate([dpi, rot], axis=2)
