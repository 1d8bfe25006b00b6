"""Rigid-body geometry on SE(3): group operations, tangent-space maps,
adjoint covariance transport, and pinhole projection.

Conventions
-----------
A pose ``(R, t)`` maps child-frame coordinates into the parent frame:
``p_parent = R @ p_child + t``.  Twists are ordered ``[rho, phi]`` with
``rho`` the translational part (meters) and ``phi`` the rotation vector
(radians).  Perturbations are applied on the right: ``T * exp(xi)``.

All lower-level array functions (``so3_*``, ``se3_*``) broadcast over
leading batch dimensions and are the workhorses for the tracker and the
graph backend; the ``Pose``-level functions wrap them for single
transforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_EYE3 = np.eye(3)

# Below this angle the closed-form sin/cos coefficients are replaced by
# their series expansions (error O(theta^4) ~ 1e-24 at the threshold).
_SMALL_ANGLE = 1e-6


class BehindCameraError(ValueError):
    """Point cannot be projected: it lies at or behind the camera plane."""


def so3_hat(phi: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector, batched over leading dims."""
    phi = np.asarray(phi, dtype=float)
    out = np.zeros(phi.shape[:-1] + (3, 3))
    x, y, z = phi[..., 0], phi[..., 1], phi[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def so3_vee(m: np.ndarray) -> np.ndarray:
    """Inverse of :func:`so3_hat`."""
    m = np.asarray(m, dtype=float)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def _sinc_coeffs(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rodrigues coefficients a = sin(t)/t and b = (1-cos(t))/t^2."""
    t2 = theta * theta
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    return a, b


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rotation matrix of a rotation vector (Rodrigues), batched."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    a, b = _sinc_coeffs(theta)
    k = so3_hat(phi)
    k2 = k @ k
    return _EYE3 + a[..., None, None] * k + b[..., None, None] * k2


def so3_log(rot: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix, batched.

    Rejects rotations with angle >= pi - 1e-6: the axis becomes
    ill-conditioned there and downstream gating would silently degrade.
    """
    rot = np.asarray(rot, dtype=float)
    trace = rot[..., 0, 0] + rot[..., 1, 1] + rot[..., 2, 2]
    cos_theta = np.clip((trace - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if np.any(theta >= np.pi - 1e-6):
        raise ValueError("rotation angle too close to pi for a stable log")
    w = so3_vee(rot - np.swapaxes(rot, -1, -2)) / 2.0  # sin(theta) * axis
    t2 = theta * theta
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    scale = np.where(small, 1.0 + t2 / 6.0, safe / np.sin(safe))
    return scale[..., None] * w


def rotation_axis_angle(rot: np.ndarray) -> tuple[np.ndarray, float]:
    """(unit axis, angle) of a single rotation matrix, valid on all of SO(3).

    Unlike :func:`so3_log` this handles the angle-pi neighborhood and is
    meant for serialization, not for optimization residuals.
    """
    rot = np.asarray(rot, dtype=float)
    trace = float(np.trace(rot))
    cos_theta = np.clip((trace - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(cos_theta))
    if theta < _SMALL_ANGLE:
        return np.array([0.0, 0.0, 1.0]), 0.0
    if np.pi - theta > 1e-6:
        axis = so3_vee(rot - rot.T) / (2.0 * np.sin(theta))
        return axis / np.linalg.norm(axis), theta
    # Near pi: R ~ I + 2*axis*axis^T - ... ; recover axis from the largest
    # diagonal entry of (R + I) / 2.
    m = (rot + _EYE3) / 2.0
    i = int(np.argmax(np.diagonal(m)))
    axis = m[:, i] / np.sqrt(max(m[i, i], 1e-12))
    axis = axis / np.linalg.norm(axis)
    return axis, theta


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    """Left Jacobian of SO(3), batched (the V matrix of the SE(3) exp)."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    t2 = theta * theta
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0, (safe - np.sin(safe)) / (safe ** 3))
    k = so3_hat(phi)
    return _EYE3 + b[..., None, None] * k + c[..., None, None] * (k @ k)


def so3_left_jacobian_inverse(phi: np.ndarray) -> np.ndarray:
    """Inverse of :func:`so3_left_jacobian`, batched."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    t2 = theta * theta
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    d = np.where(
        small,
        1.0 / 12.0 + t2 / 720.0,
        1.0 / (safe * safe) - (1.0 + np.cos(safe)) / (2.0 * safe * np.sin(safe)),
    )
    k = so3_hat(phi)
    return _EYE3 - 0.5 * k + d[..., None, None] * (k @ k)


def se3_exp(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map a twist (..., 6) to (rotation (..., 3, 3), translation (..., 3))."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[..., :3], xi[..., 3:]
    rot = so3_exp(phi)
    trans = np.einsum("...ij,...j->...i", so3_left_jacobian(phi), rho)
    return rot, trans


def se3_log(rot: np.ndarray, trans: np.ndarray) -> np.ndarray:
    """Inverse of :func:`se3_exp`, batched; same domain limits as so3_log."""
    phi = so3_log(rot)
    rho = np.einsum("...ij,...j->...i", so3_left_jacobian_inverse(phi), np.asarray(trans, dtype=float))
    return np.concatenate([rho, phi], axis=-1)


def se3_adjoint(rot: np.ndarray, trans: np.ndarray) -> np.ndarray:
    """Adjoint matrix (..., 6, 6) satisfying T exp(xi) T^-1 = exp(Ad xi)."""
    rot = np.asarray(rot, dtype=float)
    out = np.zeros(rot.shape[:-2] + (6, 6))
    out[..., :3, :3] = rot
    out[..., :3, 3:] = so3_hat(trans) @ rot
    out[..., 3:, 3:] = rot
    return out


def _se3_q_matrix(rho: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Translation-rotation coupling block of the SE(3) left Jacobian."""
    theta = np.linalg.norm(phi, axis=-1)
    t2 = theta * theta
    small = theta < 1e-4
    safe = np.where(small, 1.0, theta)
    sin_t, cos_t = np.sin(safe), np.cos(safe)
    c1 = np.where(small, 1.0 / 6.0 - t2 / 120.0, (safe - sin_t) / safe ** 3)
    c2 = np.where(
        small, 1.0 / 24.0 - t2 / 720.0, (t2 + 2.0 * cos_t - 2.0) / (2.0 * safe ** 4)
    )
    c3 = np.where(
        small,
        1.0 / 120.0 - t2 / 2520.0,
        (2.0 * safe - 3.0 * sin_t + safe * cos_t) / (2.0 * safe ** 5),
    )
    rh = so3_hat(rho)
    ph = so3_hat(phi)
    ph_rh = ph @ rh
    rh_ph = rh @ ph
    ph_rh_ph = ph_rh @ ph
    c1 = c1[..., None, None]
    c2 = c2[..., None, None]
    c3 = c3[..., None, None]
    return (
        0.5 * rh
        + c1 * (ph_rh + rh_ph + ph_rh_ph)
        + c2 * (ph @ ph_rh + rh_ph @ ph - 3.0 * ph_rh_ph)
        + c3 * (ph_rh_ph @ ph + ph @ ph_rh_ph)
    )


def se3_left_jacobian(xi: np.ndarray) -> np.ndarray:
    """Left Jacobian of SE(3) as a (..., 6, 6) matrix, batched."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[..., :3], xi[..., 3:]
    j = so3_left_jacobian(phi)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = j
    out[..., :3, 3:] = _se3_q_matrix(rho, phi)
    out[..., 3:, 3:] = j
    return out


def se3_left_jacobian_inverse(xi: np.ndarray) -> np.ndarray:
    """Inverse of :func:`se3_left_jacobian`, batched."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[..., :3], xi[..., 3:]
    ji = so3_left_jacobian_inverse(phi)
    q = _se3_q_matrix(rho, phi)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = ji
    out[..., :3, 3:] = -ji @ q @ ji
    out[..., 3:, 3:] = ji
    return out


def se3_right_jacobian_inverse(xi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian: log(T exp(d)) ~ log(T) + Jr^-1(log T) d."""
    return se3_left_jacobian_inverse(-np.asarray(xi, dtype=float))


@dataclass(frozen=True)
class Pose:
    """Rigid transform taking child-frame coordinates into the parent frame.

    The rotation is re-orthonormalized (nearest rotation by SVD) whenever
    construction detects drift beyond 1e-12, so arbitrarily long chains of
    compositions stay orthonormal to well below 1e-9.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=float).reshape(3, 3)
        trans = np.array(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(rot)) or not np.all(np.isfinite(trans)):
            raise ValueError("pose entries must be finite")
        err = rot @ rot.T - _EYE3
        if np.max(np.abs(err)) > 1e-12 or abs(np.linalg.det(rot) - 1.0) > 1e-12:
            u, _, vt = np.linalg.svd(rot)
            d = np.sign(np.linalg.det(u @ vt))
            rot = u @ np.diag([1.0, 1.0, d]) @ vt
        rot.flags.writeable = False
        trans.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(_EYE3.copy(), np.zeros(3))

    @classmethod
    def from_matrix(cls, mat: np.ndarray) -> "Pose":
        mat = np.asarray(mat, dtype=float)
        return cls(mat[:3, :3], mat[:3, 3])

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points (..., 3) from the child frame into the parent."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class Twist:
    """Tangent-space element: translational part rho, rotational part phi."""

    rho: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rho", np.array(self.rho, dtype=float).reshape(3))
        object.__setattr__(self, "phi", np.array(self.phi, dtype=float).reshape(3))

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "Twist":
        vec = np.asarray(vec, dtype=float).reshape(6)
        return cls(vec[:3], vec[3:])

    @classmethod
    def zero(cls) -> "Twist":
        return cls(np.zeros(3), np.zeros(3))

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.rho, self.phi])

    def norm(self) -> float:
        return float(np.linalg.norm(self.vector))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera with zero distortion."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")


def compose(a: Pose, b: Pose) -> Pose:
    """Group product: a maps B->A, b maps C->B, result maps C->A."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(p: Pose) -> Pose:
    rot = p.rotation.T
    return Pose(rot, -rot @ p.translation)


def between(a: Pose, b: Pose) -> Pose:
    """Relative transform inverse(a) * b."""
    rot = a.rotation.T
    return Pose(rot @ b.rotation, rot @ (b.translation - a.translation))


def exp_map(twist) -> Pose:
    """Exponential map; accepts a Twist or a length-6 array [rho, phi]."""
    vec = twist.vector if isinstance(twist, Twist) else np.asarray(twist, dtype=float).reshape(6)
    rot, trans = se3_exp(vec)
    return Pose(rot, trans)


def log_map(p: Pose) -> Twist:
    """Logarithm map; raises ValueError for rotation angles >= pi - 1e-6."""
    return Twist.from_vector(se3_log(p.rotation, p.translation))


def adjoint(p: Pose) -> np.ndarray:
    return se3_adjoint(p.rotation, p.translation)


def propagate_covariance(p: Pose, cov: np.ndarray) -> np.ndarray:
    """Transport a tangent-space covariance through p: Ad cov Ad^T.

    The result is symmetrized exactly; PSD is preserved up to roundoff.
    """
    cov = np.asarray(cov, dtype=float)
    ad = adjoint(p)
    out = ad @ cov @ ad.T
    return (out + out.T) / 2.0


def symmetrize(mat: np.ndarray) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    return (mat + mat.T) / 2.0


def validate_covariance(mat: np.ndarray, *, eig_floor: float = -1e-12) -> np.ndarray:
    """Check a 6x6 covariance: symmetric within 1e-12, eigenvalues >= floor."""
    mat = np.asarray(mat, dtype=float)
    if mat.shape != (6, 6):
        raise ValueError("covariance must be 6x6")
    if np.max(np.abs(mat - mat.T)) > 1e-12:
        raise ValueError("covariance must be symmetric")
    if np.min(np.linalg.eigvalsh(mat)) < eig_floor:
        raise ValueError("covariance must be positive semidefinite")
    return mat


def diagonal_covariance(sigma_trans: float, sigma_rot: float) -> np.ndarray:
    """Isotropic per-axis diagonal covariance from (m, rad) sigmas."""
    return np.diag(
        [sigma_trans ** 2] * 3 + [sigma_rot ** 2] * 3
    ).astype(float)


def project(intr: CameraIntrinsics, point_camera: np.ndarray) -> np.ndarray:
    """Pinhole projection of one camera-frame point to pixels.

    Raises BehindCameraError when z <= 1e-6 m; batched users should call
    :func:`project_points` instead and use the validity mask.
    """
    point = np.asarray(point_camera, dtype=float).reshape(3)
    if point[2] <= 1e-6:
        raise BehindCameraError("point is behind the camera")
    return np.array(
        [
            intr.fx * point[0] / point[2] + intr.cx,
            intr.fy * point[1] / point[2] + intr.cy,
        ]
    )


def project_points(intr: CameraIntrinsics, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project camera-frame points (..., 3); returns (pixels, in_front mask).

    Pixels for points at or behind the camera plane are NaN.
    """
    points = np.asarray(points, dtype=float)
    z = points[..., 2]
    in_front = z > 1e-6
    safe_z = np.where(in_front, z, 1.0)
    u = intr.fx * points[..., 0] / safe_z + intr.cx
    v = intr.fy * points[..., 1] / safe_z + intr.cy
    uv = np.stack([u, v], axis=-1)
    uv[~in_front] = np.nan
    return uv, in_front
