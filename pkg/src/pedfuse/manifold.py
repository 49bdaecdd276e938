"""SO(3) / SE(3) group operations.

Tangent vectors are ordered (omega, v): rotation first, translation last.
Pose variables are perturbed on the right, ``T <- T @ exp_map(delta)``.

The ``*_batch`` helpers work on stacked arrays (leading axis = batch) and are
what the solver uses; the ``Pose`` class and the scalar wrappers are the
public, single-element surface.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation as _ScipyRotation

_SMALL = 1e-8
_NEAR_PI = 1e-2


class DegenerateRotationError(ValueError):
    """Rotation angle at pi: the logarithm has no unique principal value."""


# ---------------------------------------------------------------------------
# batched SO(3)
# ---------------------------------------------------------------------------

def hat(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def so3_exp(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta2 = np.sum(w * w, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < _SMALL
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    W = hat(w)
    eye = np.broadcast_to(np.eye(3), W.shape)
    return eye + a[..., None, None] * W + b[..., None, None] * (W @ W)


def so3_angle(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    s = 0.5 * np.linalg.norm(vee(R - np.swapaxes(R, -1, -2)), axis=-1)
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    return np.arctan2(s, c)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Principal rotation vector.  Near pi the axis sign is taken from the
    antisymmetric part, so an exact half-turn returns one of its two
    equivalent vectors without raising."""
    R = np.asarray(R, dtype=float)
    theta = so3_angle(R)
    asym = vee(R - np.swapaxes(R, -1, -2))  # = 2 sin(theta) n
    small = theta < _SMALL
    near_pi = theta > np.pi - _NEAR_PI
    regular = ~(small | near_pi)

    out = np.empty(R.shape[:-2] + (3,))
    if np.any(small):
        out[small] = 0.5 * asym[small]
    if np.any(regular):
        th = theta[regular]
        out[regular] = (th / (2.0 * np.sin(th)))[:, None] * asym[regular]
    if np.any(near_pi):
        Rp = R[near_pi]
        th = theta[near_pi]
        c = np.cos(th)
        # symmetric part = cos I + (1 - cos) n n^T
        nn = (0.5 * (Rp + np.swapaxes(Rp, -1, -2)) - c[:, None, None] * np.eye(3)) / (1.0 - c)[:, None, None]
        diag = np.diagonal(nn, axis1=-2, axis2=-1)
        k = np.argmax(diag, axis=-1)
        idx = np.arange(len(k))
        n = nn[idx, :, k] / np.sqrt(np.maximum(diag[idx, k], 1e-300))[:, None]
        sign = np.sign(np.sum(n * asym[near_pi], axis=-1))
        sign[sign == 0] = 1.0
        out[near_pi] = (sign * th)[:, None] * n
    return out


def _v_coeffs(theta: np.ndarray):
    theta2 = theta * theta
    small = theta < 1e-4
    safe = np.where(small, 1.0, theta)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    c = np.where(small, 1.0 / 6.0 - theta2 / 120.0, (safe - np.sin(safe)) / (safe ** 3))
    return b, c


def _vinv_coeff(theta: np.ndarray) -> np.ndarray:
    theta2 = theta * theta
    small = theta < 1e-4
    safe = np.where(small, 1.0, theta)
    d = (1.0 - safe * np.sin(safe) / (2.0 * (1.0 - np.cos(safe)))) / (safe * safe)
    return np.where(small, 1.0 / 12.0 + theta2 / 720.0, d)


# ---------------------------------------------------------------------------
# batched SE(3)
# ---------------------------------------------------------------------------

def se3_exp(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    xi = np.asarray(xi, dtype=float)
    w, v = xi[..., :3], xi[..., 3:]
    theta = np.linalg.norm(w, axis=-1)
    W = hat(w)
    b, c = _v_coeffs(theta)
    V = np.eye(3) + b[..., None, None] * W + c[..., None, None] * (W @ W)
    return so3_exp(w), np.einsum("...ij,...j->...i", V, v)


def se3_log(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    w = so3_log(R)
    theta = np.linalg.norm(w, axis=-1)
    W = hat(w)
    d = _vinv_coeff(theta)
    Vinv = np.eye(3) - 0.5 * W + d[..., None, None] * (W @ W)
    v = np.einsum("...ij,...j->...i", Vinv, np.asarray(t, dtype=float))
    return np.concatenate([w, v], axis=-1)


def se3_adjoint(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    out = np.zeros(R.shape[:-2] + (6, 6))
    out[..., :3, :3] = R
    out[..., 3:, 3:] = R
    out[..., 3:, :3] = hat(t) @ R
    return out


def se3_inverse(R: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Rt = np.swapaxes(R, -1, -2)
    return Rt, -np.einsum("...ij,...j->...i", Rt, t)


def se3_compose(Ra, ta, Rb, tb) -> tuple[np.ndarray, np.ndarray]:
    return Ra @ Rb, ta + np.einsum("...ij,...j->...i", Ra, tb)


def se3_retract(R: np.ndarray, t: np.ndarray, delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Right-multiplicative update ``T @ Exp(delta)``."""
    dR, dt = se3_exp(delta)
    return se3_compose(R, t, dR, dt)


# ---------------------------------------------------------------------------
# quaternions (w, x, y, z) at the interface boundary
# ---------------------------------------------------------------------------

def quat_to_matrix(q: Sequence[float]) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return _ScipyRotation.from_quat(np.roll(q, -1, axis=-1)).as_matrix()


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    q = np.roll(_ScipyRotation.from_matrix(R).as_quat(), 1, axis=-1)
    # canonical sign: w >= 0
    return np.where(q[..., :1] < 0, -q, q)


def rotz(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def yaw_of(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R)
    return np.arctan2(R[..., 1, 0], R[..., 0, 0])


# ---------------------------------------------------------------------------
# public value type
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform; rotation is a 3x3 orthonormal matrix, translation in meters."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, x: float, y: float = 0.0, z: float = 0.0) -> "Pose":
        return cls(np.eye(3), [x, y, z])

    @classmethod
    def from_yaw(cls, yaw: float, x: float = 0.0, y: float = 0.0, z: float = 0.0) -> "Pose":
        return cls(rotz(yaw), [x, y, z])

    @classmethod
    def from_quaternion(cls, q: Sequence[float], translation: Sequence[float]) -> "Pose":
        return cls(quat_to_matrix(q), translation)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def quaternion(self) -> np.ndarray:
        return matrix_to_quat(self.rotation)

    @property
    def yaw(self) -> float:
        return float(yaw_of(self.rotation))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        return Pose(*se3_inverse(self.rotation, self.translation))

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol)
            and np.allclose(self.translation, other.translation, atol=atol)
        )

    def __repr__(self) -> str:
        return f"Pose(yaw={self.yaw:.6g}, t={np.round(self.translation, 9).tolist()})"


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(*se3_compose(a.rotation, a.translation, b.rotation, b.translation))


def inverse(a: Pose) -> Pose:
    return a.inverse()


def exp_map(xi: Sequence[float]) -> Pose:
    return Pose(*se3_exp(np.asarray(xi, dtype=float).reshape(6)))


def log_map(t: Pose) -> np.ndarray:
    """Tangent (omega, v) of ``t``.

    Raises DegenerateRotationError when the rotation angle is pi (within
    1e-9), where the rotation axis sign is ambiguous.
    """
    angle = float(so3_angle(t.rotation))
    if np.pi - angle < 1e-9:
        raise DegenerateRotationError(f"rotation angle {angle!r} is at pi")
    return se3_log(t.rotation, t.translation)


def adjoint(t: Pose) -> np.ndarray:
    return se3_adjoint(t.rotation, t.translation)


def _dim(x) -> int:
    if isinstance(x, Pose):
        return 6
    return int(np.size(x))


def _perturb(x, i: int, h: float):
    if isinstance(x, Pose):
        d = np.zeros(6)
        d[i] = h
        return compose(x, exp_map(d))
    if np.ndim(x) == 0:
        return float(x) + h
    y = np.array(x, dtype=float)
    y.flat[i] += h
    return y


def numeric_jacobian(f: Callable, at, eps: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``f(*at)``.

    Poses are perturbed on the right through exp_map, everything else
    additively.  ``at`` may be a single variable or a sequence of them; the
    columns follow the variables in order.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    args = list(at) if isinstance(at, (list, tuple)) else [at]
    cols = []
    for k, x in enumerate(args):
        for i in range(_dim(x)):
            plus = list(args)
            minus = list(args)
            plus[k] = _perturb(x, i, eps)
            minus[k] = _perturb(x, i, -eps)
            fp = np.atleast_1d(np.asarray(f(*plus), dtype=float)).ravel()
            fm = np.atleast_1d(np.asarray(f(*minus), dtype=float)).ravel()
            cols.append((fp - fm) / (2.0 * eps))
    return np.stack(cols, axis=1)
