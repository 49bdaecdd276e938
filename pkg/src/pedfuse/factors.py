"""Residual terms of the positioning objective.

Every factor exists in two forms: a batched kernel working on stacked numpy
arrays (used by the solver) and a single-factor function returning a
``FactorEval`` (used by tests, the Jacobian check and anyone poking at one
factor by hand).  The single-factor functions call the kernels, so there is
exactly one implementation of each residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .manifold import (
    Pose,
    hat,
    se3_adjoint,
    se3_compose,
    se3_inverse,
    se3_log,
)


class DegenerateGeometryError(ValueError):
    """Direction of a range measurement is undefined (pose on the anchor)."""


# ---------------------------------------------------------------------------
# measurements and weights
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StepMeasurement:
    relative_rotation: np.ndarray
    direction: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    timestamp: float = 0.0

    def __post_init__(self):
        R = np.asarray(self.relative_rotation, dtype=float).reshape(3, 3)
        u = np.asarray(self.direction, dtype=float).reshape(3)
        n = np.linalg.norm(u)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"step direction must be a unit vector, got norm {n}")
        object.__setattr__(self, "relative_rotation", R)
        object.__setattr__(self, "direction", u)


@dataclass(frozen=True, eq=False)
class VelocityMeasurement:
    velocity: np.ndarray
    dt: float
    timestamp: float = 0.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("velocity interval dt must be positive")
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float).reshape(2))


@dataclass(frozen=True)
class RangeMeasurement:
    pose_key: object
    anchor_key: object
    distance: float
    timestamp: float = 0.0

    def __post_init__(self):
        if self.distance < 0:
            raise ValueError("range distance must be non-negative")


@dataclass(frozen=True)
class Cauchy:
    c: float = 1.0

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("Cauchy scale must be positive")


@dataclass(frozen=True, eq=False)
class FactorWeight:
    information: np.ndarray
    robust_kernel: Optional[Cauchy] = None

    def __post_init__(self):
        info = np.atleast_2d(np.asarray(self.information, dtype=float))
        if info.shape[0] != info.shape[1]:
            raise ValueError("information matrix must be square")
        if not np.allclose(info, info.T):
            raise ValueError("information matrix must be symmetric")
        try:
            sqrt_info = np.linalg.cholesky(info).T
        except np.linalg.LinAlgError:
            raise ValueError("information matrix must be positive definite") from None
        object.__setattr__(self, "information", info)
        object.__setattr__(self, "_sqrt_info", sqrt_info)

    @property
    def sqrt_information(self) -> np.ndarray:
        """Upper factor L with information = L^T L."""
        return self._sqrt_info

    @classmethod
    def isotropic(cls, dim: int, value: float, robust_kernel: Optional[Cauchy] = None) -> "FactorWeight":
        return cls(np.eye(dim) * value, robust_kernel)


@dataclass(frozen=True)
class FactorWeights:
    """Default information per factor family; everything is overridable."""

    motion: FactorWeight = field(default_factory=lambda: FactorWeight(np.diag([50.0, 50.0, 50.0, 25.0, 25.0, 25.0])))
    scale: FactorWeight = field(default_factory=lambda: FactorWeight.isotropic(1, 400.0))
    ble_loop: FactorWeight = field(default_factory=lambda: FactorWeight.isotropic(1, 4.0))
    wifi_loop: FactorWeight = field(default_factory=lambda: FactorWeight.isotropic(1, 4.0))
    range: FactorWeight = field(default_factory=lambda: FactorWeight.isotropic(1, 100.0, Cauchy(1.0)))
    prior: FactorWeight = field(default_factory=lambda: FactorWeight.isotropic(6, 1e6))

    @classmethod
    def from_config(cls, cfg: dict) -> "FactorWeights":
        """Build from a flat mapping, e.g. ``{"range_sigma": 0.1, "cauchy_c": 1.0}``."""
        def info(name: str, default: Optional[float] = None) -> float:
            sigma = float(cfg.get(name, default))
            if not sigma > 0:
                raise ValueError(f"{name} must be positive, got {sigma}")
            return sigma ** -2

        kw = {}
        if "motion_information" in cfg:
            kw["motion"] = FactorWeight(np.diag(np.asarray(cfg["motion_information"], dtype=float)))
        if "scale_sigma" in cfg:
            kw["scale"] = FactorWeight.isotropic(1, info("scale_sigma"))
        if "loop_sigma" in cfg:
            kw["ble_loop"] = FactorWeight.isotropic(1, info("loop_sigma"))
            kw["wifi_loop"] = FactorWeight.isotropic(1, info("loop_sigma"))
        if "ble_loop_sigma" in cfg:
            kw["ble_loop"] = FactorWeight.isotropic(1, info("ble_loop_sigma"))
        if "wifi_loop_sigma" in cfg:
            kw["wifi_loop"] = FactorWeight.isotropic(1, info("wifi_loop_sigma"))
        if "range_sigma" in cfg or "cauchy_c" in cfg or "robust" in cfg:
            robust = cfg.get("robust", True)
            kernel = Cauchy(cfg.get("cauchy_c", 1.0)) if robust else None
            kw["range"] = FactorWeight.isotropic(1, info("range_sigma", 0.1), kernel)
        if "prior_sigma" in cfg:
            kw["prior"] = FactorWeight.isotropic(6, info("prior_sigma"))
        return cls(**kw)

    def loop(self, source: str) -> FactorWeight:
        return self.wifi_loop if source == "wifi" else self.ble_loop


class FactorEval(NamedTuple):
    residual: np.ndarray
    jacobians: tuple
    degenerate: bool = False


# ---------------------------------------------------------------------------
# robust weighting
# ---------------------------------------------------------------------------

def whitened_norm(residual, weight: FactorWeight) -> float:
    r = np.atleast_1d(np.asarray(residual, dtype=float))
    return float(np.sqrt(r @ weight.information @ r))


def cauchy_multiplier(norm_whitened: np.ndarray, c: float) -> np.ndarray:
    return 1.0 / (1.0 + (np.asarray(norm_whitened) / c) ** 2)


def apply_robust_weight(residual, weight: FactorWeight) -> float:
    """IRLS multiplier applied on top of the information matrix."""
    if weight.robust_kernel is None:
        return 1.0
    return float(cauchy_multiplier(whitened_norm(residual, weight), weight.robust_kernel.c))


def robust_cost(sq_norm: np.ndarray, c: Optional[float]) -> np.ndarray:
    """Per-factor contribution to the objective given squared whitened norm.

    The Cauchy cost c^2 log(1 + s/c^2) has derivative equal to the IRLS
    multiplier, so reweighted Gauss-Newton minimises it.
    """
    if c is None:
        return sq_norm
    return c * c * np.log1p(sq_norm / (c * c))


# ---------------------------------------------------------------------------
# batched kernels
# ---------------------------------------------------------------------------

def motion_batch(R0, t0, R1, t1, s, Rm, d):
    """Relative-motion residual Log(Tstep^-1 T0^-1 T1), Tstep = [Rm | s d].

    Jacobians: H_T0 = -Adj(T01^-1), H_T1 = I, H_s = [0, -Rm^T d].  The pose
    Jacobians are first order (exact at zero residual only).
    """
    n = len(s)
    R0i, t0i = se3_inverse(R0, t0)
    R01, t01 = se3_compose(R0i, t0i, R1, t1)
    Rmt = np.swapaxes(Rm, -1, -2)
    Re = Rmt @ R01
    te = np.einsum("nij,nj->ni", Rmt, t01 - s[:, None] * d)
    e = se3_log(Re, te)
    H0 = -se3_adjoint(*se3_inverse(R01, t01))
    H1 = np.broadcast_to(np.eye(6), (n, 6, 6))
    Hs = np.zeros((n, 6, 1))
    Hs[:, 3:, 0] = -np.einsum("nij,nj->ni", Rmt, d)
    return e, H0, H1, Hs


def scale_batch(si, sj):
    n = len(si)
    return (sj - si)[:, None], -np.ones((n, 1, 1)), np.ones((n, 1, 1))


def loop_batch(Ri, ti, Rj, tj, radius):
    """Coarse loop: max(|q| - r, 0) with q = Ri^T (tj - ti).

    Returns residual (n,1), H_ti (n,1,6), H_tj (n,1,6) and a mask of
    degenerate entries (|q| = 0 with r = 0).
    """
    n = len(radius)
    q = np.einsum("nji,nj->ni", Ri, tj - ti)
    qn = np.linalg.norm(q, axis=-1)
    outside = qn > radius
    degenerate = (qn < 1e-12) & (radius <= 0)
    active = outside & ~degenerate
    res = np.where(active, qn - radius, 0.0)[:, None]
    Hi = np.zeros((n, 1, 6))
    Hj = np.zeros((n, 1, 6))
    if np.any(active):
        qa = q[active]
        qnorm = qa / qn[active, None]
        block = np.concatenate([hat(qa), -np.broadcast_to(np.eye(3), (len(qa), 3, 3))], axis=-1)
        Hi[active, 0, :] = np.einsum("ni,nij->nj", qnorm, block)
        RiRj = np.swapaxes(Ri[active], -1, -2) @ Rj[active]
        Hj[active, 0, 3:] = np.einsum("ni,nij->nj", qnorm, RiRj)
    return res, Hi, Hj, degenerate


def range_batch(Ru, tu, ta, d):
    """Range residual |t_u - t_a| - d with pose (right-perturbed) and anchor Jacobians."""
    n = len(d)
    diff = tu - ta
    dist = np.linalg.norm(diff, axis=-1)
    degenerate = dist < 1e-9
    safe = np.where(degenerate, 1.0, dist)
    unit = diff / safe[:, None]
    unit[degenerate] = 0.0
    res = (dist - d)[:, None]
    Hp = np.zeros((n, 1, 6))
    Hp[:, 0, 3:] = np.einsum("ni,nij->nj", unit, Ru)
    Ha = -unit[:, None, :]
    return res, Hp, Ha, degenerate


def prior_batch(R, t, Rp, tp):
    Rpi, tpi = se3_inverse(Rp, tp)
    e = se3_log(*se3_compose(Rpi, tpi, R, t))
    return e, np.broadcast_to(np.eye(6), (len(e), 6, 6))


# ---------------------------------------------------------------------------
# single-factor API
# ---------------------------------------------------------------------------

def _stack_pose(p: Pose):
    return p.rotation[None], p.translation[None]


def step_transform(m, s: float) -> Pose:
    """Measured relative pose for a step or velocity measurement at scale s."""
    Rm, d = motion_model(m)
    return Pose(Rm, s * d)


def motion_model(m) -> tuple[np.ndarray, np.ndarray]:
    """(relative rotation, translation per unit scale) of a motion measurement."""
    if isinstance(m, StepMeasurement):
        return m.relative_rotation, m.direction
    if isinstance(m, VelocityMeasurement):
        return np.eye(3), np.array([m.velocity[0] * m.dt, m.velocity[1] * m.dt, 0.0])
    raise TypeError(f"not a motion measurement: {type(m).__name__}")


def _motion(t0: Pose, t1: Pose, s: float, m) -> FactorEval:
    Rm, d = motion_model(m)
    e, H0, H1, Hs = motion_batch(*_stack_pose(t0), *_stack_pose(t1), np.array([float(s)]), Rm[None], d[None])
    return FactorEval(e[0], (H0[0], np.array(H1[0]), Hs[0]))


def pdr_motion_residual(t0: Pose, t1: Pose, s: float, m: StepMeasurement) -> FactorEval:
    return _motion(t0, t1, s, m)


def ronin_motion_residual(t0: Pose, t1: Pose, s: float, m: VelocityMeasurement) -> FactorEval:
    return _motion(t0, t1, s, m)


def scale_smooth_residual(s_i: float, s_j: float) -> FactorEval:
    r, Hi, Hj = scale_batch(np.array([float(s_i)]), np.array([float(s_j)]))
    return FactorEval(r[0], (Hi[0], Hj[0]))


def coarse_loop_residual(ti: Pose, tj: Pose, r: float) -> FactorEval:
    if r < 0:
        raise ValueError("loop radius must be non-negative")
    res, Hi, Hj, deg = loop_batch(*_stack_pose(ti), *_stack_pose(tj), np.array([float(r)]))
    return FactorEval(res[0], (Hi[0], Hj[0]), bool(deg[0]))


def range_residual(tu: Pose, anchor: Sequence[float], d: float) -> FactorEval:
    res, Hp, Ha, deg = range_batch(
        tu.rotation[None], tu.translation[None], np.asarray(anchor, dtype=float).reshape(1, 3), np.array([float(d)])
    )
    if deg[0]:
        raise DegenerateGeometryError("pose coincides with the anchor; range direction undefined")
    return FactorEval(res[0], (Hp[0], Ha[0]))


def prior_residual(t: Pose, anchor_pose: Pose) -> FactorEval:
    e, H = prior_batch(*_stack_pose(t), *_stack_pose(anchor_pose))
    return FactorEval(e[0], (np.array(H[0]),))
