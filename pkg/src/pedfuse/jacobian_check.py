"""Finite-difference audit of every factor's analytic Jacobians.

Two checks per factor family:

* at random zero-residual configurations the analytic Jacobian must match
  central differences entrywise;
* at random general configurations a Gauss-Newton step built from the
  analytic Jacobian, shortened by backtracking, must lower the factor's
  squared residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .factors import (
    StepMeasurement,
    VelocityMeasurement,
    coarse_loop_residual,
    pdr_motion_residual,
    prior_residual,
    range_residual,
    ronin_motion_residual,
    scale_smooth_residual,
    step_transform,
)
from .manifold import Pose, compose, exp_map, numeric_jacobian

FACTORS = ("pdr_motion", "ronin_motion", "scale_smooth", "coarse_loop", "range", "prior")
# factors whose Jacobians are exact away from zero residual as well
EXACT_EVERYWHERE = ("scale_smooth", "coarse_loop", "range")


@dataclass
class FactorCheck:
    name: str
    configurations: int = 0
    max_abs_error: float = 0.0
    max_abs_error_general: float = 0.0  # only for EXACT_EVERYWHERE factors
    descent_trials: int = 0
    descent_failures: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class JacobianReport:
    tolerance: float
    factors: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(max(f.max_abs_error, f.max_abs_error_general) <= self.tolerance and f.descent_failures == 0
                   for f in self.factors.values())

    def to_dict(self) -> dict:
        return {
            "tolerance": self.tolerance,
            "passed": self.passed,
            "factors": {k: v.to_dict() for k, v in self.factors.items()},
        }


def random_pose(rng: np.random.Generator, spread: float = 5.0) -> Pose:
    w = rng.normal(size=3)
    w *= rng.uniform(0.0, 3.0) / max(np.linalg.norm(w), 1e-12)
    return Pose(exp_map(np.concatenate([w, np.zeros(3)])).rotation, rng.normal(scale=spread, size=3))


def _unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _case(name: str, rng: np.random.Generator, zero: bool):
    """(residual function of the variables, variables, analytic Jacobian function)."""
    if name in ("pdr_motion", "ronin_motion"):
        if name == "pdr_motion":
            m = StepMeasurement(random_pose(rng).rotation, _unit(rng))
            fn = pdr_motion_residual
        else:
            m = VelocityMeasurement(rng.normal(scale=1.5, size=2), float(rng.uniform(0.05, 0.5)))
            fn = ronin_motion_residual
        t0, s = random_pose(rng), float(rng.uniform(0.3, 2.0))
        t1 = compose(t0, step_transform(m, s)) if zero else random_pose(rng)
        return (lambda a, b, c: fn(a, b, c, m).residual), [t0, t1, s], (lambda a, b, c: fn(a, b, c, m).jacobians)
    if name == "scale_smooth":
        si = float(rng.uniform(0.3, 2.0))
        sj = si if zero else float(rng.uniform(0.3, 2.0))
        return (lambda a, b: scale_smooth_residual(a, b).residual), [si, sj], \
            (lambda a, b: scale_smooth_residual(a, b).jacobians)
    if name == "coarse_loop":
        ti = random_pose(rng)
        q = _unit(rng) * rng.uniform(0.5, 6.0)
        if zero:
            r = float(np.linalg.norm(q) * rng.uniform(1.2, 2.0))  # strictly inside the trust region
        else:
            r = float(np.linalg.norm(q) * rng.uniform(0.0, 0.8))
        tj = Pose(random_pose(rng).rotation, ti.translation + ti.rotation @ q)
        return (lambda a, b: coarse_loop_residual(a, b, r).residual), [ti, tj], \
            (lambda a, b: coarse_loop_residual(a, b, r).jacobians)
    if name == "range":
        tu = random_pose(rng)
        ta = tu.translation + _unit(rng) * rng.uniform(0.5, 15.0)
        d = float(np.linalg.norm(ta - tu.translation)) if zero else float(rng.uniform(0.0, 15.0))
        return (lambda a, b: range_residual(a, b, d).residual), [tu, ta], \
            (lambda a, b: range_residual(a, b, d).jacobians)
    if name == "prior":
        ref = random_pose(rng)
        t = ref if zero else compose(ref, exp_map(rng.normal(scale=0.5, size=6)))
        return (lambda a: prior_residual(a, ref).residual), [t], (lambda a: prior_residual(a, ref).jacobians)
    raise ValueError(f"unknown factor {name!r}")


def _retract(x, delta: np.ndarray):
    if isinstance(x, Pose):
        return compose(x, exp_map(delta))
    if np.ndim(x) == 0:
        return float(x) + float(delta[0])
    return np.asarray(x, dtype=float) + delta


def _dims(xs) -> list:
    return [6 if isinstance(x, Pose) else int(np.size(x)) for x in xs]


def descends(f: Callable, xs: list, jac: Callable, max_halvings: int = 40) -> bool:
    """Gauss-Newton step from the analytic Jacobian lowers |f|^2 after backtracking."""
    e = np.atleast_1d(f(*xs))
    e2 = float(e @ e)
    if e2 < 1e-20:
        return True
    J = np.concatenate([np.atleast_2d(h) for h in jac(*xs)], axis=1)
    step = -np.linalg.lstsq(J, e, rcond=None)[0]
    alpha = 1.0
    for _ in range(max_halvings):
        off, moved = 0, []
        for x, n in zip(xs, _dims(xs)):
            moved.append(_retract(x, alpha * step[off:off + n]))
            off += n
        e_new = np.atleast_1d(f(*moved))
        if float(e_new @ e_new) < e2:
            return True
        alpha *= 0.5
    return False


def run_suite(configurations: int = 100, seed: int = 0, tolerance: float = 1e-6, eps: float = 1e-6) -> JacobianReport:
    rng = np.random.default_rng(seed)
    report = JacobianReport(tolerance)
    for name in FACTORS:
        chk = FactorCheck(name)
        for _ in range(configurations):
            f, xs, jac = _case(name, rng, zero=True)
            J = np.concatenate([np.atleast_2d(h) for h in jac(*xs)], axis=1)
            Jn = numeric_jacobian(f, xs, eps)
            chk.max_abs_error = max(chk.max_abs_error, float(np.max(np.abs(J - Jn))))
            chk.configurations += 1
        for _ in range(configurations):
            f, xs, jac = _case(name, rng, zero=False)
            if name in EXACT_EVERYWHERE:
                J = np.concatenate([np.atleast_2d(h) for h in jac(*xs)], axis=1)
                err = float(np.max(np.abs(J - numeric_jacobian(f, xs, eps))))
                chk.max_abs_error_general = max(chk.max_abs_error_general, err)
            chk.descent_trials += 1
            if not descends(f, xs, jac):
                chk.descent_failures += 1
        report.factors[name] = chk
    return report
