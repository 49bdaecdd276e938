"""Factor graph container and sparse Levenberg-Marquardt solver.

Variables are poses (SE(3), 6 dof), per-step scales (1 dof) and UWB anchors
(3 dof, shared across agents).  ``solve`` runs damped Gauss-Newton over the
whole graph; ``solve_incremental`` re-linearizes a window around newly added
factors and falls back to a full batch every ``full_batch_every`` batches.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .factors import (
    FactorWeight,
    FactorWeights,
    StepMeasurement,
    VelocityMeasurement,
    loop_batch,
    motion_batch,
    motion_model,
    prior_batch,
    range_batch,
    robust_cost,
    scale_batch,
)
from .manifold import Pose, compose, se3_retract

log = logging.getLogger(__name__)

POSE, SCALE, ANCHOR = "pose", "scale", "anchor"
DOF = {POSE: 6, SCALE: 1, ANCHOR: 3}
NOMINAL_STEP_PERIOD = 0.5


class VariableKey(NamedTuple):
    kind: str
    agent: int
    index: int

    @classmethod
    def pose(cls, agent: int, index: int) -> "VariableKey":
        return cls(POSE, int(agent), int(index))

    @classmethod
    def scale(cls, agent: int, index: int) -> "VariableKey":
        return cls(SCALE, int(agent), int(index))

    @classmethod
    def anchor(cls, index: int) -> "VariableKey":
        return cls(ANCHOR, -1, int(index))

    def __str__(self) -> str:
        if self.kind == ANCHOR:
            return f"anchor[{self.index}]"
        return f"{self.kind}[{self.agent}:{self.index}]"


@dataclass(frozen=True, eq=False)
class Factor:
    kind: str  # prior | motion | scale | loop | range
    keys: tuple
    measurement: object
    weight: FactorWeight
    source: str = ""

    @property
    def cost_label(self) -> str:
        return f"{self.kind}_{self.source}" if self.kind == "loop" else self.kind


@dataclass
class SolverConfig:
    max_iterations: int = 100
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    abs_tol: float = 1e-9
    rel_tol: float = 1e-6
    incremental_window: int = 20
    full_batch_every: int = 25
    lambda_max: float = 1e10
    rank_policy: str = "raise"  # raise | freeze
    anchor_min_rank: int = 2

    def __post_init__(self):
        for name in ("max_iterations", "lambda_init", "lambda_up", "lambda_down", "abs_tol", "rel_tol",
                     "incremental_window", "full_batch_every", "lambda_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"SolverConfig.{name} must be positive")
        if not self.rel_tol < 1:
            raise ValueError("SolverConfig.rel_tol must be < 1")
        if self.rank_policy not in ("raise", "freeze"):
            raise ValueError("rank_policy must be 'raise' or 'freeze'")

    @classmethod
    def from_config(cls, cfg: dict) -> "SolverConfig":
        names = cls.__dataclass_fields__.keys()
        return cls(**{k: v for k, v in cfg.items() if k in names})


@dataclass
class SolveReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    converged: bool = True
    cost_breakdown: dict = field(default_factory=dict)
    mode: str = "batch"
    active_variables: int = 0
    frozen: list = field(default_factory=list)
    cost_history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "iterations": self.iterations,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "converged": self.converged,
            "active_variables": self.active_variables,
            "frozen": [str(k) for k in self.frozen],
            "cost_breakdown": dict(sorted(self.cost_breakdown.items())),
        }


class RankDeficientError(RuntimeError):
    def __init__(self, keys: Sequence[VariableKey]):
        self.keys = sorted(keys)
        names = ", ".join(str(k) for k in self.keys[:10])
        more = "" if len(self.keys) <= 10 else f" (+{len(self.keys) - 10} more)"
        super().__init__(f"rank-deficient normal equations for: {names}{more}")


class FactorGraph:
    """Poses, scales and anchors plus the factors tying them together."""

    def __init__(
        self,
        weights: Optional[FactorWeights] = None,
        *,
        initial_scale: float = 0.7,
        adaptive: bool = True,
        scale_bounds: tuple = (0.2, 3.0),
        anchor_baseline: float = 0.5,
        anchor_init: str = "multilateration",
        anchor_spread: float = 1.0,
    ):
        if anchor_init not in ("multilateration", "two_circle"):
            raise ValueError("anchor_init must be 'multilateration' or 'two_circle'")
        self.weights = weights or FactorWeights()
        self.initial_scale = float(initial_scale)
        self.adaptive = adaptive
        self.scale_bounds = scale_bounds
        self.anchor_baseline = anchor_baseline
        self.anchor_init = anchor_init
        self.anchor_spread = anchor_spread
        self.values: dict = {}
        self.timestamps: dict = {}
        self.fixed: set = set()
        self.factors: list = []
        self._key_factors: dict = {}
        self._n_poses: dict = {}
        self._anchor_obs: dict = {}
        self._provisional: set = set()
        self._deferred: set = set()
        self._pending: list = []
        self._batches = 0
        self._solved = False

    # -- construction --------------------------------------------------------

    @property
    def agents(self) -> list:
        return sorted(self._n_poses)

    def num_poses(self, agent: int) -> int:
        return self._n_poses.get(agent, 0)

    def _add_factor(self, factor: Factor) -> int:
        idx = len(self.factors)
        self.factors.append(factor)
        self._pending.append(idx)
        for k in factor.keys:
            self._key_factors.setdefault(k, []).append(idx)
        return idx

    def add_agent(self, agent: int, timestamp: float = 0.0, origin: Optional[Pose] = None) -> VariableKey:
        """First pose of ``agent``, pinned by a prior (default: world origin)."""
        if agent in self._n_poses:
            raise ValueError(f"agent {agent} already exists")
        origin = origin or Pose.identity()
        key = VariableKey.pose(agent, 0)
        self.values[key] = origin
        self.timestamps[key] = float(timestamp)
        self._n_poses[agent] = 1
        self._add_factor(Factor("prior", (key,), origin, self.weights.prior))
        return key

    def add_step(self, agent: int, step: Union[StepMeasurement, VelocityMeasurement]) -> VariableKey:
        if agent not in self._n_poses:
            lead = step.dt if isinstance(step, VelocityMeasurement) else NOMINAL_STEP_PERIOD
            self.add_agent(agent, step.timestamp - lead)
        k = self._n_poses[agent] - 1
        prev = VariableKey.pose(agent, k)
        if step.timestamp <= self.timestamps[prev]:
            raise ValueError(
                f"agent {agent}: step timestamp {step.timestamp} is not after the previous pose "
                f"({self.timestamps[prev]}); duplicate or out-of-order"
            )
        skey = VariableKey.scale(agent, k)
        s0 = self.initial_scale if k == 0 else float(self.values[VariableKey.scale(agent, k - 1)])
        self.values[skey] = s0
        if not self.adaptive:
            self.fixed.add(skey)

        Rm, d = motion_model(step)
        new = VariableKey.pose(agent, k + 1)
        self.values[new] = compose(self.values[prev], Pose(Rm, s0 * d))
        self.timestamps[new] = float(step.timestamp)
        self._n_poses[agent] = k + 2

        source = "ronin" if isinstance(step, VelocityMeasurement) else "pdr"
        self._add_factor(Factor("motion", (prev, new, skey), (Rm, d), self.weights.motion, source))
        if k > 0:
            self._add_factor(Factor("scale", (VariableKey.scale(agent, k - 1), skey), None, self.weights.scale))
        return new

    def add_range(self, pose_key: VariableKey, anchor_id: int, d: float,
                  weight: Optional[FactorWeight] = None) -> VariableKey:
        if pose_key not in self.values or pose_key.kind != POSE:
            raise KeyError(f"unknown pose {pose_key}")
        if d < 0:
            raise ValueError("range distance must be non-negative")
        akey = VariableKey.anchor(anchor_id)
        if akey not in self.values:
            pose = self.values[pose_key]
            heading = pose.rotation[:, 0]
            self.values[akey] = pose.translation + d * heading
            self._provisional.add(akey)
            if self.anchor_init == "multilateration":
                self._deferred.add(akey)
            self._anchor_obs[akey] = []
        self._anchor_obs[akey].append((pose_key, float(d)))
        self._add_factor(Factor("range", (pose_key, akey), float(d), weight or self.weights.range, "uwb"))
        return akey

    def add_loop(self, key_i: VariableKey, key_j: VariableKey, radius: float,
                 weight: Optional[FactorWeight] = None, source: str = "ble") -> int:
        for k in (key_i, key_j):
            if k not in self.values or k.kind != POSE:
                raise KeyError(f"unknown pose {k}")
        if key_i == key_j:
            raise ValueError("self-loop rejected")
        if radius < 0:
            raise ValueError("loop radius must be non-negative")
        return self._add_factor(Factor("loop", (key_i, key_j), float(radius), weight or self.weights.loop(source), source))

    def set_anchor(self, anchor_id: int, position: Sequence[float], fixed: bool = False) -> VariableKey:
        """Override an anchor's initial position (optionally holding it fixed)."""
        akey = VariableKey.anchor(anchor_id)
        self.values[akey] = np.asarray(position, dtype=float).reshape(3).copy()
        self._anchor_obs.setdefault(akey, [])
        self._provisional.discard(akey)
        self._deferred.discard(akey)
        if fixed:
            self.fixed.add(akey)
        return akey

    def take_new_factors(self) -> list:
        """Indices of factors added since the last call (or last solve)."""
        out, self._pending = self._pending, []
        return out

    # -- queries -------------------------------------------------------------

    def pose_keys(self, agent: int) -> list:
        return [VariableKey.pose(agent, i) for i in range(self.num_poses(agent))]

    def pose_times(self, agent: int) -> np.ndarray:
        return np.array([self.timestamps[k] for k in self.pose_keys(agent)])

    def trajectory(self, agent: int) -> list:
        return [(self.timestamps[k], self.values[k]) for k in self.pose_keys(agent)]

    def scales(self, agent: int) -> np.ndarray:
        n = max(self.num_poses(agent) - 1, 0)
        return np.array([self.values[VariableKey.scale(agent, i)] for i in range(n)])

    def anchors(self) -> dict:
        return {k.index: np.array(v) for k, v in sorted(self.values.items()) if k.kind == ANCHOR}

    def nearest_pose(self, agent: int, t: float, window: float) -> Optional[VariableKey]:
        times = self.pose_times(agent)
        if len(times) == 0:
            return None
        i = int(np.clip(np.searchsorted(times, t), 1, len(times) - 1)) if len(times) > 1 else 0
        if i > 0 and abs(times[i - 1] - t) <= abs(times[i] - t):
            i -= 1
        return VariableKey.pose(agent, i) if abs(times[i] - t) <= window else None

    def factor_counts(self) -> dict:
        out: dict = {}
        for f in self.factors:
            out[f.kind] = out.get(f.kind, 0) + 1
        return out

    def snapshot(self) -> dict:
        return dict(self.values)

    # -- anchor initialization ----------------------------------------------

    def _initialize_anchors(self) -> list:
        """(Re)initialize anchors that have not been refined by a solve yet.

        ``two_circle`` intersects the range circles of the first observing
        pose and the farthest one (>= ``anchor_baseline`` apart), keeping the
        intersection nearest the trajectory centroid.  ``multilateration``
        waits until the observing poses spread at least ``anchor_spread``
        meters (std) across their principal direction, then fits all ranges
        by linear least squares plus a few Cauchy-weighted Gauss-Newton
        steps; until then the anchor and its range factors stay out of the
        optimization.  Returns the anchors that left the deferred state.
        """
        released = []
        if not self._provisional:
            return released
        all_pos = np.array([v.translation for k, v in self.values.items() if k.kind == POSE])
        centroid = all_pos.mean(axis=0)
        for akey in sorted(self._provisional):
            obs = self._anchor_obs[akey]
            pts = np.array([self.values[k].translation for k, _ in obs])
            dist = np.array([d for _, d in obs])
            z = float(np.mean(pts[:, 2]))
            horiz = np.sqrt(np.maximum(dist ** 2 - (z - pts[:, 2]) ** 2, 0.0))
            if self.anchor_init == "multilateration":
                xy = pts[:, :2] - pts[:, :2].mean(axis=0)
                spread = np.linalg.svd(xy, compute_uv=False)[-1] / np.sqrt(len(xy)) if len(xy) > 2 else 0.0
                if spread < self.anchor_spread:
                    continue
                guess = _multilaterate(pts[:, :2], horiz)
                if guess is None:
                    continue
                if akey in self._deferred:
                    self._deferred.discard(akey)
                    released.append(akey)
            else:
                sep = np.linalg.norm((pts - pts[0])[:, :2], axis=1)
                if sep.max() < self.anchor_baseline:
                    continue
                j = int(np.argmax(sep))
                cands = _circle_intersections(pts[0, :2], horiz[0], pts[j, :2], horiz[j])
                guess = min(cands, key=lambda c: (np.hypot(*(c - centroid[:2])), c[0], c[1]))
            self.values[akey] = np.array([guess[0], guess[1], z])
        return released

    def _solvable_factors(self) -> list:
        if not self._deferred:
            return list(range(len(self.factors)))
        return [i for i, f in enumerate(self.factors) if not any(k in self._deferred for k in f.keys)]

    # -- solving -------------------------------------------------------------

    def solve(self, config: Optional[SolverConfig] = None) -> SolveReport:
        return solve(self, config)


def _multilaterate(P: np.ndarray, r: np.ndarray, iterations: int = 10) -> Optional[np.ndarray]:
    """Planar point at distances ``r`` from ``P``; None for collinear observers."""
    A = 2.0 * (P[1:] - P[0])
    if len(A) < 2 or np.linalg.matrix_rank(A, tol=1e-6 * max(1.0, np.abs(A).max())) < 2:
        return None
    b = r[0] ** 2 - r[1:] ** 2 + np.sum(P[1:] ** 2, axis=1) - np.sum(P[0] ** 2)
    x = np.linalg.lstsq(A, b, rcond=None)[0]
    scale = max(float(np.median(np.abs(r))) * 0.05, 0.1)
    for _ in range(iterations):
        diff = x - P
        n = np.maximum(np.linalg.norm(diff, axis=1), 1e-9)
        e = n - r
        w = 1.0 / (1.0 + (e / scale) ** 2)
        J = diff / n[:, None]
        H = (J * w[:, None]).T @ J
        if np.linalg.cond(H) > 1e12:
            break
        x = x - np.linalg.solve(H, (J * w[:, None]).T @ e)
    return x


def _circle_intersections(c1, r1, c2, r2) -> list:
    c1, c2 = np.asarray(c1, float), np.asarray(c2, float)
    D = float(np.linalg.norm(c2 - c1))
    u = (c2 - c1) / D
    if D > r1 + r2 or D < abs(r1 - r2):
        # no intersection: closest approach along the center line
        sign = 1.0 if (D > r1 + r2 or r1 < r2) else -1.0
        return [c1 + sign * r1 * u]
    a = (r1 * r1 - r2 * r2 + D * D) / (2 * D)
    h = np.sqrt(max(r1 * r1 - a * a, 0.0))
    mid = c1 + a * u
    perp = np.array([-u[1], u[0]])
    return [mid + h * perp, mid - h * perp]


# ---------------------------------------------------------------------------
# linearization
# ---------------------------------------------------------------------------

class _Problem:
    """Packed view of a graph restricted to a set of factors and active variables."""

    def __init__(self, graph: FactorGraph, factor_ids: Sequence[int], active: Sequence[VariableKey]):
        self.graph = graph
        factors = [graph.factors[i] for i in factor_ids]
        keys = sorted({k for f in factors for k in f.keys} | set(active))
        self.keys = {POSE: [], SCALE: [], ANCHOR: []}
        for k in keys:
            self.keys[k.kind].append(k)
        self.index = {kind: {k: i for i, k in enumerate(ks)} for kind, ks in self.keys.items()}

        active = sorted(active)
        self.active = active
        self.col = {kind: np.full(len(ks), -1, dtype=np.int64) for kind, ks in self.keys.items()}
        off = 0
        self.var_slices = []
        for k in active:
            self.col[k.kind][self.index[k.kind][k]] = off
            self.var_slices.append((k, off, DOF[k.kind]))
            off += DOF[k.kind]
        self.ncols = off

        self.groups = {}
        for kind in ("prior", "motion", "scale", "loop", "range"):
            fs = [f for f in factors if f.kind == kind]
            if not fs:
                continue
            g = {"keys": [np.array([self.index[k.kind][k] for k in (f.keys[s] for f in fs)], dtype=np.int64)
                          for s in range(len(fs[0].keys))]}
            g["L"] = np.stack([f.weight.sqrt_information for f in fs])
            g["c"] = np.array([f.weight.robust_kernel.c if f.weight.robust_kernel else np.nan for f in fs])
            g["label"] = np.array([f.cost_label for f in fs])
            if kind == "prior":
                g["Rp"] = np.stack([f.measurement.rotation for f in fs])
                g["tp"] = np.stack([f.measurement.translation for f in fs])
            elif kind == "motion":
                g["Rm"] = np.stack([f.measurement[0] for f in fs])
                g["d"] = np.stack([f.measurement[1] for f in fs])
            elif kind in ("loop", "range"):
                g["m"] = np.array([f.measurement for f in fs])
            self.groups[kind] = g

    def initial_state(self):
        vals = self.graph.values
        poses = [vals[k] for k in self.keys[POSE]]
        R = np.stack([p.rotation for p in poses]) if poses else np.zeros((0, 3, 3))
        t = np.stack([p.translation for p in poses]) if poses else np.zeros((0, 3))
        s = np.array([float(vals[k]) for k in self.keys[SCALE]])
        a = np.stack([vals[k] for k in self.keys[ANCHOR]]) if self.keys[ANCHOR] else np.zeros((0, 3))
        return R, t, s, a

    def write_back(self, state) -> None:
        R, t, s, a = state
        vals = self.graph.values
        for k in self.active:
            i = self.index[k.kind][k]
            if k.kind == POSE:
                vals[k] = Pose(R[i], t[i])
            elif k.kind == SCALE:
                vals[k] = float(s[i])
            else:
                vals[k] = a[i].copy()

    def _evaluate(self, kind, g, state):
        R, t, s, a = state
        ks = g["keys"]
        if kind == "prior":
            e, H = prior_batch(R[ks[0]], t[ks[0]], g["Rp"], g["tp"])
            return e, [(POSE, ks[0], H)]
        if kind == "motion":
            e, H0, H1, Hs = motion_batch(R[ks[0]], t[ks[0]], R[ks[1]], t[ks[1]], s[ks[2]], g["Rm"], g["d"])
            return e, [(POSE, ks[0], H0), (POSE, ks[1], H1), (SCALE, ks[2], Hs)]
        if kind == "scale":
            e, Hi, Hj = scale_batch(s[ks[0]], s[ks[1]])
            return e, [(SCALE, ks[0], Hi), (SCALE, ks[1], Hj)]
        if kind == "loop":
            e, Hi, Hj, _ = loop_batch(R[ks[0]], t[ks[0]], R[ks[1]], t[ks[1]], g["m"])
            return e, [(POSE, ks[0], Hi), (POSE, ks[1], Hj)]
        e, Hp, Ha, _ = range_batch(R[ks[0]], t[ks[0]], a[ks[1]], g["m"])
        return e, [(POSE, ks[0], Hp), (ANCHOR, ks[1], Ha)]

    def cost(self, state) -> tuple[float, dict]:
        total = 0.0
        breakdown: dict = {}
        for kind, g in self.groups.items():
            e, _ = self._evaluate(kind, g, state)
            ew = np.einsum("nij,nj->ni", g["L"], e)
            sq = np.sum(ew * ew, axis=1)
            c = g["c"]
            robust = ~np.isnan(c)
            per = sq.copy()
            if np.any(robust):
                per[robust] = robust_cost(sq[robust], c[robust])
            for label in np.unique(g["label"]):
                v = float(np.sum(per[g["label"] == label]))
                breakdown[str(label)] = breakdown.get(str(label), 0.0) + v
            total += float(np.sum(per))
        return total, breakdown

    def linearize(self, state):
        """Whitened, robust-reweighted residual vector and sparse Jacobian."""
        rows_all, cols_all, data_all, res_all = [], [], [], []
        row0 = 0
        for kind, g in self.groups.items():
            e, blocks = self._evaluate(kind, g, state)
            L = g["L"]
            ew = np.einsum("nij,nj->ni", L, e)
            c = g["c"]
            robust = ~np.isnan(c)
            sqrt_w = np.ones(len(e))
            if np.any(robust):
                sq = np.sum(ew[robust] ** 2, axis=1)
                sqrt_w[robust] = np.sqrt(1.0 / (1.0 + sq / c[robust] ** 2))
            ew = ew * sqrt_w[:, None]
            n, m = e.shape
            rows = row0 + np.arange(n * m).reshape(n, m)
            for vkind, idx, H in blocks:
                col0 = self.col[vkind][idx]
                keep = col0 >= 0
                if not np.any(keep):
                    continue
                Hw = np.einsum("nij,njk->nik", L[keep], H[keep]) * sqrt_w[keep, None, None]
                dof = H.shape[2]
                rr = np.broadcast_to(rows[keep][:, :, None], Hw.shape)
                cc = np.broadcast_to((col0[keep][:, None] + np.arange(dof))[:, None, :], Hw.shape)
                rows_all.append(rr.ravel())
                cols_all.append(cc.ravel())
                data_all.append(Hw.ravel())
            res_all.append(ew.ravel())
            row0 += n * m
        r = np.concatenate(res_all) if res_all else np.zeros(0)
        if data_all:
            J = sp.csr_matrix(
                (np.concatenate(data_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
                shape=(row0, self.ncols),
            )
        else:
            J = sp.csr_matrix((row0, self.ncols))
        return r, J

    def retract(self, state, delta, bounds):
        R, t, s, a = state
        R, t, s, a = R.copy(), t.copy(), s.copy(), a.copy()
        pc = self.col[POSE]
        act = np.nonzero(pc >= 0)[0]
        if len(act):
            d = delta[pc[act][:, None] + np.arange(6)]
            R[act], t[act] = se3_retract(R[act], t[act], d)
        sc = self.col[SCALE]
        act = np.nonzero(sc >= 0)[0]
        if len(act):
            s[act] = np.clip(s[act] + delta[sc[act]], *bounds)
        ac = self.col[ANCHOR]
        act = np.nonzero(ac >= 0)[0]
        if len(act):
            a[act] = a[act] + delta[ac[act][:, None] + np.arange(3)]
        return R, t, s, a

    def block_ranks(self, H: sp.spmatrix) -> dict:
        """Numerical rank of each active variable's diagonal information block."""
        H = H.tocoo()
        owner = np.empty(self.ncols, dtype=np.int64)
        local = np.empty(self.ncols, dtype=np.int64)
        for v, (_, off, dof) in enumerate(self.var_slices):
            owner[off:off + dof] = v
            local[off:off + dof] = np.arange(dof)
        same = owner[H.row] == owner[H.col]
        blocks = np.zeros((len(self.var_slices), 6, 6))
        np.add.at(blocks, (owner[H.row[same]], local[H.row[same]], local[H.col[same]]), H.data[same])
        ranks = {}
        for dof in (1, 3, 6):
            sel = [v for v, (_, _, d) in enumerate(self.var_slices) if d == dof]
            if not sel:
                continue
            eig = np.linalg.eigvalsh(blocks[sel][:, :dof, :dof])
            top = np.maximum(eig[:, -1:], 1e-300)
            r = np.sum((eig > 1e-9 * top) & (eig > 1e-12), axis=1)
            for v, rk in zip(sel, r):
                ranks[self.var_slices[v][0]] = int(rk)
        return ranks


def _deficient(ranks: dict, config: SolverConfig) -> list:
    need = {POSE: 6, SCALE: 1, ANCHOR: config.anchor_min_rank}
    return sorted(k for k, r in ranks.items() if r < need[k.kind])


def gauss_newton_step(graph: FactorGraph) -> tuple[list, np.ndarray]:
    """Undamped normal-equation step over all free variables (no update applied).

    Returns the active key order and the stacked step vector.
    """
    active = sorted(k for k in graph.values if k not in graph.fixed)
    prob = _Problem(graph, range(len(graph.factors)), active)
    r, J = prob.linearize(prob.initial_state())
    H = (J.T @ J).tocsc()
    delta = spla.spsolve(H, -(J.T @ r))
    return [k for k, _, _ in prob.var_slices], np.atleast_1d(delta)


def _run_lm(prob: _Problem, config: SolverConfig, bounds, first=None) -> SolveReport:
    state = prob.initial_state()
    cost, breakdown = prob.cost(state)
    report = SolveReport(initial_cost=cost, final_cost=cost, cost_breakdown=breakdown,
                         active_variables=len(prob.active), converged=False)
    report.cost_history.append(cost)
    if prob.ncols == 0:
        report.converged = True
        return report
    lam = config.lambda_init
    for _ in range(config.max_iterations):
        if cost <= config.abs_tol:
            report.converged = True
            break
        r, J = first if first is not None else prob.linearize(state)
        first = None
        H = (J.T @ J).tocsc()
        g = J.T @ r
        diag = np.maximum(H.diagonal(), 1e-9)
        report.iterations += 1
        accepted = False
        while lam <= config.lambda_max:
            A = (H + sp.diags(lam * diag)).tocsc()
            delta = spla.spsolve(A, -g)
            if not np.all(np.isfinite(delta)):
                lam *= config.lambda_up
                continue
            cand = prob.retract(state, delta, bounds)
            new_cost, new_breakdown = prob.cost(cand)
            if new_cost < cost:
                accepted = True
                break
            lam *= config.lambda_up
        if not accepted:
            report.converged = True
            break
        decrease = cost - new_cost
        if decrease < config.abs_tol or decrease < config.rel_tol * cost:
            # negligible step: stop at the current fixed point so re-solving is a no-op
            report.converged = True
            break
        state, cost, breakdown = cand, new_cost, new_breakdown
        report.cost_history.append(cost)
        lam = max(lam * config.lambda_down, 1e-15)
    report.final_cost = cost
    report.cost_breakdown = breakdown
    prob.write_back(state)
    return report


def _prepare(graph: FactorGraph, factor_ids, active, config: SolverConfig, policy: str):
    frozen: list = []
    while True:
        prob = _Problem(graph, factor_ids, active)
        if prob.ncols == 0:
            return prob, frozen, None
        r, J = prob.linearize(prob.initial_state())
        bad = _deficient(prob.block_ranks((J.T @ J).tocsr()), config)
        if not bad:
            return prob, frozen, (r, J)
        if policy == "raise":
            raise RankDeficientError(bad)
        frozen.extend(bad)
        bad_set = set(bad)
        active = [k for k in active if k not in bad_set]


def solve(graph: FactorGraph, config: Optional[SolverConfig] = None) -> SolveReport:
    """Levenberg-Marquardt over every factor and free variable."""
    config = config or SolverConfig()
    if graph.values and not any(f.kind == "prior" for f in graph.factors):
        raise ValueError("graph is not gauge-fixed: no prior factor")
    graph._initialize_anchors()
    graph._pending = []
    active = sorted(k for k in graph.values if k not in graph.fixed and k not in graph._deferred)
    prob, frozen, first = _prepare(graph, graph._solvable_factors(), active, config, config.rank_policy)
    report = _run_lm(prob, config, graph.scale_bounds, first)
    report.frozen = frozen
    graph._provisional -= set(prob.active)
    graph._solved = True
    graph._batches = 0
    return report


def _window(graph: FactorGraph, factor_ids: Iterable[int], width: int) -> set:
    touched = {k for i in factor_ids for k in graph.factors[i].keys}
    active: set = set()
    for k in touched:
        if k.kind == ANCHOR:
            active.add(k)
            continue
        last = k.index if k.kind == POSE else k.index + 1
        for i in range(max(last - width, 0), last + 1):
            active.add(VariableKey.pose(k.agent, i))
            if i > 0:
                active.add(VariableKey.scale(k.agent, i - 1))
    return {k for k in active if k in graph.values and k not in graph.fixed}


def solve_incremental(graph: FactorGraph, config: Optional[SolverConfig] = None,
                      new_factor_batch: Optional[Sequence[int]] = None) -> SolveReport:
    """Windowed re-linearization around ``new_factor_batch``.

    Without an explicit batch, the factors added since the last solve are
    used.  Every ``config.full_batch_every`` batches (and on the first call)
    a full batch solve is run instead.
    """
    config = config or SolverConfig()
    batch = graph.take_new_factors() if new_factor_batch is None else list(new_factor_batch)
    if not batch:
        return SolveReport(mode="noop", converged=True)
    graph._batches += 1
    released = graph._initialize_anchors()
    if not graph._solved or released or graph._batches >= config.full_batch_every:
        freeze_cfg = SolverConfig(**{**config.__dict__, "rank_policy": "freeze"})
        report = solve(graph, freeze_cfg)
        report.mode = "full"
        return report
    active = sorted(_window(graph, batch, config.incremental_window) - graph._deferred)
    aset = set(active)
    touching = {i for k in aset for i in graph._key_factors.get(k, ())}
    deferred = graph._deferred
    factor_ids = sorted(i for i in touching if not any(k in deferred for k in graph.factors[i].keys))
    prob, frozen, first = _prepare(graph, factor_ids, active, config, "freeze")
    report = _run_lm(prob, config, graph.scale_bounds, first)
    report.mode = "incremental"
    report.frozen = frozen
    graph._provisional -= set(prob.active)
    return report
