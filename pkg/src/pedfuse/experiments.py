"""Preset sweeps behind the ``sweep`` subcommand.

Each sweep is a grid of cells (axis value x method); a cell runs one
deterministic pipeline per seed and aggregates the RMSE.  Runs are
independent, so they can be spread over worker processes; results are
always collected in task order, which keeps outputs identical regardless
of the worker count.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .factors import Cauchy, FactorWeight, FactorWeights
from .graph import SolverConfig
from .logio import Trajectory, anchors_from_records, trajectories_from_records
from .metrics import compute_rmse, mean_std, pooled_rmse, anchor_rmse, truth_to_graph_frame
from .pipeline import PipelineOptions, run_solve
from .sim import NoiseModel, Scenario, generate, preset

log = logging.getLogger(__name__)

AXES = ("anchors", "init_scale", "anchor_noise", "loop_mode", "nlos")
_MIN_SIGMA = 1e-3
_MIN_TRANS = 0.02  # m


def sensor_weights(noise: NoiseModel, motion: str, *, ronin_hz: float = 5.0, step_period: float = 0.5,
                   robust: bool = True, cauchy_c: float = 1.0) -> FactorWeights:
    """Information matrices matched to a simulator noise model.

    PDR: per-step heading noise on the rotation; the simulated step vector is
    exact in the pre-step frame, so its translation sigma sits at the 2 cm floor.
    RoNIN: heading drift accumulated over one sample, and the velocity noise
    integrated over the sample (floored at 2 cm).
    """
    base = FactorWeights()
    if motion == "pdr":
        rot = max(noise.heading_sigma, _MIN_SIGMA)
        trans = _MIN_TRANS
    else:
        dt = 1.0 / ronin_hz
        rot = max(noise.heading_sigma * np.sqrt(dt / step_period), _MIN_SIGMA)
        trans = max(noise.velocity_sigma * dt, _MIN_TRANS)
    info = np.diag([rot ** -2] * 3 + [trans ** -2] * 3)
    rng_sigma = max(noise.range_sigma, 0.01)
    kernel = Cauchy(cauchy_c) if robust else None
    return replace(base, motion=FactorWeight(info), range=FactorWeight.isotropic(1, rng_sigma ** -2, kernel))


# ---------------------------------------------------------------------------
# single runs
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    rmse: float
    rigid_rmse: float
    scale: Optional[float] = None
    anchor_rmse: Optional[float] = None
    aligned_anchor_rmse: Optional[float] = None
    iterations: int = 0
    final_cost: float = 0.0


@dataclass(frozen=True)
class Method:
    name: str
    motion: str = "pdr"
    adaptive: bool = True
    init_scale: Optional[float] = None
    loop_mode: str = "none"
    loop_sources: tuple = ("ble", "wifi")
    robust: bool = True
    baseline: str = ""  # "" | trilateration


@dataclass(frozen=True)
class Task:
    scenario: Scenario
    method: Method
    anchors: Optional[int] = None
    anchor_noise: float = 0.0
    incremental: bool = True
    solver: Optional[dict] = None


def _true_anchors(truth_records: list, truth0: Trajectory) -> dict:
    true = anchors_from_records(truth_records)
    return {i: truth_to_graph_frame(p[None], truth0)[0] for i, p in true.items()}


def anchor_perturbation(seed: int, count: int) -> np.ndarray:
    """Unit-variance horizontal offsets, shared by every sigma of a seed.

    Height is left alone: with poses and anchors in one plane the range is
    stationary in the anchor's height, so no solver can undo a vertical offset.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, 0xA2C4]))
    return np.column_stack([rng.normal(size=(count, 2)), np.zeros(count)])


def trilaterate(records: list, anchors: dict, agent: int = 0, z: float = 0.0, iterations: int = 10) -> Trajectory:
    """Per-epoch planar least-squares fix against fixed anchor positions.

    Epochs are UWB timestamps with ranges to at least three known anchors;
    Gauss-Newton is seeded at the anchors' centroid.
    """
    epochs: dict = {}
    for r in records:
        if r.type == "range" and r.agent == agent and int(r.payload["anchor"]) in anchors:
            epochs.setdefault(r.t, {})[int(r.payload["anchor"])] = float(r.payload["d"])
    ts = sorted(t for t, obs in epochs.items() if len(obs) >= 3)
    if not ts:
        return Trajectory(np.zeros(0), np.zeros((0, 3)), np.zeros(0))
    ids = sorted(anchors)
    A = np.array([anchors[i] for i in ids])
    D = np.full((len(ts), len(ids)), np.nan)
    for n, t in enumerate(ts):
        for j, i in enumerate(ids):
            D[n, j] = epochs[t].get(i, np.nan)
    mask = ~np.isnan(D)
    D = np.nan_to_num(D)
    dz2 = (z - A[:, 2]) ** 2
    X = np.tile(A[:, :2].mean(axis=0), (len(ts), 1))
    for _ in range(iterations):
        diff = X[:, None, :] - A[None, :, :2]
        n = np.sqrt(np.sum(diff ** 2, axis=2) + dz2[None, :])
        e = np.where(mask, n - D, 0.0)
        J = np.where(mask[:, :, None], diff / np.maximum(n, 1e-9)[:, :, None], 0.0)
        H = np.einsum("nki,nkj->nij", J, J) + 1e-9 * np.eye(2)
        X = X - np.linalg.solve(H, np.einsum("nki,nk->ni", J, e)[:, :, None])[:, :, 0]
    P = np.column_stack([X, np.full(len(ts), z)])
    return Trajectory(np.array(ts), P, np.zeros(len(ts)))


def absolute_rmse(estimate: Trajectory, truth: Trajectory) -> float:
    """RMSE in the graph frame (truth re-expressed relative to its first pose), no alignment."""
    from .metrics import associate

    ie, it = associate(estimate, truth)
    err = estimate.p[ie] - truth_to_graph_frame(truth.p[it], truth)
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


def run_task(task: Task) -> RunResult:
    out = generate(task.scenario)
    truth = trajectories_from_records(out.truth, "groundtruth")
    m = task.method
    true_anchors = _true_anchors(out.truth, truth[min(truth)])
    if task.anchors is not None:
        true_anchors = {i: p for i, p in true_anchors.items() if i < task.anchors}
    init = None
    if task.anchor_noise > 0 or m.baseline == "trilateration":
        ids = sorted(true_anchors)
        offs = anchor_perturbation(task.scenario.seed, max(ids) + 1 if ids else 0)
        init = {i: true_anchors[i] + task.anchor_noise * offs[i] for i in ids}

    if m.baseline == "trilateration":
        est = trilaterate(out.log, init)
        return RunResult(absolute_rmse(est, truth[0]), absolute_rmse(est, truth[0]))

    noise = task.scenario.noise
    opts = PipelineOptions(
        motion=m.motion, adaptive=m.adaptive, init_scale=m.init_scale, loop_mode=m.loop_mode,
        loop_sources=m.loop_sources, anchors=task.anchors, anchor_init=init, robust=m.robust,
        incremental=task.incremental,
        weights=sensor_weights(noise, m.motion, ronin_hz=task.scenario.ronin_hz, robust=m.robust),
        solver=SolverConfig.from_config(task.solver or {}),
    )
    res = run_solve(out.log, opts)
    est = res.trajectories()
    rigid = [compute_rmse(est[a], truth[a], "rigid") for a in sorted(est) if a in truth]
    scales = np.concatenate([res.graph.scales(a) for a in res.graph.agents])
    world = {i: p for i, p in anchors_from_records(out.truth).items() if i in true_anchors}
    a0 = min(truth)
    a_rmse = anchor_rmse(res.graph.anchors(), world, truth[a0]) if world else None
    aligned = anchor_rmse(res.graph.anchors(), world, truth[a0], estimate0=est[a0]) if world and a0 in est else None
    return RunResult(
        rmse=pooled_rmse(est, truth),
        rigid_rmse=float(np.sqrt(np.mean(np.square(rigid)))),
        scale=float(np.mean(scales)) if len(scales) else None,
        anchor_rmse=a_rmse,
        aligned_anchor_rmse=aligned,
        iterations=sum(r.iterations for r in res.reports),
        final_cost=res.report.final_cost,
    )


def run_tasks(tasks: Sequence[Task], workers: int = 1) -> list:
    if workers <= 1 or len(tasks) <= 1:
        return [run_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_task, tasks, chunksize=1))


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

@dataclass
class Cell:
    axis: str
    value: object
    method: str
    runs: list = field(default_factory=list)

    @property
    def rmse(self) -> np.ndarray:
        return np.array([r.rmse for r in self.runs])

    def summary(self) -> dict:
        mean, std = mean_std(r.rmse for r in self.runs)
        rmean, rstd = mean_std(r.rigid_rmse for r in self.runs)
        scales = [r.scale for r in self.runs if r.scale is not None]
        arm = [r.anchor_rmse for r in self.runs if r.anchor_rmse is not None]
        aligned = [r.aligned_anchor_rmse for r in self.runs if r.aligned_anchor_rmse is not None]
        return {
            "axis": self.axis,
            "value": self.value,
            "method": self.method,
            "runs": len(self.runs),
            "rmse_mean": mean,
            "rmse_std": std,
            "rigid_rmse_mean": rmean,
            "rigid_rmse_std": rstd,
            "scale_mean": float(np.mean(scales)) if scales else None,
            "anchor_rmse_mean": float(np.mean(arm)) if arm else None,
            "aligned_anchor_rmse_mean": float(np.mean(aligned)) if aligned else None,
        }


@dataclass
class SweepPlan:
    axis: str
    values: tuple
    methods: tuple
    seeds: tuple
    make_task: Callable  # (value, method, seed) -> Task


ANCHOR_METHODS = (
    Method("adaptive_pdr", "pdr", True, 1.0),
    Method("adaptive_ronin", "ronin", True, 1.0),
    Method("pdr", "pdr", False, 0.7),
    Method("ronin", "ronin", False, 1.0),
)
SCALE_METHODS = (Method("adaptive_pdr", "pdr", True), Method("pdr", "pdr", False))
NOISE_METHODS = (Method("adaptive_pdr", "pdr", True, 0.7), Method("trilateration", baseline="trilateration"))
LOOP_SOURCES = {"ble+wifi": ("ble", "wifi"), "ble": ("ble",), "wifi": ("wifi",)}
NLOS_METHODS = (Method("cauchy", "pdr", True, 0.7, robust=True), Method("unweighted", "pdr", True, 0.7, robust=False))


def plan(axis: str, *, seeds: Optional[Sequence[int]] = None, seed: int = 0, values: Optional[Sequence] = None,
         methods: Optional[Sequence[str]] = None, incremental: bool = True, solver: Optional[dict] = None) -> SweepPlan:
    """Grid for one sweep axis; ``seeds`` defaults to the preset's run count from ``seed``."""
    if axis not in AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {', '.join(AXES)}")

    def seeds_for(sc: Scenario) -> tuple:
        return tuple(seeds) if seeds is not None else tuple(range(seed, seed + sc.runs))

    def pick(available: Sequence[Method]) -> tuple:
        if methods is None:
            return tuple(available)
        names = {m.name: m for m in available}
        unknown = [n for n in methods if n not in names]
        if unknown:
            raise ValueError(f"unknown methods {unknown} for axis {axis}; choose from {sorted(names)}")
        return tuple(names[n] for n in methods)

    base = dict(incremental=incremental, solver=solver)
    if axis == "anchors":
        sc = preset("anchors_sweep", seed)
        return SweepPlan(axis, tuple(values or sc.sweep_values), pick(ANCHOR_METHODS), seeds_for(sc),
                         lambda v, m, s: Task(preset("anchors_sweep", s), m, anchors=int(v), **base))
    if axis == "init_scale":
        sc = preset("scale_sweep", seed)

        def make(v, m, s):
            return Task(preset("scale_sweep", s), replace(m, init_scale=float(v)), **base)

        return SweepPlan(axis, tuple(values or sc.sweep_values), pick(SCALE_METHODS), seeds_for(sc), make)
    if axis == "anchor_noise":
        sc = preset("anchor_noise_sweep", seed)
        return SweepPlan(axis, tuple(values or sc.sweep_values), pick(NOISE_METHODS), seeds_for(sc),
                         lambda v, m, s: Task(preset("anchor_noise_sweep", s), m, anchor_noise=float(v), **base))
    if axis == "loop_mode":
        sc = preset("loops_only", seed)
        # RoNIN odometry as in the loop-closing runs; without ranging nothing metric constrains an
        # adaptive scale, so the velocity scale is calibrated (true value) and held fixed
        avail = tuple(Method(name, "ronin", False, 0.7, loop_sources=src) for name, src in LOOP_SOURCES.items())

        def make(v, m, s):
            # a fixed scale has no continuation to follow, so one batch solve suffices
            return Task(preset("loops_only", s), replace(m, loop_mode=str(v)), incremental=False, solver=solver)

        return SweepPlan(axis, tuple(values or sc.sweep_values), pick(avail), seeds_for(sc), make)
    sc = preset("anchors_sweep", seed)

    def make(v, m, s):
        scen = preset("anchors_sweep", s)
        return Task(replace(scen, noise=replace(scen.noise, nlos_prob=float(v))), m, anchors=4, **base)

    return SweepPlan(axis, tuple(values or (0.0, 0.2)), pick(NLOS_METHODS), seeds_for(sc), make)


def run_sweep(p: SweepPlan, workers: int = 1, on_cell: Optional[Callable] = None) -> list:
    """Run every (value, method, seed) task; returns cells in grid order."""
    keys = [(v, m) for v in p.values for m in p.methods]
    tasks = [p.make_task(v, m, s) for v, m in keys for s in p.seeds]
    results = run_tasks(tasks, workers)
    cells = []
    n = len(p.seeds)
    for c, (v, m) in enumerate(keys):
        cell = Cell(p.axis, v, m.name, results[c * n:(c + 1) * n])
        cells.append(cell)
        if on_cell is not None:
            on_cell(cell)
    return cells


CSV_FIELDS = ("axis", "value", "method", "runs", "rmse_mean", "rmse_std", "rigid_rmse_mean", "rigid_rmse_std",
              "scale_mean", "anchor_rmse_mean", "aligned_anchor_rmse_mean")


def cells_to_csv(cells: Sequence[Cell]) -> str:
    """One row per cell, fixed column order and float formatting."""
    lines = [",".join(CSV_FIELDS)]
    for c in cells:
        row = c.summary()
        out = []
        for k in CSV_FIELDS:
            v = row[k]
            if v is None:
                out.append("")
            elif isinstance(v, float):
                out.append(f"{v:.6f}")
            else:
                out.append(str(v))
        lines.append(",".join(out))
    return "\n".join(lines) + "\n"
