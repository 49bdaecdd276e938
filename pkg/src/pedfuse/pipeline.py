"""Measurement log -> factor graph -> solved trajectory."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .factors import FactorWeights
from .frontend import LoopParams, find_inter_agent_loops, find_loops
from .graph import FactorGraph, SolveReport, SolverConfig, VariableKey, solve, solve_incremental
from .logio import (
    Trajectory,
    anchor_record,
    pose_record,
    to_fingerprint,
    to_step,
    to_velocity,
)

log = logging.getLogger(__name__)

DEFAULT_INIT_SCALE = {"pdr": 0.7, "ronin": 1.0}


@dataclass
class PipelineOptions:
    motion: str = "pdr"  # pdr | ronin
    adaptive: bool = True
    init_scale: Optional[float] = None
    loop_mode: str = "coarse"  # none | proximity | coarse
    loop_radius: float = 2.0
    loop_sources: tuple = ("ble", "wifi")
    loop_params: LoopParams = field(default_factory=LoopParams)
    anchors: Optional[int] = None  # use only the first N anchor ids
    anchor_init: Optional[dict] = None  # id -> initial position override
    range_window: float = 0.05
    robust: bool = True
    incremental: bool = False
    incremental_period: float = 4.0
    weights: FactorWeights = field(default_factory=FactorWeights)
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.motion not in ("pdr", "ronin"):
            raise ValueError(f"motion must be 'pdr' or 'ronin', got {self.motion!r}")
        if self.loop_mode not in ("none", "proximity", "coarse"):
            raise ValueError(f"loop_mode must be none, proximity or coarse, got {self.loop_mode!r}")

    @property
    def scale0(self) -> float:
        return DEFAULT_INIT_SCALE[self.motion] if self.init_scale is None else float(self.init_scale)

    @property
    def radius(self) -> float:
        return 0.0 if self.loop_mode == "proximity" else self.loop_radius


@dataclass
class SolveResult:
    graph: FactorGraph
    report: SolveReport
    reports: list
    loops: list

    def trajectories(self) -> dict:
        return {a: Trajectory.from_poses(self.graph.trajectory(a)) for a in self.graph.agents}

    def records(self) -> list:
        out = []
        for a in self.graph.agents:
            scales = self.graph.scales(a)
            for i, (t, pose) in enumerate(self.graph.trajectory(a)):
                s = scales[i - 1] if i > 0 else (scales[0] if len(scales) else None)
                out.append(pose_record(t, a, pose, "pose", s))
        for aid, p in self.graph.anchors().items():
            out.append(anchor_record(aid, p))
        return out


def _weights(options: PipelineOptions) -> FactorWeights:
    w = options.weights
    if not options.robust and w.range.robust_kernel is not None:
        from .factors import FactorWeight

        w = FactorWeights(w.motion, w.scale, w.ble_loop, w.wifi_loop,
                          FactorWeight(w.range.information, None), w.prior)
    return w


def _start_time(motion: list, is_velocity: bool) -> float:
    if is_velocity:
        return motion[0].t - float(motion[0].payload["dt"])
    if len(motion) > 1:
        return motion[0].t - (motion[1].t - motion[0].t)
    return motion[0].t - 0.5


def _allowed_anchors(records: list, options: PipelineOptions) -> set:
    ids = sorted({int(r.payload["anchor"]) for r in records if r.type == "range"})
    if options.anchors is not None:
        ids = ids[: options.anchors]
    return set(ids)


class _Builder:
    def __init__(self, records: list, options: PipelineOptions):
        self.opt = options
        self.graph = FactorGraph(_weights(options), initial_scale=options.scale0, adaptive=options.adaptive)
        mtype = "velocity" if options.motion == "ronin" else "step"
        self.motion = {}
        self.ranges = {}
        self.scans = {}
        allowed = _allowed_anchors(records, options)
        for r in records:
            if r.type == mtype:
                self.motion.setdefault(r.agent, []).append(r)
            elif r.type == "range" and int(r.payload["anchor"]) in allowed:
                self.ranges.setdefault(r.agent, []).append(r)
            elif r.type in ("ble_scan", "wifi_scan") and r.type.split("_")[0] in options.loop_sources:
                self.scans.setdefault(r.agent, []).append(r)
        for d in (self.motion, self.ranges, self.scans):
            for v in d.values():
                v.sort(key=lambda r: r.t)
        self.cursor = {a: 0 for a in self.motion}
        self.range_cursor = {a: 0 for a in self.ranges}
        self.loops_added: set = set()
        self.loops: list = []
        for a in sorted(self.motion):
            self.graph.add_agent(a, _start_time(self.motion[a], mtype == "velocity"))
        for aid, p in sorted((options.anchor_init or {}).items()):
            if aid in allowed:
                self.graph.set_anchor(aid, p)

    def end_time(self) -> float:
        ts = [v[-1].t for v in self.motion.values() if v]
        return max(ts) if ts else 0.0

    def add_until(self, t_end: float) -> None:
        conv = to_velocity if self.opt.motion == "ronin" else to_step
        for a, recs in sorted(self.motion.items()):
            i = self.cursor[a]
            while i < len(recs) and recs[i].t <= t_end:
                self.graph.add_step(a, conv(recs[i]))
                i += 1
            self.cursor[a] = i
        # ranges attach to the nearest pose once a pose exists past their time
        for a, recs in sorted(self.ranges.items()):
            if a not in self.motion:
                continue
            times = self.graph.pose_times(a)
            i0 = self.range_cursor[a]
            i = i0
            horizon = times[-1] + self.opt.range_window
            while i < len(recs) and recs[i].t <= min(t_end, horizon):
                i += 1
            if i > i0:
                rt = np.array([r.t for r in recs[i0:i]])
                idx = np.clip(np.searchsorted(times, rt), 1, max(len(times) - 1, 1))
                left = np.abs(rt - times[idx - 1]) <= np.abs(times[idx] - rt)
                idx = np.where(left, idx - 1, idx)
                for r, k in zip(recs[i0:i], idx):
                    if abs(times[k] - r.t) <= self.opt.range_window:
                        self.graph.add_range(VariableKey.pose(a, int(k)), int(r.payload["anchor"]), float(r.payload["d"]))
            self.range_cursor[a] = i
        if self.opt.loop_mode != "none":
            self._add_loops(t_end)

    def _add_loops(self, t_end: float) -> None:
        agents = sorted(a for a in self.scans if a in self.motion)
        fps = {a: [to_fingerprint(r) for r in self.scans[a] if r.t <= t_end] for a in agents}
        times = {a: self.graph.pose_times(a) for a in agents}
        cands = []
        for a in agents:
            cands.extend(find_loops(fps[a], times[a], self.opt.loop_params, agent=a))
        for i, a in enumerate(agents):
            for b in agents[i + 1:]:
                cands.extend(find_inter_agent_loops(fps[a], times[a], a, fps[b], times[b], b, self.opt.loop_params))
        for c in cands:
            ident = (c.agent_i, c.step_i, c.agent_j, c.step_j, c.source_kind)
            if ident in self.loops_added:
                continue
            self.loops_added.add(ident)
            self.loops.append(c)
            self.graph.add_loop(VariableKey.pose(c.agent_i, c.step_i), VariableKey.pose(c.agent_j, c.step_j),
                                self.opt.radius, source=c.source_kind)


def build_graph(records: list, options: PipelineOptions) -> tuple[FactorGraph, list]:
    b = _Builder(records, options)
    b.add_until(np.inf)
    return b.graph, b.loops


def run_solve(records: list, options: Optional[PipelineOptions] = None) -> SolveResult:
    """Build the graph from ``records`` and optimize it (batch or incremental)."""
    options = options or PipelineOptions()
    b = _Builder(records, options)
    reports = []
    if options.incremental:
        t = min(r[0].t for r in b.motion.values())
        end = b.end_time()
        while t < end:
            t += options.incremental_period
            b.add_until(t)
            reports.append(solve_incremental(b.graph, options.solver))
        b.add_until(np.inf)
    else:
        b.add_until(np.inf)
    final = solve(b.graph, options.solver)
    reports.append(final)
    return SolveResult(b.graph, final, reports, b.loops)
