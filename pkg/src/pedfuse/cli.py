"""Command-line pipeline: simulate -> solve -> eval, plus jacobian-check and sweep.

Every subcommand writes its artifacts atomically under ``--out``.  Failures
print a single JSON error record on stderr and exit non-zero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, build_options, layered
from .logio import (
    anchors_from_records,
    read_records,
    trajectories_from_records,
    write_records,
    write_text_atomic,
)
from .metrics import MetricsReport, NoAssociationError, anchor_rmse, compute_rmse, mean_std, truth_to_graph_frame

log = logging.getLogger("pedfuse")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _on_off(v: str) -> bool:
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return v == "on"


def _int_list(v: str) -> list:
    """``0..4`` or ``0,1,2``."""
    if ".." in v:
        lo, hi = v.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(x) for x in v.split(",") if x]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> dict:
    from .sim import generate, preset

    sc = preset(args.preset, args.seed)
    if args.nlos_prob is not None:
        from dataclasses import replace

        sc = replace(sc, noise=replace(sc.noise, nlos_prob=args.nlos_prob))
    out = generate(sc)
    d = Path(args.out)
    write_records(d / "log.jsonl", out.log)
    write_records(d / "truth.jsonl", out.truth)
    counts: dict = {}
    for r in out.log:
        counts[r.type] = counts.get(r.type, 0) + 1
    summary = {"preset": args.preset, "seed": args.seed, "records": dict(sorted(counts.items())),
               "log": str(d / "log.jsonl"), "truth": str(d / "truth.jsonl")}
    return summary


def _pipeline_cli(args) -> dict:
    p: dict = {}
    for name in ("motion", "anchors", "init_scale", "loop_mode", "incremental"):
        v = getattr(args, name, None)
        if v is not None:
            p[name] = v
    if getattr(args, "adaptive", None) is not None:
        p["adaptive"] = args.adaptive
    return {"pipeline": p} if p else {}


def _trajectory_csv(records: list, truth_records: Optional[list] = None) -> str:
    lines = ["kind,agent,t,x,y,z"]
    for r in records:
        if r.type == "pose":
            lines.append("estimate,%d,%.6f,%.6f,%.6f,%.6f" % (r.agent, r.t, *r.payload["p"]))
        elif r.type == "anchor":
            lines.append("anchor,%d,,%.6f,%.6f,%.6f" % (r.payload["id"], *r.payload["p"]))
    if truth_records:
        truths = trajectories_from_records(truth_records, "groundtruth")
        if truths:
            ref = truths[min(truths)]
            for a, tr in truths.items():
                for t, p in zip(tr.t, truth_to_graph_frame(tr.p, ref)):
                    lines.append("truth,%d,%.6f,%.6f,%.6f,%.6f" % (a, t, *p))
            for i, p in sorted(anchors_from_records(truth_records).items()):
                q = truth_to_graph_frame(p[None], ref)[0]
                lines.append("true_anchor,%d,,%.6f,%.6f,%.6f" % (i, *q))
    return "\n".join(lines) + "\n"


def cmd_solve(args) -> dict:
    from .pipeline import run_solve
    from .plotting import plot_trajectories

    cfg = layered(args.config, args.set, _pipeline_cli(args))
    options = build_options(cfg)
    records = read_records(args.log)
    truth_records = read_records(args.truth) if args.truth else None
    if args.anchor_noise_sigma is not None:
        if truth_records is None:
            raise ConfigError("--anchor-noise-sigma needs --truth to perturb the true anchor positions")
        from dataclasses import replace

        from .experiments import anchor_perturbation

        truths = trajectories_from_records(truth_records, "groundtruth")
        true_a = anchors_from_records(truth_records)
        ids = sorted(true_a)
        offs = anchor_perturbation(args.seed, max(ids) + 1 if ids else 0)
        ref = truths[min(truths)]
        init = {i: truth_to_graph_frame(true_a[i][None], ref)[0] + args.anchor_noise_sigma * offs[i] for i in ids}
        options = replace(options, anchor_init=init)
    res = run_solve(records, options)
    d = Path(args.out)
    out_records = res.records()
    write_records(d / "trajectory.jsonl", out_records)
    report = {
        "final": res.report.to_dict(),
        "solves": len(res.reports),
        "loops": len(res.loops),
        "factors": dict(sorted(res.graph.factor_counts().items())),
        "scale_mean": {str(a): float(np.mean(res.graph.scales(a))) for a in res.graph.agents
                       if len(res.graph.scales(a))},
    }
    write_text_atomic(d / "report.json", _dump(report))
    write_text_atomic(d / "trajectory.csv", _trajectory_csv(out_records, truth_records))
    est = {a: np.array([p.translation for _, p in res.graph.trajectory(a)]) for a in res.graph.agents}
    truths_xy = None
    true_anchors = None
    if truth_records:
        tr = trajectories_from_records(truth_records, "groundtruth")
        if tr:
            ref = tr[min(tr)]
            truths_xy = {a: truth_to_graph_frame(t.p, ref) for a, t in tr.items()}
            true_anchors = {i: truth_to_graph_frame(p[None], ref)[0]
                            for i, p in anchors_from_records(truth_records).items()}
    plot_trajectories(est, d / "trajectory.png", truths_xy, res.graph.anchors(), true_anchors,
                      title=f"{options.motion} ({'adaptive' if options.adaptive else 'fixed'} scale)")
    return {"trajectory": str(d / "trajectory.jsonl"), "report": str(d / "report.json"),
            "final_cost": res.report.final_cost, "converged": res.report.converged}


def cmd_eval(args) -> dict:
    est_records = read_records(args.estimate)
    truth_records = read_records(args.truth)
    estimates = trajectories_from_records(est_records, "pose")
    truths = trajectories_from_records(truth_records, "groundtruth")
    if not estimates:
        raise NoAssociationError(f"{args.estimate}: no pose records")
    if not truths:
        raise NoAssociationError(f"{args.truth}: no groundtruth records")
    per_run, rigid = [], []
    for a in sorted(estimates):
        if a not in truths:
            continue
        per_run.append(compute_rmse(estimates[a], truths[a], args.alignment))
        rigid.append(compute_rmse(estimates[a], truths[a], "rigid"))
    if not per_run:
        raise NoAssociationError("no agent in the estimate has ground truth")
    mean, std = mean_std(per_run)
    # scale error from the last estimated scale of each agent
    scale_err = []
    true_scale = {r.agent: r.payload.get("s") for r in truth_records if r.type == "groundtruth"}
    for a in sorted(estimates):
        s_est = [r.payload.get("s") for r in est_records if r.type == "pose" and r.agent == a]
        s_est = [s for s in s_est if s is not None]
        if s_est and true_scale.get(a):
            scale_err.append(abs(s_est[-1] - true_scale[a]) / true_scale[a])
    a_rmse = None
    est_anchors = anchors_from_records(est_records)
    true_anchors = anchors_from_records(truth_records)
    if est_anchors and true_anchors:
        a_rmse = anchor_rmse(est_anchors, true_anchors, truths[min(truths)])
    breakdown = {}
    if args.report:
        rep = json.loads(Path(args.report).read_text(encoding="utf-8"))
        breakdown = rep.get("final", {}).get("cost_breakdown", {})
    metrics = MetricsReport(mean, std, per_run, rigid, float(np.mean(scale_err)) if scale_err else None,
                            a_rmse, breakdown)
    body = metrics.to_dict()
    body["alignment"] = args.alignment
    d = Path(args.out)
    write_text_atomic(d / "metrics.json", _dump(body))
    return body


def cmd_jacobian_check(args) -> dict:
    from .jacobian_check import run_suite

    rep = run_suite(args.configurations, args.seed)
    body = rep.to_dict()
    if args.out:
        write_text_atomic(Path(args.out) / "jacobian_check.json", _dump(body))
    if not rep.passed:
        raise RuntimeError("jacobian check failed: " + json.dumps(body["factors"], sort_keys=True))
    return body


def cmd_sweep(args) -> dict:
    from .experiments import cells_to_csv, plan, run_sweep
    from .plotting import plot_sweep

    cfg = layered(args.config, args.set)
    values = None
    if args.values:
        values = [v for v in args.values.split(",")] if args.axis == "loop_mode" else \
            [float(v) if "." in v else int(v) for v in args.values.split(",")]
    if args.axis == "anchors" and args.anchors_range:
        values = _int_list(args.anchors_range)
    seeds = list(range(args.seed, args.seed + args.runs)) if args.runs else None
    methods = args.methods.split(",") if args.methods else None
    p = plan(args.axis, seeds=seeds, seed=args.seed, values=values, methods=methods,
             incremental=not args.batch, solver=cfg.get("solver") or None)
    d = Path(args.out)

    def save_cell(cell):
        name = f"{cell.axis}_{cell.value}_{cell.method}".replace("/", "_")
        write_text_atomic(d / "cells" / f"{name}.json", _dump({**cell.summary(),
                                                                "per_run_rmse": [r.rmse for r in cell.runs]}))

    cells = run_sweep(p, workers=args.workers, on_cell=save_cell)
    csv_path = d / f"sweep_{args.axis}.csv"
    write_text_atomic(csv_path, cells_to_csv(cells))
    plot_sweep([c.summary() for c in cells], d / f"sweep_{args.axis}.png", title=f"{args.axis} sweep")
    return {"csv": str(csv_path), "cells": len(cells), "seeds": list(p.seeds)}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Usage errors become the same JSON error record as runtime failures."""

    def error(self, message):
        err = {"error": "UsageError", "message": message, "command": self.prog}
        sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="pedfuse", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("--log-level", default="WARNING", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="YAML or JSON config file")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="config override, e.g. solver.max_iterations=50 (repeatable)")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("simulate", help="generate a measurement log and ground truth from a preset")
    p.add_argument("--preset", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--nlos-prob", type=float, default=None, help="override the preset's NLOS probability")
    common(p, config=False)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("solve", help="build and optimize the factor graph for a log")
    p.add_argument("--log", required=True)
    p.add_argument("--truth", help="ground truth, overlaid in the exports")
    p.add_argument("--motion", choices=("pdr", "ronin"))
    p.add_argument("--adaptive", type=_on_off, metavar="{on,off}")
    p.add_argument("--anchors", type=int, metavar="N", help="use only the first N anchor ids")
    p.add_argument("--init-scale", type=float, metavar="S")
    p.add_argument("--loop-mode", choices=("none", "proximity", "coarse"))
    p.add_argument("--incremental", action="store_true", default=None)
    p.add_argument("--anchor-noise-sigma", type=float, metavar="S",
                   help="initialize anchors at truth + Gaussian noise (needs --truth)")
    p.add_argument("--seed", type=int, default=0, help="seed of the anchor perturbation")
    common(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("eval", help="RMSE of an estimated trajectory against ground truth")
    p.add_argument("--estimate", required=True, help="trajectory.jsonl written by solve")
    p.add_argument("--truth", required=True)
    p.add_argument("--report", help="report.json from solve (adds the cost breakdown)")
    p.add_argument("--alignment", choices=("first_pose", "rigid"), default="first_pose")
    common(p, config=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("jacobian-check", help="finite-difference audit of all factor Jacobians")
    p.add_argument("--configurations", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional output directory for jacobian_check.json")
    p.set_defaults(func=cmd_jacobian_check)

    p = sub.add_parser("sweep", help="run a preset grid and write CSV + figure")
    p.add_argument("--axis", required=True, choices=("anchors", "init_scale", "anchor_noise", "loop_mode", "nlos"))
    p.add_argument("--anchors", dest="anchors_range", metavar="RANGE", help="anchor counts, e.g. 0..4")
    p.add_argument("--values", help="comma-separated axis values (default: the preset's grid)")
    p.add_argument("--methods", help="comma-separated method names (default: all for the axis)")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--runs", type=int, help="number of seeds (default: the preset's run count)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--batch", action="store_true", help="batch instead of incremental solves")
    common(p)
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
        return 1
    sys.stdout.write(_dump(result))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
