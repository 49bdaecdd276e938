"""Matplotlib figures written next to the CSV exports (Agg backend, no display)."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps repeated renders byte-identical
_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    fig.savefig(tmp, format="png", dpi=110, metadata=_PNG_META)
    plt.close(fig)
    os.replace(tmp, path)


def plot_sweep(rows: Sequence[dict], path, title: Optional[str] = None) -> None:
    """RMSE mean +- std per method along the sweep axis (``rows`` as in the sweep CSV)."""
    if not rows:
        return
    axis = rows[0]["axis"]
    methods = list(dict.fromkeys(r["method"] for r in rows))
    values = list(dict.fromkeys(r["value"] for r in rows))
    categorical = any(isinstance(v, str) for v in values)
    x = np.arange(len(values), dtype=float) if categorical else np.array(values, dtype=float)
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    if categorical:
        width = 0.8 / len(methods)
        for k, m in enumerate(methods):
            mr = {r["value"]: r for r in rows if r["method"] == m}
            mean = [mr[v]["rmse_mean"] if v in mr else np.nan for v in values]
            std = [mr[v]["rmse_std"] if v in mr else 0.0 for v in values]
            ax.bar(x + (k - (len(methods) - 1) / 2) * width, mean, width, yerr=std, capsize=3, label=m)
        ax.set_xticks(x)
        ax.set_xticklabels([str(v) for v in values])
    else:
        for m in methods:
            mr = sorted((r for r in rows if r["method"] == m), key=lambda r: float(r["value"]))
            xs = np.array([float(r["value"]) for r in mr])
            mean = np.array([r["rmse_mean"] for r in mr])
            std = np.array([r["rmse_std"] for r in mr])
            ax.errorbar(xs, mean, yerr=std, marker="o", capsize=3, label=m)
    ax.set_xlabel(axis.replace("_", " "))
    ax.set_ylabel("RMSE [m]")
    ax.grid(True, alpha=0.3)
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def plot_trajectories(estimates: dict, path, truths: Optional[dict] = None, anchors: Optional[dict] = None,
                      true_anchors: Optional[dict] = None, title: Optional[str] = None) -> None:
    """Top-down view of estimated (and optionally true) trajectories and anchors.

    ``estimates``/``truths`` map agent -> (N, 2+) position arrays.
    """
    fig, ax = plt.subplots(figsize=(6.4, 5.0))
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for k, (agent, p) in enumerate(sorted(estimates.items())):
        c = colors[k % len(colors)]
        p = np.asarray(p)
        ax.plot(p[:, 0], p[:, 1], color=c, lw=1.2, label=f"agent {agent}")
        if truths and agent in truths:
            q = np.asarray(truths[agent])
            ax.plot(q[:, 0], q[:, 1], color=c, lw=0.8, ls="--", alpha=0.7)
    if anchors:
        a = np.array([anchors[i] for i in sorted(anchors)])
        ax.scatter(a[:, 0], a[:, 1], marker="^", color="k", label="anchors")
    if true_anchors:
        a = np.array([true_anchors[i] for i in sorted(true_anchors)])
        ax.scatter(a[:, 0], a[:, 1], marker="x", color="r", label="true anchors")
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize="small")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)
