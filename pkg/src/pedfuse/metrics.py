"""Trajectory error metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .logio import Trajectory
from .manifold import rotz

ASSOC_WINDOW = 0.5


class NoAssociationError(ValueError):
    pass


def associate(estimate: Trajectory, truth: Trajectory, window: float = ASSOC_WINDOW):
    """Index pairs (estimate, truth) matched by nearest timestamp within ``window``."""
    if len(estimate) == 0 or len(truth) == 0:
        raise NoAssociationError("empty trajectory")
    order = np.argsort(truth.t, kind="stable")
    tt = truth.t[order]
    j = np.clip(np.searchsorted(tt, estimate.t), 1, max(len(tt) - 1, 1))
    if len(tt) == 1:
        j = np.zeros(len(estimate.t), dtype=int)
    else:
        left = np.abs(estimate.t - tt[j - 1]) <= np.abs(tt[j] - estimate.t)
        j = np.where(left, j - 1, j)
    ok = np.abs(tt[j] - estimate.t) <= window
    if not np.any(ok):
        raise NoAssociationError("no estimate/truth timestamps within the association window")
    return np.nonzero(ok)[0], order[j[ok]]


def align_first_pose(estimate: Trajectory, truth: Trajectory, i0: int, j0: int) -> np.ndarray:
    R = rotz(truth.yaw[j0] - estimate.yaw[i0])
    return (estimate.p - estimate.p[i0]) @ R.T + truth.p[j0]


def rigid_fit(P: np.ndarray, Q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation R and translation t minimizing sum |R p + t - q|^2 (Kabsch, no scale)."""
    mp, mq = P.mean(axis=0), Q.mean(axis=0)
    U, _, Vt = np.linalg.svd((P - mp).T @ (Q - mq))
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    return R, mq - R @ mp


def align_rigid(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Best rigid (rotation + translation, no scale) fit of P onto Q, applied to P."""
    R, t = rigid_fit(P, Q)
    return P @ R.T + t


def compute_rmse(estimate: Trajectory, truth: Trajectory, alignment: str = "first_pose") -> float:
    ie, it = associate(estimate, truth)
    if alignment == "first_pose":
        aligned = align_first_pose(estimate, truth, ie[0], it[0])[ie]
    elif alignment == "rigid":
        aligned = align_rigid(estimate.p[ie], truth.p[it])
    else:
        raise ValueError(f"unknown alignment {alignment!r}")
    err = aligned - truth.p[it]
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


def pooled_rmse(estimates: dict, truths: dict, alignment: str = "first_pose") -> float:
    """RMSE over the associated positions of all agents together."""
    sq, n = 0.0, 0
    for agent, est in estimates.items():
        if agent not in truths:
            continue
        ie, _ = associate(est, truths[agent])
        sq += compute_rmse(est, truths[agent], alignment) ** 2 * len(ie)
        n += len(ie)
    if n == 0:
        raise NoAssociationError("no agent could be associated with the truth")
    return float(np.sqrt(sq / n))


def truth_to_graph_frame(points: np.ndarray, truth0: Trajectory) -> np.ndarray:
    """World points expressed in the frame pinned by the first pose of ``truth0``."""
    R = rotz(truth0.yaw[0])
    return (np.asarray(points, dtype=float) - truth0.p[0]) @ R


def anchor_rmse(estimated: dict, true: dict, truth0: Trajectory, planar: bool = False,
                estimate0: Optional[Trajectory] = None) -> Optional[float]:
    """Anchor position RMSE against world-frame ``true`` positions.

    By default the comparison happens in the graph frame (truth re-expressed
    relative to the first pose of ``truth0``), so any error in the estimate's
    global heading shows up here too. Passing ``estimate0`` instead moves the
    estimated anchors with the rigid fit of that trajectory onto ``truth0``,
    which removes the global heading and leaves the map's own error.
    """
    ids = sorted(set(estimated) & set(true))
    if not ids:
        return None
    est = np.array([estimated[i] for i in ids], dtype=float)
    tru = np.array([true[i] for i in ids], dtype=float)
    if estimate0 is None:
        tru = truth_to_graph_frame(tru, truth0)
    else:
        ie, it = associate(estimate0, truth0)
        R, t = rigid_fit(estimate0.p[ie], truth0.p[it])
        est = est @ R.T + t
    err = est - tru
    if planar:
        err = err[:, :2]
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


def mean_std(values) -> tuple[float, float]:
    v = np.asarray(list(values), dtype=float)
    if len(v) == 0:
        return float("nan"), float("nan")
    return float(np.mean(v)), float(np.std(v))


@dataclass
class MetricsReport:
    rmse_mean: float
    rmse_std: float
    per_run_rmse: list
    rigid_rmse: list = field(default_factory=list)
    scale_error: Optional[float] = None
    anchor_rmse_m: Optional[float] = None
    cost_breakdown: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "rmse_m": {"mean": self.rmse_mean, "std": self.rmse_std},
            "per_run_rmse": list(self.per_run_rmse),
            "rigid_rmse": list(self.rigid_rmse),
            "scale_error": self.scale_error,
            "anchor_rmse_m": self.anchor_rmse_m,
            "cost_breakdown": dict(sorted(self.cost_breakdown.items())),
        }
