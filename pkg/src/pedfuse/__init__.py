"""Opportunistic pedestrian positioning on a factor graph.

Motion (PDR steps or RoNIN-style velocities) with per-step adaptive scale,
coarse BLE/WiFi loop closures and Cauchy-weighted UWB ranges to anchors
whose positions are estimated jointly, solved with sparse
Levenberg-Marquardt in batch or incremental mode.
"""

__version__ = "0.1.0"

from .factors import Cauchy, FactorWeight, FactorWeights, RangeMeasurement, StepMeasurement, VelocityMeasurement
from .graph import FactorGraph, RankDeficientError, SolveReport, SolverConfig, VariableKey, solve, solve_incremental
from .manifold import Pose
from .metrics import compute_rmse
from .pipeline import PipelineOptions, run_solve

__all__ = [
    "Cauchy",
    "FactorGraph",
    "FactorWeight",
    "FactorWeights",
    "PipelineOptions",
    "Pose",
    "RangeMeasurement",
    "RankDeficientError",
    "SolveReport",
    "SolverConfig",
    "StepMeasurement",
    "VariableKey",
    "VelocityMeasurement",
    "compute_rmse",
    "run_solve",
    "solve",
    "solve_incremental",
]
