"""Layer pruning and normalized feature distillation for toy denoising U-Nets."""

from .criteria import CriterionKind, LayerTable, ProxyScore, build_table
from .diffusion import GaussianMixtureData, NoiseSchedule, make_batch, make_calibration
from .distill import DistillConfig, train
from .knapsack import Instance, Solution, solve, solve_dp, solve_exhaustive, solve_greedy
from .pruner import PruningPlan, prune, report
from .toynet import LayerId, Network, NetworkSpec, Stage, build

__version__ = "0.1.0"

__all__ = [
    "CriterionKind",
    "LayerTable",
    "ProxyScore",
    "build_table",
    "GaussianMixtureData",
    "NoiseSchedule",
    "make_batch",
    "make_calibration",
    "DistillConfig",
    "train",
    "Instance",
    "Solution",
    "solve",
    "solve_dp",
    "solve_exhaustive",
    "solve_greedy",
    "PruningPlan",
    "prune",
    "report",
    "LayerId",
    "Network",
    "NetworkSpec",
    "Stage",
    "build",
]
