"""Adversarial attacks on point cloud completion models with density-adaptive budgets."""

from .attack import AttackConfig, AttackResult, random_noise_baseline, run_pointca
from .geometry import NeighborProfile, PointCloud, build_neighbor_profile, clip_to_budget
from .metrics import MetricReport, chamfer, emd, emd_exact, relative_asr, s_nre, t_nre
from .models import Classifier, CompletionModel, load_weights, save_weights

__all__ = [
    "AttackConfig",
    "AttackResult",
    "Classifier",
    "CompletionModel",
    "MetricReport",
    "NeighborProfile",
    "PointCloud",
    "build_neighbor_profile",
    "chamfer",
    "clip_to_budget",
    "emd",
    "emd_exact",
    "load_weights",
    "random_noise_baseline",
    "relative_asr",
    "run_pointca",
    "s_nre",
    "save_weights",
    "t_nre",
]

__version__ = "0.1.0"
