"""Neighbour-augmented Dragonnet for treatment-effect estimation, with
benchmark statistics for comparing estimators across realizations."""

from .data import Dataset, generate_ihdp_like, generate_synthetic, load_ihdp_csv, split_dataset
from .estimation import EffectEstimate, eps_ate, eps_pehe, estimate_effect, evaluate
from .model import TrainConfig, Variant, predict, train
from .neighbors import DistanceMetric, neighbor_averages

__all__ = [
    "Dataset", "DistanceMetric", "EffectEstimate", "TrainConfig", "Variant",
    "eps_ate", "eps_pehe", "estimate_effect", "evaluate", "generate_ihdp_like",
    "generate_synthetic", "load_ihdp_csv", "neighbor_averages", "predict",
    "split_dataset", "train",
]
