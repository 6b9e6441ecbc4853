"""Effect estimate from a trained model, and the two error metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import DragonnetModel, ModelOutputs, predict
from .neighbors import NeighborAverages


class NotTrainedError(RuntimeError):
    pass


class MissingGroundTruth(ValueError):
    pass


@dataclass(frozen=True)
class EffectEstimate:
    psi_hat: float
    per_sample_ite: np.ndarray
    q0_hat: np.ndarray
    q1_hat: np.ndarray


@dataclass(frozen=True)
class EvalRecord:
    model_id: str
    realization_id: str
    eps_ate: float
    eps_pehe: float

    def __post_init__(self):
        for name in ("eps_ate", "eps_pehe"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")

    @property
    def root_pehe(self) -> float:
        """sqrt of eps_pehe, the form often reported elsewhere."""
        return float(np.sqrt(self.eps_pehe))


def adjusted_outcomes(outputs: ModelOutputs, epsilon: float) -> tuple[np.ndarray, np.ndarray]:
    """Fluctuated predictions: ``q1 + eps/g`` and ``q0 - eps/(1-g)``."""
    return outputs.q0 - epsilon / (1.0 - outputs.g), outputs.q1 + epsilon / outputs.g


def effect_from_outputs(outputs: ModelOutputs, epsilon: float = 0.0,
                        use_fluctuation: bool = True) -> EffectEstimate:
    if use_fluctuation and epsilon != 0.0:
        q0, q1 = adjusted_outcomes(outputs, epsilon)
    else:
        q0, q1 = outputs.q0, outputs.q1
    ite = q1 - q0
    return EffectEstimate(float(np.mean(ite)), ite, q0, q1)


def estimate_effect(model: DragonnetModel, X, nbrs: Optional[NeighborAverages] = None,
                    use_fluctuation: Optional[bool] = None) -> EffectEstimate:
    """Average treatment effect from the (optionally fluctuated) outcome heads.

    ``use_fluctuation`` defaults to whether the model was trained with the
    targeted term.
    """
    if not model.trained:
        raise NotTrainedError("estimate_effect needs a trained model")
    if use_fluctuation is None:
        use_fluctuation = model.targeted
    outputs = predict(model, X, nbrs)
    return effect_from_outputs(outputs, model.outcome_epsilon, use_fluctuation)


def _truth(mu0, mu1) -> np.ndarray:
    if mu0 is None or mu1 is None:
        raise MissingGroundTruth("metrics need the noiseless surfaces mu0 and mu1")
    mu0 = np.asarray(mu0, dtype=np.float64)
    mu1 = np.asarray(mu1, dtype=np.float64)
    if mu0.shape != mu1.shape:
        raise ValueError("mu0 and mu1 differ in length")
    return mu1 - mu0


def eps_ate(estimate: EffectEstimate | float, mu0, mu1) -> float:
    """Absolute error of the estimated average effect."""
    psi = estimate.psi_hat if isinstance(estimate, EffectEstimate) else float(estimate)
    return float(abs(np.mean(_truth(mu0, mu1)) - psi))


def eps_pehe(q0_hat, q1_hat, mu0, mu1) -> float:
    """Mean squared error of the individual effects (no square root)."""
    true_ite = _truth(mu0, mu1)
    pred = np.asarray(q1_hat, dtype=np.float64) - np.asarray(q0_hat, dtype=np.float64)
    if pred.shape != true_ite.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {true_ite.shape}")
    return float(np.mean((true_ite - pred) ** 2))


def evaluate(result, dataset, use_fluctuation: Optional[bool] = None) -> dict:
    """Metrics of a ``TrainResult`` on the dataset it was trained on.

    ``in_sample`` covers the training and validation rows, ``heldout`` the
    test rows (empty when training used no test split).
    """
    nbrs = result.neighbors_for_dataset(dataset)
    split = result.split
    parts = {"in_sample": np.sort(np.concatenate([split.train_idx, split.val_idx])),
             "heldout": split.test_idx}
    out = {}
    for label, idx in parts.items():
        if idx.size == 0:
            continue
        est = estimate_effect(result.model, dataset.X[idx],
                              None if nbrs is None else nbrs.subset(idx), use_fluctuation)
        mu0 = None if dataset.mu0 is None else dataset.mu0[idx]
        mu1 = None if dataset.mu1 is None else dataset.mu1[idx]
        pehe = eps_pehe(est.q0_hat, est.q1_hat, mu0, mu1)
        out[label] = {
            "psi_hat": est.psi_hat,
            "true_ate": float(np.mean(mu1 - mu0)),
            "eps_ate": eps_ate(est, mu0, mu1),
            "eps_pehe": pehe,
            "root_pehe": float(np.sqrt(pehe)),
        }
    return out
