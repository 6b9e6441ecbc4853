"""Comparing models over many problems: performance profiles, Friedman
aligned ranks and the Finner step-down correction.

All metrics are treated as lower-is-better costs.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm, rankdata

ZERO_FLOOR = 1e-12
ALPHA = 0.05


@dataclass(frozen=True)
class ResultMatrix:
    values: np.ndarray  # (n_problems, n_models)
    models: tuple[str, ...]
    problems: tuple[str, ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.size == 0:
            raise ValueError(f"values must be a non-empty 2-D matrix, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("values must be finite and nonnegative")
        object.__setattr__(self, "values", v)
        models = tuple(self.models) or tuple(f"m{j}" for j in range(v.shape[1]))
        problems = tuple(self.problems) or tuple(str(i) for i in range(v.shape[0]))
        if len(models) != v.shape[1] or len(problems) != v.shape[0]:
            raise ValueError("labels do not match the matrix shape")
        object.__setattr__(self, "models", models)
        object.__setattr__(self, "problems", problems)

    @classmethod
    def from_array(cls, values, models: Sequence[str] = (), problems: Sequence[str] = ()):
        return cls(np.asarray(values, dtype=np.float64), tuple(models), tuple(problems))

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class ProfileCurve:
    taus: np.ndarray
    rho: np.ndarray  # (len(taus), n_models)
    models: tuple[str, ...]
    counts: np.ndarray  # problems within tau, so rho = counts / n_problems exactly

    def for_model(self, name: str) -> np.ndarray:
        return self.rho[:, self.models.index(name)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(["tau", *self.models]) + "\n")
        for tau, row in zip(self.taus, self.rho):
            buf.write(",".join([repr(float(tau)), *(repr(float(r)) for r in row)]) + "\n")
        return buf.getvalue()


def performance_ratios(results: ResultMatrix) -> np.ndarray:
    v = results.values
    best = np.maximum(v.min(axis=1, keepdims=True), ZERO_FLOOR)
    # a perfect (zero) entry has ratio 1, never below
    return np.maximum(v / best, 1.0)


def performance_profile(results: ResultMatrix, tau_grid=None) -> ProfileCurve:
    """Fraction of problems on which each model is within a factor tau of the best.

    Without ``tau_grid`` the curve is evaluated at every distinct ratio, which
    are exactly its step points.
    """
    r = performance_ratios(results)
    if tau_grid is None:
        taus = np.unique(np.concatenate([[1.0], r.ravel()]))
    else:
        taus = np.sort(np.asarray(tau_grid, dtype=np.float64))
        if taus.size == 0 or taus[0] < 1:
            raise ValueError("tau grid must be non-empty and >= 1")
    srt = np.sort(r, axis=0)
    counts = np.stack([np.searchsorted(srt[:, j], taus, side="right") for j in range(r.shape[1])],
                      axis=1)
    return ProfileCurve(taus, counts / r.shape[0], results.models, counts)


@dataclass(frozen=True)
class FinnerResult:
    models: tuple[str, ...]
    raw: np.ndarray
    adjusted: np.ndarray
    reject: np.ndarray


def finner_posthoc(pvalues, models: Sequence[str] = (), k_comparisons: Optional[int] = None,
                   alpha: float = ALPHA) -> FinnerResult:
    """Finner step-down adjusted p-values, returned in ascending raw order.

    ``APV_i = min(1, max_{j<=i} 1 - (1 - p_(j)) ** (m / j))`` with ``m`` the
    number of comparisons.
    """
    p = np.asarray(pvalues, dtype=np.float64).reshape(-1)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    models = tuple(models) or tuple(str(i) for i in range(p.size))
    m = p.size if k_comparisons is None else int(k_comparisons)
    order = np.argsort(p, kind="stable")
    ps = p[order]
    j = np.arange(1, p.size + 1)
    raw_adj = 1.0 - (1.0 - ps) ** (m / j)
    adj = np.minimum(1.0, np.maximum.accumulate(raw_adj)) if p.size else raw_adj
    return FinnerResult(tuple(models[i] for i in order), ps, adj, adj <= alpha)


@dataclass(frozen=True)
class FarReport:
    models: tuple[str, ...]
    avg_aligned_rank: np.ndarray
    rank_sums: np.ndarray
    statistic: float
    control: str
    comparisons: Optional[FinnerResult]
    z: dict

    def rows(self) -> list[tuple[str, float, Optional[float], str]]:
        """(model, average rank, adjusted p, decision), best rank first."""
        rank_of = dict(zip(self.models, self.avg_aligned_rank))
        adj = {}
        if self.comparisons is not None:
            for name, a, rej in zip(self.comparisons.models, self.comparisons.adjusted,
                                    self.comparisons.reject):
                adj[name] = (float(a), "Reject" if rej else "Fail to reject")
        out = []
        for name in sorted(self.models, key=lambda m: (rank_of[m], self.models.index(m))):
            if name == self.control:
                out.append((name, float(rank_of[name]), None, "-"))
            else:
                a, dec = adj[name]
                out.append((name, float(rank_of[name]), a, dec))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("model,far,p_finner,null_hypothesis\n")
        for name, rank, p, dec in self.rows():
            buf.write(f"{name},{rank!r},{'-' if p is None else repr(p)},{dec}\n")
        return buf.getvalue()

    def to_text(self) -> str:
        rows = self.rows()
        w = max(len("Model"), *(len(r[0]) for r in rows))
        lines = [f"{'Model':<{w}}  {'FAR':>10}  {'p_F-value':>10}  Null hypothesis"]
        for name, rank, p, dec in rows:
            ptxt = "-" if p is None else f"{p:.6f}"
            lines.append(f"{name:<{w}}  {rank:>10.3f}  {ptxt:>10}  {dec}")
        lines.append(f"FAR statistic: {self.statistic:.6f}")
        return "\n".join(lines) + "\n"


def aligned_ranks(values) -> np.ndarray:
    """Midranks of all row-mean-centred values, ranked jointly (1 = lowest)."""
    v = np.asarray(values, dtype=np.float64)
    aligned = v - v.mean(axis=1, keepdims=True)
    return rankdata(aligned.ravel(), method="average").reshape(v.shape)


def friedman_aligned_ranks(results: ResultMatrix, alpha: float = ALPHA) -> FarReport:
    """Friedman aligned-ranks statistic, average ranks, and control-vs-rest tests.

    The best (lowest) average rank is the control; each other model gets a
    two-sided normal p-value from ``z = (R_j - R_c) / sqrt(k (n + 1) / 6)``,
    Finner-adjusted.
    """
    v = results.values
    n, k = v.shape
    if n < 2 or k < 2:
        raise ValueError("need at least two problems and two models")
    ranks = aligned_ranks(v)
    col = ranks.sum(axis=0)
    row = ranks.sum(axis=1)
    N = k * n
    num = (k - 1) * (np.sum(col**2) - (k * n**2 / 4.0) * (N + 1) ** 2)
    den = N * (N + 1) * (2 * N + 1) / 6.0 - np.sum(row**2) / k
    stat = float(num / den) if den > 0 else 0.0
    avg = col / n
    ci = int(np.argmin(avg))
    se = np.sqrt(k * (n + 1) / 6.0)
    others = [j for j in range(k) if j != ci]
    z = {results.models[j]: float((avg[j] - avg[ci]) / se) for j in others}
    pv = [float(2 * norm.sf(abs(z[results.models[j]]))) for j in others]
    comp = finner_posthoc(pv, [results.models[j] for j in others], len(others), alpha)
    return FarReport(results.models, avg, col, stat, results.models[ci], comp, z)
