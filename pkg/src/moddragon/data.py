"""Datasets: IHDP/NPCI realization files, a synthetic DGP, splits and scaling."""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

IHDP_N = 747
IHDP_TREATED = 139
IHDP_D = 25


class DataFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class StratificationError(ValueError):
    def __init__(self, group: int, group_size: int, needed: int):
        super().__init__(
            f"treatment group {group} has {group_size} samples, need at least {needed} to stratify"
        )
        self.group = group
        self.group_size = group_size
        self.needed = needed


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    t: np.ndarray
    y: np.ndarray
    y_cf: Optional[np.ndarray] = None
    mu0: Optional[np.ndarray] = None
    mu1: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError(f"X must be 2-D, got shape {X.shape}")
        n = X.shape[0]
        object.__setattr__(self, "X", X)
        t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        if not np.all((t == 0) | (t == 1)):
            raise ValueError("treatment vector must be binary (0/1)")
        object.__setattr__(self, "t", t)
        for name in ("y", "y_cf", "mu0", "mu1"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.asarray(v, dtype=np.float64).reshape(-1)
            if v.shape[0] != n:
                raise ValueError(f"{name} has length {v.shape[0]}, expected {n}")
            object.__setattr__(self, name, v)
        if t.shape[0] != n:
            raise ValueError(f"t has length {t.shape[0]}, expected {n}")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def n_treated(self) -> int:
        return int(self.t.sum())

    @property
    def has_ground_truth(self) -> bool:
        return self.mu0 is not None and self.mu1 is not None

    def true_ate(self) -> float:
        if not self.has_ground_truth:
            raise ValueError("dataset has no noiseless potential outcomes")
        return float(np.mean(self.mu1 - self.mu0))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        pick = lambda v: None if v is None else v[idx]  # noqa: E731
        return Dataset(self.X[idx], self.t[idx], self.y[idx], pick(self.y_cf),
                       pick(self.mu0), pick(self.mu1), self.name)

    def with_outcomes(self, y) -> "Dataset":
        return replace(self, y=np.asarray(y, dtype=np.float64))


def load_ihdp_csv(path, expect_ihdp: bool = False) -> Dataset:
    """Read one NPCI realization: headerless rows ``t, y, y_cf, mu0, mu1, x1..xd``.

    With ``expect_ihdp`` the file must also have the IHDP shape
    (747 units, 139 treated, 25 covariates).
    """
    path = Path(path)
    rows = []
    width = None
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",") if "," in line else line.split()
            try:
                row = [float(p) for p in parts]
            except ValueError:
                raise DataFormatError(f"non-numeric field in {line[:40]!r}", lineno) from None
            if len(row) < 6:
                raise DataFormatError(f"expected at least 6 columns, got {len(row)}", lineno)
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DataFormatError(f"expected {width} columns, got {len(row)}", lineno)
            if row[0] not in (0.0, 1.0):
                raise ValueError(f"line {lineno}: treatment value {row[0]} is not binary")
            rows.append(row)
    if not rows:
        raise DataFormatError("file contains no rows")
    a = np.array(rows)
    ds = Dataset(X=a[:, 5:], t=a[:, 0], y=a[:, 1], y_cf=a[:, 2], mu0=a[:, 3], mu1=a[:, 4],
                 name=path.stem)
    if expect_ihdp and (ds.n, ds.n_treated, ds.d) != (IHDP_N, IHDP_TREATED, IHDP_D):
        raise DataFormatError(
            f"not an IHDP realization: n={ds.n}, treated={ds.n_treated}, d={ds.d} "
            f"(expected {IHDP_N}, {IHDP_TREATED}, {IHDP_D})"
        )
    return ds


def dumps_realization(ds: Dataset) -> str:
    """Serialize in the realization layout; ``repr`` floats so the round trip is exact."""
    if ds.y_cf is None or not ds.has_ground_truth:
        raise ValueError("realization layout needs y_cf, mu0 and mu1")
    cols = np.column_stack([ds.t, ds.y, ds.y_cf, ds.mu0, ds.mu1, ds.X])
    buf = io.StringIO()
    for row in cols:
        buf.write(",".join(repr(float(v)) for v in row))
        buf.write("\n")
    return buf.getvalue()


def list_realizations(directory) -> list[Path]:
    """Realization files in a directory, lexicographic; the stem is the realization id."""
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in (".csv", ".txt"))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def generate_synthetic(
    n: int = 1000,
    d: int = 10,
    confounding_strength: float = 1.0,
    ate_target: float = 1.0,
    noise_sd: float = 1.0,
    seed: int = 0,
    heterogeneity: float = 0.0,
    nonlinearity: float = 1.0,
) -> Dataset:
    """Draw a dataset with known potential-outcome surfaces.

    ``mu0 = x.b + nonlinearity * sin(x.c)``; ``mu1 = mu0 + tau(x)`` where
    ``tau`` is the constant ``ate_target`` when ``heterogeneity == 0`` and
    otherwise ``ate_target + heterogeneity * (s(x) - mean s)`` with a smooth
    ``s``, centred on the sample so ``mean(mu1 - mu0) == ate_target``.
    Treatment is ``Bernoulli(sigmoid(confounding_strength * x.w))``.
    """
    if n <= 0 or d <= 0:
        raise ValueError("n and d must be positive")
    if noise_sd < 0:
        raise ValueError("noise_sd must be nonnegative")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    b = rng.normal(0.0, 1.0 / np.sqrt(d), d)
    c = rng.normal(0.0, 1.0, d)
    w = rng.normal(0.0, 1.0 / np.sqrt(d), d)
    h = rng.normal(0.0, 1.0, d)
    mu0 = X @ b + nonlinearity * np.sin(X @ c)
    if heterogeneity == 0:
        tau = np.full(n, float(ate_target))
    else:
        s = np.tanh(X @ h) + 0.5 * np.cos(X @ c)
        tau = ate_target + heterogeneity * (s - s.mean())
    mu1 = mu0 + tau
    t = (rng.uniform(size=n) < _sigmoid(confounding_strength * (X @ w))).astype(np.float64)
    eps = rng.standard_normal((2, n)) * noise_sd
    y1, y0 = mu1 + eps[0], mu0 + eps[1]
    y = np.where(t == 1, y1, y0)
    y_cf = np.where(t == 1, y0, y1)
    return Dataset(X, t, y, y_cf, mu0, mu1, name=f"synthetic-{seed}")


def generate_ihdp_like(seed: int = 0, n: int = IHDP_N, n_treated: int = IHDP_TREATED,
                       n_continuous: int = 6, n_binary: int = 19, noise_sd: float = 1.0,
                       att: float = 4.0) -> Dataset:
    """Surrogate with the IHDP shape and a Hill-style nonlinear response surface.

    Covariates: ``n_continuous`` standardized Gaussians then ``n_binary``
    Bernoulli columns. Exactly ``n_treated`` units are treated, drawn without
    replacement with confounded weights. ``mu0 = exp((x + 0.5) . b)``,
    ``mu1 = x . b - omega`` with ``omega`` set so the effect on the treated
    averages ``att``.
    """
    rng = np.random.default_rng(seed)
    d = n_continuous + n_binary
    Xc = rng.standard_normal((n, n_continuous))
    Xb = (rng.uniform(size=(n, n_binary)) < rng.uniform(0.2, 0.8, n_binary)).astype(np.float64)
    X = np.column_stack([Xc, Xb])
    b = rng.choice([0.0, 0.1, 0.2, 0.3, 0.4], size=d, p=[0.6, 0.1, 0.1, 0.1, 0.1])
    mu0 = np.exp((X + 0.5) @ b)
    lin = X @ b
    score = _sigmoid(X @ rng.normal(0.0, 0.5, d) - 1.0)
    treated = rng.choice(n, size=n_treated, replace=False, p=score / score.sum())
    t = np.zeros(n)
    t[treated] = 1.0
    omega = np.mean(lin[treated] - mu0[treated]) - att
    mu1 = lin - omega
    e = rng.standard_normal((2, n)) * noise_sd
    y1, y0 = mu1 + e[0], mu0 + e[1]
    y = np.where(t == 1, y1, y0)
    y_cf = np.where(t == 1, y0, y1)
    return Dataset(X, t, y, y_cf, mu0, mu1, name=f"ihdp-like-{seed}")


@dataclass(frozen=True)
class Split:
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray = field(default_factory=lambda: np.array([], dtype=np.intp))

    def __post_init__(self):
        parts = [np.asarray(p, dtype=np.intp) for p in (self.train_idx, self.val_idx, self.test_idx)]
        for name, p in zip(("train_idx", "val_idx", "test_idx"), parts):
            object.__setattr__(self, name, p)
        joined = np.concatenate(parts)
        if np.unique(joined).size != joined.size:
            raise ValueError("split parts overlap")


def split_dataset(ds: Dataset, validation_fraction: float = 0.2, test_fraction: float = 0.0,
                  seed: int = 0) -> Split:
    """Stratified split; both fractions are of the whole dataset, per treatment group."""
    if validation_fraction < 0 or test_fraction < 0 or validation_fraction + test_fraction >= 1:
        raise ValueError("fractions must be nonnegative and sum to less than 1")
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for group in (0, 1):
        idx = np.flatnonzero(ds.t == group)
        needed = 1 + (validation_fraction > 0) + (test_fraction > 0)
        if idx.size < needed:
            raise StratificationError(group, idx.size, needed)
        idx = rng.permutation(idx)
        n_test = max(1, int(round(test_fraction * idx.size))) if test_fraction > 0 else 0
        n_val = max(1, int(round(validation_fraction * idx.size))) if validation_fraction > 0 else 0
        if n_test + n_val >= idx.size:
            raise StratificationError(group, idx.size, n_test + n_val + 1)
        test.append(idx[:n_test])
        val.append(idx[n_test:n_test + n_val])
        train.append(idx[n_test + n_val:])
    return Split(*(np.sort(np.concatenate(p)) for p in (train, val, test)))


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, rows) -> "Standardizer":
        rows = np.asarray(rows, dtype=np.float64)
        mean = rows.mean(axis=0)
        std = rows.std(axis=0)
        const = ~(std > 1e-12 * np.maximum(1.0, np.abs(mean)))
        # zero-variance columns pass through untouched
        mean = np.where(const, 0.0, mean)
        std = np.where(const, 1.0, std)
        return cls(mean, std)

    @classmethod
    def identity(cls, width: int | tuple = ()) -> "Standardizer":
        return cls(np.zeros(width), np.ones(width))

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale

    def invert(self, z):
        return np.asarray(z, dtype=np.float64) * self.scale + self.mean


def standardize(train_rows) -> Standardizer:
    return Standardizer.fit(train_rows)
