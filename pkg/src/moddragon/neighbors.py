"""Average outcomes of the k nearest control and treated neighbours.

Brute-force scan; ties in distance go to the smaller reference index.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .data import Dataset

# bounds the (queries x members x d) temporary
_CHUNK_ELEMENTS = 4_000_000


class DistanceMetric(Enum):
    MANHATTAN = "manhattan"
    EUCLIDEAN = "euclidean"
    CHEBYSHEV = "chebyshev"

    @property
    def p(self) -> float:
        return {"manhattan": 1.0, "euclidean": 2.0, "chebyshev": np.inf}[self.value]

    @classmethod
    def parse(cls, value) -> "DistanceMetric":
        if isinstance(value, cls):
            return value
        v = str(value).lower()
        aliases = {"l1": "manhattan", "l2": "euclidean", "linf": "chebyshev", "chebychev": "chebyshev"}
        return cls(aliases.get(v, v))


class GroupTooSmall(ValueError):
    def __init__(self, group: int, group_size: int, k: int, query_index: Optional[int] = None):
        msg = f"treatment group {group} has {group_size} candidate neighbours, k={k}"
        if query_index is not None:
            msg = f"query {query_index}: {msg}"
        super().__init__(msg)
        self.group = group
        self.group_size = group_size
        self.k = k
        self.query_index = query_index


def minkowski_distance(x, y, metric: DistanceMetric = DistanceMetric.EUCLIDEAN) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    diff = np.abs(x - y)
    metric = DistanceMetric.parse(metric)
    if metric is DistanceMetric.MANHATTAN:
        return float(diff.sum())
    if metric is DistanceMetric.CHEBYSHEV:
        return float(diff.max()) if diff.size else 0.0
    return float(np.sqrt(np.sum(diff * diff)))


def pairwise_distances(A, B, metric: DistanceMetric = DistanceMetric.EUCLIDEAN) -> np.ndarray:
    """Distances between rows of ``A`` (m x d) and rows of ``B`` (n x d)."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"width mismatch: {A.shape[1]} vs {B.shape[1]}")
    metric = DistanceMetric.parse(metric)
    diff = np.abs(A[:, None, :] - B[None, :, :])
    if metric is DistanceMetric.MANHATTAN:
        return diff.sum(axis=2)
    if metric is DistanceMetric.CHEBYSHEV:
        return diff.max(axis=2) if A.shape[1] else np.zeros((A.shape[0], B.shape[0]))
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _nearest(dist: np.ndarray, k: int) -> np.ndarray:
    # stable sort keeps ascending index order among equal distances
    return np.argsort(dist, axis=-1, kind="stable")[..., :k]


def knn_indices(query, reference: Dataset, group: int, k: int,
                metric: DistanceMetric = DistanceMetric.EUCLIDEAN,
                exclude: Optional[int] = None) -> np.ndarray:
    """Indices (into ``reference``) of the ``k`` nearest rows with ``t == group``."""
    if k <= 0:
        raise ValueError("k must be positive")
    candidates = np.flatnonzero(reference.t == group)
    if exclude is not None:
        candidates = candidates[candidates != exclude]
    if candidates.size < k:
        raise GroupTooSmall(group, candidates.size, k)
    q = np.asarray(query, dtype=np.float64).reshape(1, -1)
    dist = pairwise_distances(q, reference.X[candidates], metric)[0]
    return candidates[_nearest(dist, k)]


@dataclass(frozen=True)
class NeighborAverages:
    ybar0: np.ndarray
    ybar1: np.ndarray
    k: int
    metric: DistanceMetric

    def __len__(self):
        return self.ybar0.shape[0]

    def subset(self, idx) -> "NeighborAverages":
        return NeighborAverages(self.ybar0[idx], self.ybar1[idx], self.k, self.metric)


def neighbor_averages(queries, reference: Dataset, k: int = 10,
                      metric: DistanceMetric = DistanceMetric.EUCLIDEAN,
                      self_exclusion: bool = False) -> NeighborAverages:
    """Mean outcome of each query's ``k`` nearest control and treated reference rows.

    With ``self_exclusion`` the queries must be the reference rows themselves
    (query ``i`` is reference row ``i``) and a row never counts as its own
    neighbour.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    metric = DistanceMetric.parse(metric)
    Q = np.asarray(queries, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[1] != reference.d:
        raise ValueError(f"queries must be (m, {reference.d}), got {Q.shape}")
    if self_exclusion and Q.shape[0] != reference.n:
        raise ValueError("self_exclusion needs one query per reference row")
    out = []
    for group in (0, 1):
        members = np.flatnonzero(reference.t == group)
        need = k + 1 if self_exclusion else k
        if members.size < need:
            # every query hits the shortage; report the first one
            raise GroupTooSmall(group, members.size - (1 if self_exclusion else 0), k, 0)
        Xg, yg = reference.X[members], reference.y[members]
        avg = np.empty(Q.shape[0])
        step = max(1, _CHUNK_ELEMENTS // max(1, members.size * Q.shape[1]))
        for start in range(0, Q.shape[0], step):
            stop = min(start + step, Q.shape[0])
            dist = pairwise_distances(Q[start:stop], Xg, metric)
            if self_exclusion:
                rows = np.arange(start, stop)
                pos = np.searchsorted(members, rows)
                hit = (pos < members.size) & (members[np.minimum(pos, members.size - 1)] == rows)
                dist[np.flatnonzero(hit), pos[hit]] = np.inf
            nn = _nearest(dist, k)
            avg[start:stop] = yg[nn].mean(axis=1)
        out.append(avg)
    return NeighborAverages(out[0], out[1], k, metric)
