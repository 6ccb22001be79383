"""Local Outlier Factor over a stored training set (exact k-NN, Euclidean)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import TooFewPoints

LRD_EPS = 1e-12


def _pairwise(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    diff = A[:, None, :] - B[None, :, :]
    return np.sqrt((diff * diff).sum(-1))


def _knn(D: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and distances of the k nearest columns per row (ties by index)."""
    idx = np.argsort(D, axis=1, kind="stable")[:, :k]
    return idx, np.take_along_axis(D, idx, axis=1)


def _lrd(mean_reach: np.ndarray) -> np.ndarray:
    safe = np.where(mean_reach > 0, mean_reach, 1.0)
    return np.where(mean_reach > 0, 1.0 / safe, 1.0 / LRD_EPS)


@dataclass(frozen=True, eq=False)
class LofModel:
    X: np.ndarray
    k: int
    k_dist: np.ndarray  # k-distance of each training point
    lrd: np.ndarray  # local reachability density of each training point
    train_lof: np.ndarray
    lof_threshold: float

    @property
    def threshold(self) -> float:
        return self.lof_threshold

    def score(self, Q) -> np.ndarray:
        """LOF of query points against the training set."""
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        nn, d = _knn(_pairwise(Q, self.X), self.k)
        reach = np.maximum(self.k_dist[nn], d)
        lrd_q = _lrd(reach.mean(axis=1))
        return self.lrd[nn].mean(axis=1) / lrd_q

    def to_dict(self) -> dict:
        return {
            "X": self.X.tolist(),
            "k": self.k,
            "lof_threshold": self.lof_threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LofModel":
        X = np.array(d["X"], dtype=float)
        m = _fit(X, int(d["k"]))
        return cls(m.X, m.k, m.k_dist, m.lrd, m.train_lof, float(d["lof_threshold"]))


def _fit(X: np.ndarray, k: int) -> LofModel:
    n = len(X)
    D = _pairwise(X, X)
    # exclude self without disturbing duplicate (zero-distance) neighbours
    D[np.arange(n), np.arange(n)] = np.inf
    nn, d = _knn(D, k)
    k_dist = d[:, -1].copy()
    reach = np.maximum(k_dist[nn], d)
    lrd = _lrd(reach.mean(axis=1))
    lof = lrd[nn].mean(axis=1) / lrd
    return LofModel(X.copy(), k, k_dist, lrd, lof, float("nan"))


def train_lof(X, k: int | None = None, nu: float = 0.1) -> LofModel:
    X = np.asarray(X, dtype=float)
    n = len(X)
    if k is None:
        k = min(10, n - 1)
    if k < 1 or n < k + 1:
        raise TooFewPoints(f"LOF with k={k} needs at least {k + 1} points, got {n}")
    m = _fit(X, k)
    thr = float(np.quantile(m.train_lof, 1.0 - nu))
    return LofModel(m.X, m.k, m.k_dist, m.lrd, m.train_lof, thr)
