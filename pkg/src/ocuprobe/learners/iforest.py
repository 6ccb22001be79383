"""Isolation forest with array-backed trees."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from ..errors import TooFewPoints

EULER_GAMMA = 0.5772156649015329
EXACT_HARMONIC_UPTO = 50
MIN_POINTS = 5


def harmonic(m: int) -> float:
    if m <= 0:
        return 0.0
    if m <= EXACT_HARMONIC_UPTO:
        return math.fsum(1.0 / k for k in range(1, m + 1))
    return math.log(m) + EULER_GAMMA


@functools.lru_cache(maxsize=4096)
def _c_int(m: int) -> float:
    if m <= 1:
        return 0.0
    return 2.0 * harmonic(m - 1) - 2.0 * (m - 1) / m


def c_factor(m: float) -> float:
    """Average path length of an unsuccessful BST search among ``m`` points."""
    return _c_int(int(m))


@functools.lru_cache(maxsize=64)
def _c_table_upto(m: int) -> np.ndarray:
    table = np.array([_c_int(k) for k in range(m + 1)])
    table.flags.writeable = False
    return table


def _c_table(m: int) -> np.ndarray:
    """c(k) for k = 0..m (at least), sized in powers of two to share tables."""
    return _c_table_upto(1 << max(8, int(m).bit_length()))


def score_from_path_length(mean_path, psi: int) -> np.ndarray:
    return np.power(2.0, -np.asarray(mean_path, dtype=float) / c_factor(psi))


@dataclass(frozen=True, eq=False)
class IsoTree:
    feature: np.ndarray  # -1 at leaves
    split: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray
    depth: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "_leaf_c", _c_table(int(self.size.max(initial=0)))[self.size])

    def path_length(self, X: np.ndarray) -> np.ndarray:
        """Depth of the leaf each row reaches plus the leaf's c(size) correction."""
        if _path_kernel is None:  # pragma: no cover
            return self.path_length_reference(X)
        return _path_kernel(self.feature, self.split, self.left, self.right, self.depth + self._leaf_c,
                            np.ascontiguousarray(X, dtype=float))

    def path_length_reference(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.intp)
        rows = np.arange(len(X))
        while True:
            inner = self.feature[node] >= 0
            if not inner.any():
                break
            r = rows[inner]
            nd = node[inner]
            go_left = X[r, self.feature[nd]] < self.split[nd]
            node[inner] = np.where(go_left, self.left[nd], self.right[nd])
        return self.depth[node] + self._leaf_c[node]

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("feature", "split", "left", "right", "size", "depth")}

    @classmethod
    def from_dict(cls, d: dict) -> "IsoTree":
        return cls(
            np.array(d["feature"], dtype=np.intp),
            np.array(d["split"], dtype=float),
            np.array(d["left"], dtype=np.intp),
            np.array(d["right"], dtype=np.intp),
            np.array(d["size"], dtype=np.intp),
            np.array(d["depth"], dtype=float),
        )


def max_nodes(max_depth: int) -> int:
    return 2 ** (max_depth + 1) - 1


def _grow_reference(X: np.ndarray, U: np.ndarray, max_depth: int) -> tuple:
    """Plain-Python tree growth; ``U[k]`` holds the two uniforms of the k-th node created.

    Nodes are numbered in creation order, children are visited left first.
    """
    feature, split, left, right, size, depth = [], [], [], [], [], []

    def new_node(n, d):
        feature.append(-1)
        split.append(0.0)
        left.append(-1)
        right.append(-1)
        size.append(n)
        depth.append(d)
        return len(feature) - 1

    stack = [(new_node(len(X), 0), np.arange(len(X)), 0)]
    while stack:
        nid, idx, d = stack.pop()
        if len(idx) <= 1 or d >= max_depth:
            continue
        sub = X[idx]
        lo = sub.min(axis=0)
        hi = sub.max(axis=0)
        spread = np.flatnonzero(hi > lo)
        if spread.size == 0:
            continue
        u_feat, u_split = U[nid]
        f = int(spread[int(u_feat * spread.size)])
        s = lo[f] + u_split * (hi[f] - lo[f])
        mask = sub[:, f] < s
        feature[nid] = f
        split[nid] = float(s)
        li = new_node(int(mask.sum()), d + 1)
        ri = new_node(int((~mask).sum()), d + 1)
        left[nid] = li
        right[nid] = ri
        stack.append((ri, idx[~mask], d + 1))
        stack.append((li, idx[mask], d + 1))
    return (
        np.array(feature, dtype=np.intp),
        np.array(split, dtype=float),
        np.array(left, dtype=np.intp),
        np.array(right, dtype=np.intp),
        np.array(size, dtype=np.intp),
        np.array(depth, dtype=float),
    )


try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

if numba is not None:

    @numba.njit(cache=True)
    def _grow_kernel(X, U, max_depth):
        n, d = X.shape
        cap = U.shape[0]
        feature = np.full(cap, -1, dtype=np.intp)
        split = np.zeros(cap)
        left = np.full(cap, -1, dtype=np.intp)
        right = np.full(cap, -1, dtype=np.intp)
        size = np.zeros(cap, dtype=np.intp)
        depth = np.zeros(cap)
        order = np.arange(n)
        # stack of (node, start, stop) over ``order``; left child popped first
        st_node = np.empty(cap, dtype=np.intp)
        st_a = np.empty(cap, dtype=np.intp)
        st_b = np.empty(cap, dtype=np.intp)
        lo = np.empty(d)
        hi = np.empty(d)
        spread = np.empty(d, dtype=np.intp)
        buf = np.empty(n, dtype=np.intp)
        n_nodes = 1
        size[0] = n
        top = 0
        st_node[0] = 0
        st_a[0] = 0
        st_b[0] = n
        top = 1
        while top > 0:
            top -= 1
            nid = st_node[top]
            a = st_a[top]
            b = st_b[top]
            if b - a <= 1 or depth[nid] >= max_depth:
                continue
            for j in range(d):
                lo[j] = X[order[a], j]
                hi[j] = lo[j]
            for r in range(a + 1, b):
                row = order[r]
                for j in range(d):
                    v = X[row, j]
                    if v < lo[j]:
                        lo[j] = v
                    if v > hi[j]:
                        hi[j] = v
            n_spread = 0
            for j in range(d):
                if hi[j] > lo[j]:
                    spread[n_spread] = j
                    n_spread += 1
            if n_spread == 0:
                continue
            f = spread[int(U[nid, 0] * n_spread)]
            s = lo[f] + U[nid, 1] * (hi[f] - lo[f])
            # stable partition: rows below the split first, original order kept
            k = 0
            for r in range(a, b):
                if X[order[r], f] < s:
                    buf[k] = order[r]
                    k += 1
            m = k
            for r in range(a, b):
                if not X[order[r], f] < s:
                    buf[k] = order[r]
                    k += 1
            for r in range(b - a):
                order[a + r] = buf[r]
            feature[nid] = f
            split[nid] = s
            li = n_nodes
            ri = n_nodes + 1
            n_nodes += 2
            left[nid] = li
            right[nid] = ri
            size[li] = m
            size[ri] = b - a - m
            depth[li] = depth[nid] + 1
            depth[ri] = depth[nid] + 1
            st_node[top] = ri
            st_a[top] = a + m
            st_b[top] = b
            top += 1
            st_node[top] = li
            st_a[top] = a
            st_b[top] = a + m
            top += 1
        return (
            feature[:n_nodes].copy(),
            split[:n_nodes].copy(),
            left[:n_nodes].copy(),
            right[:n_nodes].copy(),
            size[:n_nodes].copy(),
            depth[:n_nodes].copy(),
        )

    @numba.njit(cache=True)
    def _path_kernel(feature, split, left, right, leaf_len, X):
        out = np.empty(X.shape[0])
        for i in range(X.shape[0]):
            nid = 0
            while feature[nid] >= 0:
                nid = left[nid] if X[i, feature[nid]] < split[nid] else right[nid]
            out[i] = leaf_len[nid]
        return out

    def _grow_arrays(X, U, max_depth):
        return _grow_kernel(np.ascontiguousarray(X, dtype=float), U, max_depth)

else:  # pragma: no cover
    _grow_arrays = _grow_reference
    _path_kernel = None


def _grow(X: np.ndarray, max_depth: int, rng: np.random.Generator, grow=None) -> IsoTree:
    # every potential node gets its two uniforms up front so the draw count is fixed
    U = rng.random((max_nodes(max_depth), 2))
    return IsoTree(*(grow or _grow_arrays)(X, U, max_depth))


@dataclass(frozen=True, eq=False)
class IsoForestModel:
    trees: tuple
    psi: int
    score_threshold: float
    seed: int = 0

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def threshold(self) -> float:
        return self.score_threshold

    def mean_path_length(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.mean([t.path_length(X) for t in self.trees], axis=0)

    def score(self, X) -> np.ndarray:
        return score_from_path_length(self.mean_path_length(X), self.psi)

    def to_dict(self) -> dict:
        return {
            "psi": self.psi,
            "score_threshold": self.score_threshold,
            "seed": self.seed,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IsoForestModel":
        return cls(tuple(IsoTree.from_dict(t) for t in d["trees"]), int(d["psi"]), float(d["score_threshold"]), int(d["seed"]))


def train_iforest(X, n_trees: int = 100, psi: int = 256, seed: int = 0, nu: float = 0.1, grow=None) -> IsoForestModel:
    """Fit ``n_trees`` isolation trees on subsamples of size ``min(psi, n)``.

    The anomaly threshold is the (1 - nu) quantile of the training scores.
    ``grow`` swaps the tree builder (tests only).
    """
    X = np.asarray(X, dtype=float)
    n = len(X)
    if n < MIN_POINTS:
        raise TooFewPoints(f"isolation forest needs at least {MIN_POINTS} points, got {n}")
    psi = int(min(psi, n))
    max_depth = int(math.ceil(math.log2(psi))) if psi > 1 else 0
    rng = np.random.default_rng(seed)
    trees = []
    for _ in range(n_trees):
        idx = rng.choice(n, size=psi, replace=False)
        trees.append(_grow(X[idx], max_depth, rng, grow))
    model = IsoForestModel(tuple(trees), psi, 0.0, int(seed))
    thr = float(np.quantile(model.score(X), 1.0 - nu))
    return IsoForestModel(model.trees, psi, thr, int(seed))
