"""Independent reference implementations used only by the tests."""

from __future__ import annotations

import itertools
import math

import numpy as np


def brute_force_lof(X: np.ndarray, k: int) -> np.ndarray:
    """LOF by explicit loops over every pair, straight from the definitions.

    Neighbour ties are broken by lower index, zero mean reachability gives
    lrd = 1e12, matching the library's declared conventions.
    """
    n = len(X)
    dist = [[math.sqrt(sum((X[i][c] - X[j][c]) ** 2 for c in range(X.shape[1]))) for j in range(n)] for i in range(n)]
    neigh = []
    kdist = []
    for i in range(n):
        cand = sorted((dist[i][j], j) for j in range(n) if j != i)
        nn = [j for _, j in cand[:k]]
        neigh.append(nn)
        kdist.append(cand[k - 1][0])
    lrd = []
    for i in range(n):
        reach = [max(kdist[j], dist[i][j]) for j in neigh[i]]
        m = sum(reach) / k
        lrd.append(1.0 / m if m > 0 else 1e12)
    return np.array([sum(lrd[j] for j in neigh[i]) / k / lrd[i] for i in range(n)])


def ocsvm_qp_oracle(K: np.ndarray, nu: float):
    """Solve the one-class dual exactly by enumerating active sets.

    Each index is either at 0, at the upper bound C, or free. For every
    assignment the free block solves the equality-constrained KKT system;
    the unique assignment whose solution is primal and dual feasible is the
    optimum (K positive definite). Returns (alpha, rho); rho is None when no
    variable is free.
    """
    n = len(K)
    C = 1.0 / (nu * n)
    tol = 1e-10
    best = None
    for labels in itertools.product((0, 1, 2), repeat=n):  # 0 lower, 1 free, 2 upper
        U = [i for i in range(n) if labels[i] == 2]
        F = [i for i in range(n) if labels[i] == 1]
        alpha = np.zeros(n)
        alpha[U] = C
        rest = 1.0 - len(U) * C
        if not F:
            if abs(rest) > 1e-12:
                continue
            rho = None
        else:
            m = len(F)
            A = np.zeros((m + 1, m + 1))
            A[:m, :m] = K[np.ix_(F, F)]
            A[:m, m] = -1.0
            A[m, :m] = 1.0
            b = np.zeros(m + 1)
            b[:m] = -K[np.ix_(F, U)] @ alpha[U] if U else 0.0
            b[m] = rest
            try:
                sol = np.linalg.solve(A, b)
            except np.linalg.LinAlgError:
                continue
            a_f, rho = sol[:m], sol[m]
            if np.any(a_f <= tol) or np.any(a_f >= C - tol):
                continue
            alpha[F] = a_f
        g = K @ alpha
        if rho is None:
            lo = max((g[i] for i in U), default=-np.inf)
            hi = min((g[i] for i in range(n) if labels[i] == 0), default=np.inf)
            if lo > hi + 1e-9:
                continue
        else:
            if any(g[i] < rho - 1e-9 for i in range(n) if labels[i] == 0):
                continue
            if any(g[i] > rho + 1e-9 for i in U):
                continue
        obj = 0.5 * alpha @ K @ alpha
        if best is None or obj < best[2] - 1e-15:
            best = (alpha, rho, obj)
    if best is None:
        raise RuntimeError("no KKT point found")
    return best[0], best[1]


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability that a random positive outranks a random negative (ties count half)."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (len(pos) * len(neg)))
