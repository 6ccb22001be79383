"""One-class SVM with an RBF kernel, trained by pairwise (SMO) coordinate descent.

Dual problem::

    min_a  1/2 a^T K a   s.t.  0 <= a_i <= 1/(nu n),  sum a_i = 1

Decision value ``d(x) = sum_i a_i k(x, x_i) - rho``; ``x`` is anomalous when
``d(x) < 0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConvergenceFailure, TooFewPoints

KKT_TOL = 1e-6
MAX_ITER = 200_000
MIN_POINTS = 5


def rbf_kernel(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


def default_gamma(X: np.ndarray) -> float:
    var = float(np.mean(np.var(X, axis=0)))
    return 1.0 / (10.0 * var) if var > 0 else 0.1


@dataclass(frozen=True, eq=False)
class OcsvmModel:
    support_vectors: np.ndarray
    alphas: np.ndarray
    rho: float
    gamma: float
    nu: float
    kkt_residual: float = 0.0
    n_iter: int = 0

    def decision(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return rbf_kernel(X, self.support_vectors, self.gamma) @ self.alphas - self.rho

    def score(self, X) -> np.ndarray:
        """Anomaly score, higher is more anomalous: ``-d(x)``."""
        return -self.decision(X)

    @property
    def threshold(self) -> float:
        return 0.0

    def to_dict(self) -> dict:
        return {
            "support_vectors": self.support_vectors.tolist(),
            "alphas": self.alphas.tolist(),
            "rho": self.rho,
            "gamma": self.gamma,
            "nu": self.nu,
            "kkt_residual": self.kkt_residual,
            "n_iter": self.n_iter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OcsvmModel":
        sv = np.array(d["support_vectors"], dtype=float)
        return cls(
            sv.reshape(len(d["alphas"]), -1),
            np.array(d["alphas"], dtype=float),
            float(d["rho"]),
            float(d["gamma"]),
            float(d["nu"]),
            float(d.get("kkt_residual", 0.0)),
            int(d.get("n_iter", 0)),
        )


def kkt_residual(alpha: np.ndarray, grad: np.ndarray, C: float) -> float:
    """Maximal violating-pair gap; zero at the optimum."""
    up = alpha < C
    low = alpha > 0
    if not up.any() or not low.any():
        return 0.0
    return max(0.0, float(np.max(-grad[up]) - np.min(-grad[low])))


def _rho(alpha: np.ndarray, grad: np.ndarray, C: float) -> float:
    free = (alpha > 0) & (alpha < C)
    if free.any():
        # free gradients agree to within the KKT tolerance; the smallest keeps
        # every margin vector at d >= 0 instead of flagging it through round-off
        return float(grad[free].min())
    # no free variables: any rho in [max g over upper-bounded, min g over lower-bounded]
    at_upper = alpha >= C
    at_lower = alpha <= 0
    hi = float(grad[at_lower].min()) if at_lower.any() else None
    lo = float(grad[at_upper].max()) if at_upper.any() else None
    if hi is None:
        return lo
    if lo is None:
        return hi
    return 0.5 * (lo + hi)


def _polish(K: np.ndarray, alpha: np.ndarray, C: float, tol: float) -> np.ndarray:
    """Re-solve the free block exactly once SMO has identified the active set.

    With bounded variables fixed, the free ones satisfy
    ``K_FF a_F - rho = -K_FU a_U`` and ``sum a_F = 1 - sum a_U``. The exact
    solution is kept only if it stays inside the box and does not worsen the
    KKT residual; otherwise the SMO iterate is returned unchanged.
    """
    free = np.flatnonzero((alpha > 0) & (alpha < C))
    if free.size == 0:
        return alpha
    upper = np.flatnonzero(alpha >= C)
    m = free.size
    A = np.zeros((m + 1, m + 1))
    A[:m, :m] = K[np.ix_(free, free)]
    A[:m, m] = -1.0
    A[m, :m] = 1.0
    b = np.zeros(m + 1)
    if upper.size:
        b[:m] = -K[np.ix_(free, upper)] @ alpha[upper]
    b[m] = 1.0 - alpha[upper].sum()
    try:
        sol = np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        return alpha
    a_f = sol[:m]
    if not np.all(np.isfinite(a_f)) or np.any(a_f <= 0) or np.any(a_f >= C):
        return alpha
    out = alpha.copy()
    out[free] = a_f
    if kkt_residual(out, K @ out, C) > max(tol, kkt_residual(alpha, K @ alpha, C)):
        return alpha
    return out


def train_ocsvm(X, nu: float = 0.1, gamma: float | None = None, tol: float = KKT_TOL, max_iter: int = MAX_ITER) -> OcsvmModel:
    X = np.asarray(X, dtype=float)
    n = len(X)
    if n < MIN_POINTS:
        raise TooFewPoints(f"one-class SVM needs at least {MIN_POINTS} points, got {n}")
    if not 0 < nu <= 1:
        raise ValueError(f"nu must be in (0, 1], got {nu}")
    if gamma is None:
        gamma = default_gamma(X)
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")

    K = rbf_kernel(X, X, gamma)
    C = 1.0 / (nu * n)
    alpha = np.zeros(n)
    n_full = min(n, int(np.floor(nu * n)))
    alpha[:n_full] = C
    if n_full < n:
        alpha[n_full] = 1.0 - n_full * C
    grad = K @ alpha

    it = 0
    while True:
        up = np.flatnonzero(alpha < C)
        low = np.flatnonzero(alpha > 0)
        if up.size == 0 or low.size == 0:
            break
        i = up[np.argmax(-grad[up])]
        j = low[np.argmin(-grad[low])]
        gap = grad[j] - grad[i]
        if gap <= tol:
            break
        if it >= max_iter:
            raise ConvergenceFailure(f"SMO did not converge in {max_iter} iterations", gap)
        quad = K[i, i] + K[j, j] - 2.0 * K[i, j]
        step = gap / max(quad, 1e-12)
        step = min(step, C - alpha[i], alpha[j])
        alpha[i] += step
        alpha[j] -= step
        # snap to the box so bound membership is exact
        if C - alpha[i] < 1e-15:
            alpha[i] = C
        if alpha[j] < 1e-15:
            alpha[j] = 0.0
        grad += step * (K[:, i] - K[:, j])
        it += 1

    alpha = _polish(K, alpha, C, tol)
    grad = K @ alpha
    residual = kkt_residual(alpha, grad, C)
    rho = _rho(alpha, grad, C)
    sv = alpha > 0
    return OcsvmModel(X[sv].copy(), alpha[sv].copy(), rho, float(gamma), float(nu), residual, it)
