"""Gradient-boosted regression trees for binary classification.

Second-order boosting on the logistic loss with exact greedy split search:
for a node with gradient sum G and hessian sum H the leaf weight is
``-G / (H + lambda)`` and a split's gain is

    1/2 * [G_L^2/(H_L+lambda) + G_R^2/(H_R+lambda) - G^2/(H+lambda)]
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DegenerateLabels, TooFewPoints

MIN_POINTS = 20


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=float)))


def logloss(y: np.ndarray, margin: np.ndarray) -> float:
    # log(1 + e^m) - y m, computed stably
    return float(np.mean(np.logaddexp(0.0, margin) - y * margin))


@dataclass(frozen=True)
class GbtConfig:
    n_rounds: int = 100
    max_depth: int = 3
    learning_rate: float = 0.1
    l2_lambda: float = 1.0
    min_child_weight: float = 1.0


@dataclass(frozen=True, eq=False)
class RegTree:
    feature: np.ndarray  # -1 at leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # leaf weight (0 at inner nodes)

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.intp)
        rows = np.arange(len(X))
        while True:
            inner = self.feature[node] >= 0
            if not inner.any():
                break
            r = rows[inner]
            nd = node[inner]
            go_left = X[r, self.feature[nd]] < self.threshold[nd]
            node[inner] = np.where(go_left, self.left[nd], self.right[nd])
        return self.value[node]

    @property
    def leaf_weights(self) -> np.ndarray:
        return self.value[self.feature < 0]

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "value")}

    @classmethod
    def from_dict(cls, d: dict) -> "RegTree":
        return cls(
            np.array(d["feature"], dtype=np.intp),
            np.array(d["threshold"], dtype=float),
            np.array(d["left"], dtype=np.intp),
            np.array(d["right"], dtype=np.intp),
            np.array(d["value"], dtype=float),
        )


@dataclass(frozen=True, eq=False)
class GbtModel:
    trees: tuple
    learning_rate: float
    max_depth: int
    l2_lambda: float
    base_score: float
    train_loss: tuple = field(default=())

    @property
    def n_rounds(self) -> int:
        return len(self.trees)

    @property
    def threshold(self) -> float:
        return 0.5

    def margin(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.full(len(X), self.base_score)
        for t in self.trees:
            out += self.learning_rate * t.predict(X)
        return out

    def predict_proba(self, X) -> np.ndarray:
        return sigmoid(self.margin(X))

    score = predict_proba

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "max_depth": self.max_depth,
            "l2_lambda": self.l2_lambda,
            "base_score": self.base_score,
            "train_loss": list(self.train_loss),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GbtModel":
        return cls(
            tuple(RegTree.from_dict(t) for t in d["trees"]),
            float(d["learning_rate"]),
            int(d["max_depth"]),
            float(d["l2_lambda"]),
            float(d["base_score"]),
            tuple(float(x) for x in d.get("train_loss", ())),
        )


def split_gain(G_L, H_L, G_R, H_R, lam):
    G = G_L + G_R
    H = H_L + H_R
    return 0.5 * (G_L**2 / (H_L + lam) + G_R**2 / (H_R + lam) - G**2 / (H + lam))


def _best_split_numpy(XS, OT, in_node, g, h, lam, mcw):
    """Exact greedy search over every feature; returns (gain, feature, threshold) or None.

    ``XS``/``OT`` hold each feature's sorted values and row order (features x rows).
    """
    n_feat = XS.shape[0]
    if in_node.all():
        o, xs = OT, XS
    else:
        # every feature keeps the same node rows, so the filtered orders stack
        m = in_node[OT]
        o = OT[m].reshape(n_feat, -1)
        xs = XS[m].reshape(n_feat, -1)
    if o.shape[1] < 2:
        return None
    GL = np.cumsum(g[o], axis=1)
    HL = np.cumsum(h[o], axis=1)
    G = GL[0, -1]
    H = HL[0, -1]
    GL = GL[:, :-1]
    HL = HL[:, :-1]
    GR = G - GL
    HR = H - HL
    ok = (xs[:, 1:] > xs[:, :-1]) & (HL >= mcw) & (HR >= mcw)
    if not ok.any():
        return None
    gain = 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - G * G / (H + lam))
    gain = np.where(ok, gain, -np.inf)
    flat = int(np.argmax(gain))  # first maximum: lowest feature, then lowest position
    f, i = divmod(flat, gain.shape[1])
    if not gain[f, i] > 0:
        return None
    return float(gain[f, i]), f, 0.5 * (xs[f, i] + xs[f, i + 1])


try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

if numba is not None:

    @numba.njit(cache=True)
    def _scan(XS, OT, in_node, g, h, lam, mcw):
        n_feat, n = XS.shape
        G = 0.0
        H = 0.0
        for r in range(n):
            row = OT[0, r]
            if in_node[row]:
                G += g[row]
                H += h[row]
        parent = G * G / (H + lam)
        best_gain = -np.inf
        best_f = -1
        best_thr = 0.0
        for f in range(n_feat):
            GL = 0.0
            HL = 0.0
            seen = False
            prev_x = 0.0
            cand_gain = -np.inf
            cand_thr = 0.0
            for r in range(n):
                row = OT[f, r]
                if not in_node[row]:
                    continue
                x = XS[f, r]
                if seen and x > prev_x and HL >= mcw and (H - HL) >= mcw:
                    GR = G - GL
                    HR = H - HL
                    gain = 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent)
                    if gain > cand_gain:
                        cand_gain = gain
                        cand_thr = 0.5 * (prev_x + x)
                GL += g[row]
                HL += h[row]
                prev_x = x
                seen = True
            if cand_gain > best_gain:
                best_gain = cand_gain
                best_f = f
                best_thr = cand_thr
        return best_gain, best_f, best_thr

    def _best_split(XS, OT, in_node, g, h, lam, mcw):
        gain, f, thr = _scan(XS, OT, in_node, g, h, lam, mcw)
        if f < 0 or not gain > 0:
            return None
        return float(gain), int(f), float(thr)

else:  # pragma: no cover
    _best_split = _best_split_numpy


def _build_tree(X, XS, OT, g, h, cfg: GbtConfig, split_fn=None) -> RegTree:
    feature, threshold, left, right, value = [], [], [], [], []
    lam = cfg.l2_lambda

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.ones(len(X), dtype=bool), 0)]
    while stack:
        nid, in_node, depth = stack.pop()
        split = None
        if depth < cfg.max_depth:
            split = (split_fn or _best_split)(XS, OT, in_node, g, h, lam, cfg.min_child_weight)
        if split is None:
            w = -g[in_node].sum() / (h[in_node].sum() + lam)
            value[nid] = float(w) + 0.0
            continue
        _, f, thr = split
        go_left = X[:, f] < thr
        feature[nid] = f
        threshold[nid] = float(thr)
        li, ri = new_node(), new_node()
        left[nid], right[nid] = li, ri
        stack.append((ri, in_node & ~go_left, depth + 1))
        stack.append((li, in_node & go_left, depth + 1))
    return RegTree(
        np.array(feature, dtype=np.intp),
        np.array(threshold, dtype=float),
        np.array(left, dtype=np.intp),
        np.array(right, dtype=np.intp),
        np.array(value, dtype=float),
    )


def train_gbt(X, y, config: GbtConfig | None = None, split_fn=None) -> GbtModel:
    """Fit ``config.n_rounds`` trees; ``split_fn`` swaps the split search (tests only)."""
    cfg = config or GbtConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(X) != len(y):
        raise ValueError("X and y lengths differ")
    if len(np.unique(y)) < 2:
        raise DegenerateLabels("binary classifier needs both classes in the training labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    if len(X) < MIN_POINTS:
        raise TooFewPoints(f"need at least {MIN_POINTS} training rows, got {len(X)}")

    ybar = y.mean()
    base = float(np.log(ybar / (1.0 - ybar)))
    OT = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T)
    XS = np.ascontiguousarray(np.take_along_axis(X, OT.T, axis=0).T)
    margin = np.full(len(X), base)
    losses = [logloss(y, margin)]
    trees = []
    for _ in range(cfg.n_rounds):
        p = sigmoid(margin)
        g = p - y
        h = p * (1.0 - p)
        tree = _build_tree(X, XS, OT, g, h, cfg, split_fn)
        trees.append(tree)
        margin = margin + cfg.learning_rate * tree.predict(X)
        losses.append(logloss(y, margin))
    return GbtModel(tuple(trees), cfg.learning_rate, cfg.max_depth, cfg.l2_lambda, base, tuple(losses))
