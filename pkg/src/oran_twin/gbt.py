"""Histogram gradient-boosted trees: Huber regression and one-vs-rest log-loss classification."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DegenerateTarget, ShapeError


@dataclass(frozen=True)
class GbtParams:
    rounds: int = 200
    depth: int = 4
    eta: float = 0.1
    delta: float = 1.0
    max_bins: int = 64
    min_child_weight: float = 1e-6
    cls_lambda: float = 1.0
    seed: int = 0


class Binner:
    """Per-feature split thresholds at midpoints between (quantiles of) observed values."""

    def __init__(self, thresholds: list[np.ndarray]):
        self.thresholds = thresholds

    @classmethod
    def fit(cls, X: np.ndarray, max_bins: int) -> "Binner":
        out = []
        for col in X.T:
            u = np.unique(col)
            if len(u) > max_bins:
                u = np.unique(np.quantile(col, np.linspace(0, 1, max_bins), method="inverted_cdf"))
            out.append((u[:-1] + u[1:]) / 2)
        return cls(out)

    def transform(self, X: np.ndarray) -> np.ndarray:
        return np.stack([np.searchsorted(t, X[:, j], side="left") for j, t in enumerate(self.thresholds)], axis=1)


@dataclass
class Tree:
    feature: list = field(default_factory=list)
    threshold: list = field(default_factory=list)
    left: list = field(default_factory=list)
    right: list = field(default_factory=list)
    value: list = field(default_factory=list)

    def add(self, feature=-1, threshold=0.0, value=0.0) -> int:
        self.feature.append(feature)
        self.threshold.append(threshold)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        return len(self.feature) - 1

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        feat = np.asarray(self.feature)
        thr = np.asarray(self.threshold, dtype=float)
        left, right = np.asarray(self.left), np.asarray(self.right)
        while True:
            f = feat[node]
            inner = f >= 0
            if not inner.any():
                break
            rows = np.flatnonzero(inner)
            go_left = X[rows, f[rows]] <= thr[node[rows]]
            node[rows] = np.where(go_left, left[node[rows]], right[node[rows]])
        return np.asarray(self.value, dtype=float)[node]

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        return cls(**{k: list(v) for k, v in d.items()})


def _grow(Xb, binner, g, h, idx, params, leaf_value, lam) -> Tree:
    """Depth-wise growth choosing splits by the Newton gain G^2/(H+lam)."""
    tree = Tree()
    n_feat = Xb.shape[1]
    nb = max((len(t) for t in binner.thresholds), default=0) + 1
    offsets = np.arange(n_feat) * nb
    n_thr = np.array([len(t) for t in binner.thresholds])
    valid = np.arange(nb)[None, :] < n_thr[:, None]

    def build(rows, depth):
        node = tree.add(value=leaf_value(rows))
        if depth >= params.depth or len(rows) < 2:
            return node
        flat = (Xb[rows] + offsets).ravel()
        G = np.bincount(flat, np.repeat(g[rows], n_feat), n_feat * nb).reshape(n_feat, nb)
        H = np.bincount(flat, np.repeat(h[rows], n_feat), n_feat * nb).reshape(n_feat, nb)
        C = np.bincount(flat, None, n_feat * nb).reshape(n_feat, nb)
        GL, HL, CL = G.cumsum(1), H.cumsum(1), C.cumsum(1)
        Gt, Ht, Ct = GL[:, -1:], HL[:, -1:], CL[:, -1:]
        GR, HR, CR = Gt - GL, Ht - HL, Ct - CL
        ok = valid & (CL > 0) & (CR > 0) & (HL >= params.min_child_weight) & (HR >= params.min_child_weight)
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = GL**2 / (HL + lam) + GR**2 / (HR + lam) - Gt**2 / (Ht + lam)
        gain = np.where(ok, gain, -np.inf)
        best = int(np.argmax(gain))
        f, j = divmod(best, nb)
        parent = float(Gt[0, 0] ** 2 / (Ht[0, 0] + lam)) if Ht[0, 0] + lam > 0 else 0.0
        if not np.isfinite(gain[f, j]) or gain[f, j] <= 1e-12 * (1.0 + parent):
            return node
        go_left = Xb[rows, f] <= j
        tree.feature[node] = f
        tree.threshold[node] = float(binner.thresholds[f][j])
        tree.left[node] = build(rows[go_left], depth + 1)
        tree.right[node] = build(rows[~go_left], depth + 1)
        return node

    build(idx, 0)
    return tree


def huber_loss(r, w, delta):
    a = np.abs(r)
    return float(np.sum(w * np.where(a <= delta, 0.5 * r**2, delta * (a - 0.5 * delta))))


def huber_minimizer(r, w, delta) -> float:
    """Exact argmin_c sum w * huber(r - c): a Newton step when every residual is quadratic, else bisection."""
    if w.sum() <= 0:
        return 0.0
    quad = np.abs(r) <= delta
    if quad.all():
        c = float(np.sum(w * r) / np.sum(w))
        if np.all(np.abs(r - c) <= delta):
            return c
    lo, hi = float(r.min()), float(r.max())
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.sum(w * np.clip(r - mid, -delta, delta)) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, abs(mid)):
            break
    return 0.5 * (lo + hi)


def _weighted_stats(y, w):
    m = w > 0
    mean = float(np.mean(y[m]))
    std = float(np.std(y[m]))
    return mean, std


class HuberRegressor:
    def __init__(self, params: GbtParams | None = None, name: str = ""):
        self.params = params or GbtParams()
        self.name = name
        self.constant: float | None = None
        self.mean = 0.0
        self.std = 1.0
        self.base = 0.0
        self.trees: list[Tree] = []
        self.loss_history: list[float] = []

    def fit(self, X, y, w, binner: Binner | None = None) -> "HuberRegressor":
        X, y, w = np.asarray(X, float), np.asarray(y, float), np.asarray(w, float)
        p = self.params
        keep = np.flatnonzero(w > 0)
        self.mean, self.std = _weighted_stats(y, w)
        if self.std == 0:
            warnings.warn(DegenerateTarget(self.name), stacklevel=2)
            self.constant = float(y[keep[0]])
            return self
        binner = binner or Binner.fit(X[keep], p.max_bins)
        Xb = binner.transform(X)
        z = (y - self.mean) / self.std
        self.base = huber_minimizer(z[keep], w[keep], p.delta)
        F = np.full(len(z), self.base)
        self.loss_history = [huber_loss(z[keep] - F[keep], w[keep], p.delta)]
        for _ in range(p.rounds):
            r = z - F
            g = w * np.clip(r, -p.delta, p.delta)

            def leaf(rows):
                return huber_minimizer(r[rows], w[rows], p.delta)

            tree = _grow(Xb, binner, g, w, keep, p, leaf, 0.0)
            tree.value = [p.eta * v for v in tree.value]
            self.trees.append(tree)
            F = F + tree.predict(X)
            self.loss_history.append(huber_loss(z[keep] - F[keep], w[keep], p.delta))
        return self

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, float))
        if self.constant is not None:
            return np.full(len(X), self.constant)
        F = np.full(len(X), self.base)
        for t in self.trees:
            F += t.predict(X)
        return F * self.std + self.mean

    def to_json(self):
        return {
            "name": self.name,
            "constant": self.constant,
            "mean": self.mean,
            "std": self.std,
            "base": self.base,
            "trees": [t.to_json() for t in self.trees],
        }

    @classmethod
    def from_json(cls, d, params=None):
        m = cls(params, d["name"])
        m.constant, m.mean, m.std, m.base = d["constant"], d["mean"], d["std"], d["base"]
        m.trees = [Tree.from_json(t) for t in d["trees"]]
        return m


def _sigmoid(x):
    return 0.5 * (1 + np.tanh(0.5 * x))


class OvrClassifier:
    """One binary log-loss ensemble per observed class; probabilities are a softmax over raw scores."""

    def __init__(self, values: tuple, params: GbtParams | None = None, name: str = ""):
        self.values = tuple(values)
        self.params = params or GbtParams()
        self.name = name
        self.classes: list[int] = []  # indices into values that were seen in training
        self.bases: list[float] = []
        self.trees: list[list[Tree]] = []

    def fit(self, X, labels, w, binner: Binner | None = None) -> "OvrClassifier":
        X, w = np.asarray(X, float), np.asarray(w, float)
        y = np.array([self.values.index(v) for v in labels])
        p = self.params
        keep = np.flatnonzero(w > 0)
        self.classes = sorted(set(y[keep].tolist()))
        if len(self.classes) == 1:
            warnings.warn(DegenerateTarget(self.name), stacklevel=2)
            return self
        binner = binner or Binner.fit(X[keep], p.max_bins)
        Xb = binner.transform(X)
        counts = {c: w[keep][y[keep] == c].sum() for c in self.classes}
        cw = np.array([sum(counts.values()) / (len(counts) * counts[c]) if c in counts else 0.0 for c in y]) * w
        for c in self.classes:
            t = (y == c).astype(float)
            pos = np.sum(cw[keep] * t[keep])
            base = float(np.log(pos / (np.sum(cw[keep]) - pos)))
            F = np.full(len(y), base)
            trees = []
            for _ in range(p.rounds):
                prob = _sigmoid(F)
                g = cw * (prob - t)
                h = cw * prob * (1 - prob)

                def leaf(rows):
                    return -float(g[rows].sum() / (h[rows].sum() + p.cls_lambda))

                tree = _grow(Xb, binner, g, h, keep, p, leaf, p.cls_lambda)
                tree.value = [p.eta * v for v in tree.value]
                trees.append(tree)
                F = F + tree.predict(X)
            self.bases.append(base)
            self.trees.append(trees)
        return self

    def raw_scores(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, float))
        S = np.empty((len(X), len(self.classes)))
        for i, (base, trees) in enumerate(zip(self.bases, self.trees)):
            S[:, i] = base + sum((t.predict(X) for t in trees), np.zeros(len(X)))
        return S

    def predict_proba(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, float))
        out = np.zeros((len(X), len(self.values)))
        if len(self.classes) == 1:
            out[:, self.classes[0]] = 1.0
            return out
        S = self.raw_scores(X)
        S -= S.max(axis=1, keepdims=True)
        E = np.exp(S)
        out[:, self.classes] = E / E.sum(axis=1, keepdims=True)
        return out

    def to_json(self):
        return {
            "name": self.name,
            "values": list(self.values),
            "classes": self.classes,
            "bases": self.bases,
            "trees": [[t.to_json() for t in ts] for ts in self.trees],
        }

    @classmethod
    def from_json(cls, d, params=None):
        m = cls(tuple(d["values"]), params, d["name"])
        m.classes, m.bases = list(d["classes"]), list(d["bases"])
        m.trees = [[Tree.from_json(t) for t in ts] for ts in d["trees"]]
        return m


def check_dim(X, n):
    X = np.atleast_2d(np.asarray(X, float))
    if X.shape[1] != n:
        raise ShapeError(f"expected {n} features, got {X.shape[1]}")
    return X
