"""CART random forests and second-order gradient boosted trees.

Both ensembles use exact greedy split search over sorted feature values and
expose impurity/gain based feature importances.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .fs import FeatureScores
from .nn import CLASSIFICATION, REGRESSION


@dataclass
class Tree:
    """Array-backed binary tree; ``left == -1`` marks a leaf.

    ``value`` has one row per node (class distribution, mean target or leaf
    weight).  ``gain`` holds the split gain (boosting) or weighted impurity
    decrease (forest) for internal nodes.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    impurity: np.ndarray
    n_samples: np.ndarray
    value: np.ndarray
    gain: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    @property
    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.left[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max(initial=0))

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.intp)
        rows = np.arange(X.shape[0])
        while True:
            internal = self.left[node] >= 0
            if not internal.any():
                return node
            f = np.where(internal, self.feature[node], 0)
            go_left = X[rows, f] <= self.threshold[node]
            node = np.where(internal, np.where(go_left, self.left[node], self.right[node]), node)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        return {k: v.tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        ints = {"feature", "left", "right", "n_samples"}
        return cls(**{k: np.array(v, dtype=np.intp if k in ints else np.float64) for k, v in d.items()})


class _TreeBuilder:
    def __init__(self, n_out: int):
        self.cols = {k: [] for k in ("feature", "threshold", "left", "right", "impurity", "n_samples", "value", "gain")}
        self.n_out = n_out

    def add(self, impurity, n_samples, value) -> int:
        c = self.cols
        c["feature"].append(-1)
        c["threshold"].append(0.0)
        c["left"].append(-1)
        c["right"].append(-1)
        c["impurity"].append(impurity)
        c["n_samples"].append(n_samples)
        c["value"].append(np.asarray(value, dtype=np.float64).reshape(self.n_out))
        c["gain"].append(0.0)
        return len(c["feature"]) - 1

    def set_split(self, node, feature, threshold, left, right, gain):
        c = self.cols
        c["feature"][node] = feature
        c["threshold"][node] = threshold
        c["left"][node] = left
        c["right"][node] = right
        c["gain"][node] = gain

    def build(self) -> Tree:
        c = self.cols
        ints = {"feature", "left", "right", "n_samples"}
        arrays = {}
        for k, v in c.items():
            if k == "value":
                arrays[k] = np.array(v, dtype=np.float64).reshape(len(v), self.n_out)
            else:
                arrays[k] = np.array(v, dtype=np.intp if k in ints else np.float64)
        return Tree(**arrays)


def _presort(X: np.ndarray) -> np.ndarray:
    return np.argsort(X, axis=0, kind="stable")


def _root_order(presorted: np.ndarray, counts: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Per-column sorted row ids of a (multi)set of rows.

    ``counts[i]`` is how often row ``i`` occurs in the sample (bootstrap
    multiplicity, 0 for excluded rows).
    """
    order = presorted[:, cols].T.ravel()
    total = int(counts.sum())
    return np.repeat(order, counts[order]).reshape(cols.size, total).T


def _partition(sorted_idx: np.ndarray, go_left_rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split every column of ``sorted_idx`` into left/right, keeping the order."""
    mask = go_left_rows[sorted_idx]
    n_left = int(mask[:, 0].sum())
    cols = sorted_idx.shape[1]
    left = sorted_idx.T[mask.T].reshape(cols, n_left).T
    right = sorted_idx.T[~mask.T].reshape(cols, sorted_idx.shape[0] - n_left).T
    return left, right


def _threshold(lo, hi):
    mid = 0.5 * (lo + hi)
    return lo if mid >= hi else mid


# -- random forest ---------------------------------------------------------------


@dataclass(frozen=True)
class ForestConfig:
    n_estimators: int = 100
    max_depth: int = 10
    max_features: Optional[int] = None

    def __post_init__(self):
        if self.n_estimators < 1 or self.max_depth < 1:
            raise ValueError(f"invalid forest config {self}")


def _node_impurity(y_node, task, n_classes):
    if task == CLASSIFICATION:
        p = np.bincount(y_node, minlength=n_classes) / y_node.size
        return 1.0 - float(np.sum(p * p)), p
    mu = float(y_node.mean())
    return float(np.mean((y_node - mu) ** 2)), np.array([mu])


def _best_impurity_split(X, y, sorted_idx, features, task, n_classes, parent_impurity):
    """Best (column in ``features``, threshold, impurity decrease) for one node."""
    sidx = sorted_idx[:, features]
    xs = X[sidx, features[None, :]]
    n_t = sidx.shape[0]
    n_left = np.arange(1, n_t, dtype=np.float64)[:, None]
    n_right = n_t - n_left
    if task == CLASSIFICATION:
        counts = np.cumsum(np.eye(n_classes)[y[sidx]], axis=0)  # (n_t, f, K)
        left = counts[:-1]
        right = counts[-1][None] - left
        gini_l = 1.0 - np.sum(left * left, axis=2) / (n_left * n_left)
        gini_r = 1.0 - np.sum(right * right, axis=2) / (n_right * n_right)
        child = (n_left * gini_l + n_right * gini_r) / n_t
    else:
        ys = y[sidx]
        s1 = np.cumsum(ys, axis=0)
        s2 = np.cumsum(ys * ys, axis=0)
        sse_l = s2[:-1] - s1[:-1] ** 2 / n_left
        r1 = s1[-1][None] - s1[:-1]
        r2 = s2[-1][None] - s2[:-1]
        sse_r = r2 - r1**2 / n_right
        child = (sse_l + sse_r) / n_t
    decrease = np.where(xs[1:] > xs[:-1], parent_impurity - child, -np.inf)
    pos, col = divmod(int(np.argmax(decrease)), decrease.shape[1])
    return col, _threshold(xs[pos, col], xs[pos + 1, col]), decrease[pos, col]


def _grow_impurity_tree(X, y, sorted_idx, task, n_classes, max_depth, max_features, rng, n_root) -> Tree:
    n_out = n_classes if task == CLASSIFICATION else 1
    builder = _TreeBuilder(n_out)
    m = X.shape[1]
    imp, val = _node_impurity(y[np.sort(sorted_idx[:, 0])], task, n_classes)
    root = builder.add(imp, sorted_idx.shape[0], val)
    stack = [(root, sorted_idx, 0, imp)]
    go_left = np.zeros(X.shape[0], dtype=bool)
    while stack:
        node, sidx, depth, imp = stack.pop()
        n_t = sidx.shape[0]
        if depth >= max_depth or n_t < 2 or imp <= 1e-15:
            continue
        features = np.sort(rng.choice(m, size=max_features, replace=False))
        col, thr, decrease = _best_impurity_split(X, y, sidx, features, task, n_classes, imp)
        if not decrease > 1e-12:
            continue
        f = int(features[col])
        rows = sidx[:, 0]
        go_left[rows] = X[rows, f] <= thr
        li, ri = _partition(sidx, go_left)
        # row-id order keeps node statistics independent of column order
        l_imp, l_val = _node_impurity(y[np.sort(li[:, 0])], task, n_classes)
        r_imp, r_val = _node_impurity(y[np.sort(ri[:, 0])], task, n_classes)
        left = builder.add(l_imp, li.shape[0], l_val)
        right = builder.add(r_imp, ri.shape[0], r_val)
        builder.set_split(node, f, thr, left, right, n_t / n_root * decrease)
        stack.append((right, ri, depth + 1, r_imp))
        stack.append((left, li, depth + 1, l_imp))
    return builder.build()


@dataclass
class Forest:
    trees: list[Tree]
    task: str
    n_classes: int
    n_features: int

    def predict(self, X) -> np.ndarray:
        """Majority vote (classification) or mean prediction (regression)."""
        X = _check_features(X, self.n_features)
        if self.task == CLASSIFICATION:
            votes = np.zeros((X.shape[0], self.n_classes))
            rows = np.arange(X.shape[0])
            for t in self.trees:
                votes[rows, np.argmax(t.predict(X), axis=1)] += 1
            return np.argmax(votes, axis=1)
        return np.mean([t.predict(X)[:, 0] for t in self.trees], axis=0)

    def to_dict(self) -> dict:
        return {
            "kind": "forest",
            "task": self.task,
            "n_classes": self.n_classes,
            "n_features": self.n_features,
            "trees": [t.to_dict() for t in self.trees],
        }


def _check_features(X, n_features):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != n_features:
        raise ValueError(f"expected {n_features} features, got array of shape {X.shape}")
    return X


def _split_importance(trees: list[Tree], m: int, reduce: str) -> np.ndarray:
    total = np.zeros(m)
    count = np.zeros(m)
    for t in trees:
        internal = t.left >= 0
        np.add.at(total, t.feature[internal], t.gain[internal])
        np.add.at(count, t.feature[internal], 1)
    if reduce == "mean":
        total = np.divide(total, count, out=np.zeros(m), where=count > 0)
    else:
        total /= max(len(trees), 1)
    s = total.sum()
    return total / s if s > 0 else total


def fit_forest(X, y, task: str, cfg: ForestConfig = ForestConfig(), seed: int = 0) -> tuple[Forest, FeatureScores]:
    """Bootstrap CART forest; importance is mean decrease in impurity, normalized to sum 1."""
    X = np.asarray(X, dtype=np.float64)
    n, m = X.shape
    if n < 2:
        raise ValueError("forest needs at least 2 samples")
    if task == CLASSIFICATION:
        y = np.asarray(y).astype(np.intp)
        n_classes = int(y.max()) + 1
        if np.unique(y).size < 2:
            raise ValueError("classification forest needs at least two classes")
        default_mtry = int(np.sqrt(m))
    elif task == REGRESSION:
        y = np.asarray(y, dtype=np.float64)
        n_classes = 0
        default_mtry = m // 3
    else:
        raise ValueError(f"unknown task {task!r}")
    mtry = min(m, max(1, cfg.max_features or default_mtry))
    rng = np.random.default_rng(seed)
    presorted = _presort(X)
    all_cols = np.arange(m)
    trees = []
    for _ in range(cfg.n_estimators):
        counts = np.bincount(rng.integers(0, n, size=n), minlength=n)
        root = _root_order(presorted, counts, all_cols)
        trees.append(_grow_impurity_tree(X, y, root, task, n_classes, cfg.max_depth, mtry, rng, n))
    forest = Forest(trees, task, n_classes, m)
    return forest, FeatureScores(_split_importance(trees, m, "sum"), "random_forest")


# -- gradient boosting ----------------------------------------------------------


@dataclass(frozen=True)
class GbdtConfig:
    n_estimators: int = 2000
    max_depth: int = 6
    min_child_weight: float = 1.0
    subsample: float = 1.0
    learning_rate: float = 0.3
    colsample_bytree: float = 1.0
    gamma: float = 0.0
    reg_lambda: float = 1.0
    early_stopping_rounds: int = 50

    def __post_init__(self):
        if not 1 <= self.n_estimators <= 2000:
            raise ValueError("n_estimators must lie in [1, 2000]")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not (0 < self.subsample <= 1 and 0 < self.colsample_bytree <= 1):
            raise ValueError("subsample and colsample_bytree must lie in (0, 1]")
        if self.reg_lambda < 0 or self.gamma < 0 or self.min_child_weight < 0:
            raise ValueError("regularization parameters must be non-negative")


# splits must gain more than this after gamma (guards against rounding-level gains)
MIN_SPLIT_GAIN = 1e-6


def split_gain(G_L, H_L, G_R, H_R, reg_lambda, gamma):
    """0.5 * [G_L^2/(H_L+l) + G_R^2/(H_R+l) - G^2/(H+l)] - gamma."""
    G, H = G_L + G_R, H_L + H_R
    with np.errstate(divide="ignore", invalid="ignore"):
        score = G_L**2 / (H_L + reg_lambda) + G_R**2 / (H_R + reg_lambda) - G**2 / (H + reg_lambda)
    return 0.5 * score - gamma


def _leaf_weight(G, H, reg_lambda):
    return -G / max(H + reg_lambda, 1e-12)


def _grow_boosted_tree(X, g, h, sorted_idx, features, cfg: GbdtConfig) -> Tree:
    """``sorted_idx`` holds the node rows sorted by each column of ``features``."""
    builder = _TreeBuilder(1)
    rows = np.sort(sorted_idx[:, 0])
    root = builder.add(0.0, rows.size, _leaf_weight(g[rows].sum(), h[rows].sum(), cfg.reg_lambda))
    stack = [(root, sorted_idx, 0)]
    go_left = np.zeros(X.shape[0], dtype=bool)
    while stack:
        node, sidx, depth = stack.pop()
        if depth >= cfg.max_depth or sidx.shape[0] < 2:
            continue
        xs = X[sidx, features[None, :]]
        gl = np.cumsum(g[sidx], axis=0)
        hl = np.cumsum(h[sidx], axis=0)
        G, H = gl[-1], hl[-1]
        gl, hl = gl[:-1], hl[:-1]
        gain = split_gain(gl, hl, G[None] - gl, H[None] - hl, cfg.reg_lambda, cfg.gamma)
        ok = (xs[1:] > xs[:-1]) & (hl >= cfg.min_child_weight) & (H[None] - hl >= cfg.min_child_weight)
        gain = np.where(ok & np.isfinite(gain), gain, -np.inf)
        pos, col = divmod(int(np.argmax(gain)), gain.shape[1])
        best = gain[pos, col]
        if not best > MIN_SPLIT_GAIN:
            continue
        f = int(features[col])
        thr = _threshold(xs[pos, col], xs[pos + 1, col])
        rows = sidx[:, 0]
        go_left[rows] = X[rows, f] <= thr
        li, ri = _partition(sidx, go_left)
        lr, rr = np.sort(li[:, 0]), np.sort(ri[:, 0])
        left = builder.add(0.0, lr.size, _leaf_weight(g[lr].sum(), h[lr].sum(), cfg.reg_lambda))
        right = builder.add(0.0, rr.size, _leaf_weight(g[rr].sum(), h[rr].sum(), cfg.reg_lambda))
        builder.set_split(node, f, thr, left, right, float(best))
        stack.append((right, ri, depth + 1))
        stack.append((left, li, depth + 1))
    return builder.build()


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class Gbdt:
    """Boosted ensemble; ``rounds[r][k]`` is the tree for output ``k`` at round ``r``."""

    rounds: list[list[Tree]]
    task: str
    n_classes: int
    n_features: int
    base_score: np.ndarray
    learning_rate: float
    history: list[float] = field(default_factory=list)
    best_iteration: int = 0

    @property
    def n_outputs(self) -> int:
        return int(self.base_score.size)

    def raw_predict(self, X, n_rounds: Optional[int] = None) -> np.ndarray:
        """Margin: base score plus the learning-rate-scaled sum of tree outputs."""
        X = _check_features(X, self.n_features)
        out = np.tile(self.base_score, (X.shape[0], 1))
        for trees in self.rounds[:n_rounds]:
            for k, t in enumerate(trees):
                out[:, k] += self.learning_rate * t.predict(X)[:, 0]
        return out

    def predict_proba(self, X) -> np.ndarray:
        raw = self.raw_predict(X)
        if self.task != CLASSIFICATION:
            raise ValueError("predict_proba is only defined for classification")
        if self.n_outputs == 1:
            p = 1.0 / (1.0 + np.exp(-raw[:, 0]))
            return np.column_stack([1 - p, p])
        return _softmax(raw)

    def predict(self, X) -> np.ndarray:
        if self.task == CLASSIFICATION:
            return np.argmax(self.predict_proba(X), axis=1)
        return self.raw_predict(X)[:, 0]

    def to_dict(self) -> dict:
        return {
            "kind": "gbdt",
            "task": self.task,
            "n_classes": self.n_classes,
            "n_features": self.n_features,
            "base_score": self.base_score.tolist(),
            "learning_rate": self.learning_rate,
            "best_iteration": self.best_iteration,
            "rounds": [[t.to_dict() for t in r] for r in self.rounds],
        }


def _grad_hess(task, n_out, raw, y):
    if task == REGRESSION:
        return raw - y[:, None], np.ones_like(raw)
    if n_out == 1:
        p = 1.0 / (1.0 + np.exp(-raw[:, 0]))
        return (p - y)[:, None], np.maximum(p * (1 - p), 1e-16)[:, None]
    p = _softmax(raw)
    onehot = np.eye(n_out)[y]
    return p - onehot, np.maximum(p * (1 - p), 1e-16)


def _val_loss(task, n_out, raw, y):
    if task == REGRESSION:
        return float(np.sqrt(np.mean((raw[:, 0] - y) ** 2)))
    if n_out == 1:
        p = np.clip(1.0 / (1.0 + np.exp(-raw[:, 0])), 1e-15, 1 - 1e-15)
        return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))
    p = np.clip(_softmax(raw), 1e-15, 1.0)
    return float(-np.mean(np.log(p[np.arange(y.size), y])))


def fit_gbdt(
    X, y, task: str, cfg: GbdtConfig = GbdtConfig(), seed: int = 0, val: Optional[tuple] = None
) -> tuple[Gbdt, FeatureScores]:
    """Second-order boosting with exact greedy splits.

    Squared loss for regression, logistic loss for two classes and one
    softmax tree per class per round otherwise.  With ``val`` given, training
    stops after ``early_stopping_rounds`` rounds without a better validation
    loss and the ensemble is truncated to the best round.  Importance is the
    average split gain per feature, normalized to sum 1.
    """
    X = np.asarray(X, dtype=np.float64)
    n, m = X.shape
    if task == CLASSIFICATION:
        y = np.asarray(y).astype(np.intp)
        n_classes = int(y.max()) + 1
        n_out = 1 if n_classes <= 2 else n_classes
        freq = np.clip(np.bincount(y, minlength=n_classes) / n, 1e-6, 1.0)
        base = np.array([np.log(freq[1] / freq[0])]) if n_out == 1 else np.log(freq)
    elif task == REGRESSION:
        y = np.asarray(y, dtype=np.float64)
        n_classes, n_out = 0, 1
        base = np.array([y.mean()])
    else:
        raise ValueError(f"unknown task {task!r}")

    rng = np.random.default_rng(seed)
    presorted = _presort(X)
    raw = np.tile(base, (n, 1))
    if val is not None:
        Xv = _check_features(val[0], m)
        yv = np.asarray(val[1]).astype(y.dtype)
        raw_v = np.tile(base, (Xv.shape[0], 1))
    model = Gbdt([], task, n_classes, m, base, cfg.learning_rate)
    best_loss, stale = np.inf, 0
    n_rows = max(1, int(round(cfg.subsample * n)))
    n_cols = max(1, int(round(cfg.colsample_bytree * m)))
    for r in range(cfg.n_estimators):
        g, h = _grad_hess(task, n_out, raw, y)
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(h))):
            raise FloatingPointError(f"non-finite gradients at boosting round {r}")
        counts = np.ones(n, dtype=np.intp)
        if n_rows < n:
            counts[:] = 0
            counts[rng.choice(n, size=n_rows, replace=False)] = 1
        cols = np.sort(rng.choice(m, size=n_cols, replace=False)) if n_cols < m else np.arange(m)
        root = _root_order(presorted, counts, cols)
        trees = [_grow_boosted_tree(X, g[:, k], h[:, k], root, cols, cfg) for k in range(n_out)]
        model.rounds.append(trees)
        for k, t in enumerate(trees):
            raw[:, k] += cfg.learning_rate * t.predict(X)[:, 0]
        if val is not None:
            for k, t in enumerate(trees):
                raw_v[:, k] += cfg.learning_rate * t.predict(Xv)[:, 0]
            vl = _val_loss(task, n_out, raw_v, yv)
            model.history.append(vl)
            if vl < best_loss:
                best_loss, stale, model.best_iteration = vl, 0, r + 1
            else:
                stale += 1
                if stale >= cfg.early_stopping_rounds:
                    break
        else:
            model.best_iteration = r + 1
    model.rounds = model.rounds[: model.best_iteration]
    kept = [t for trees in model.rounds for t in trees]
    return model, FeatureScores(_split_importance(kept, m, "mean"), "xgboost")


# -- serialization ----------------------------------------------------------------


def save_ensemble(model, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_dict()), encoding="utf-8")


def load_ensemble(path: str | Path):
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    if d["kind"] == "forest":
        return Forest([Tree.from_dict(t) for t in d["trees"]], d["task"], d["n_classes"], d["n_features"])
    if d["kind"] == "gbdt":
        rounds = [[Tree.from_dict(t) for t in r] for r in d["rounds"]]
        return Gbdt(
            rounds,
            d["task"],
            d["n_classes"],
            d["n_features"],
            np.array(d["base_score"]),
            d["learning_rate"],
            best_iteration=d["best_iteration"],
        )
    raise ValueError(f"unknown ensemble kind {d['kind']!r}")
