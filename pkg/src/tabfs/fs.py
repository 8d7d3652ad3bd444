"""Filter and regularizer feature selectors.

Each selector returns a :class:`FeatureScores` vector (larger = more
important); :func:`select_top_k` turns scores into a feature subset.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .nn import CLASSIFICATION, REGRESSION, Mlp, MlpSpec, TrainConfig, TrainedModel, build_mlp, fit, loss

logger = logging.getLogger(__name__)

EPS_NORM = 1e-12


@dataclass(frozen=True)
class FeatureScores:
    scores: np.ndarray
    method: str
    computed_on: str = "train"

    def __post_init__(self):
        scores = np.array(self.scores, dtype=np.float64)
        if scores.ndim != 1:
            raise ValueError("scores must be a 1-D vector")
        if not np.all(np.isfinite(scores)) or np.any(scores < 0):
            raise ValueError(f"{self.method}: scores must be finite and non-negative")
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)

    def __len__(self):
        return self.scores.size


@dataclass(frozen=True)
class PenaltyConfig:
    """Objective ``alpha * loss + (1 - alpha) * penalty``."""

    alpha: float = 0.9
    gamma: float = 1.0
    eps_norm: float = EPS_NORM

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")

    @classmethod
    def from_penalty_weight(cls, weight: float, **kw) -> "PenaltyConfig":
        return cls(alpha=1.0 - weight, **kw)


def select_top_k(scores, k: int) -> list[int]:
    """Indices of the ``k`` largest scores, ties to the lower index, sorted ascending."""
    s = scores.scores if isinstance(scores, FeatureScores) else np.asarray(scores, dtype=np.float64)
    if not 1 <= k <= s.size:
        raise ValueError(f"k must lie in [1, {s.size}], got {k}")
    order = np.lexsort((np.arange(s.size), -s))
    return sorted(int(i) for i in order[:k])


# -- univariate ----------------------------------------------------------------


def univariate_scores(X, y, task: str) -> FeatureScores:
    """ANOVA F (classification) or univariate regression F statistics."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if np.isnan(X).any() or np.isnan(y.astype(np.float64)).any():
        raise ValueError("univariate test: NaN in inputs")
    n = X.shape[0]
    if n < 3:
        raise ValueError("univariate test needs at least 3 samples")
    tiny = np.finfo(np.float64).eps

    if task == CLASSIFICATION:
        classes = np.unique(y)
        k = classes.size
        if k < 2:
            raise ValueError("univariate test needs at least two classes")
        if n - k <= 0:
            raise ValueError(f"ANOVA needs more samples than classes (n={n}, k={k})")
        grand = X.mean(axis=0)
        ss_between = np.zeros(X.shape[1])
        ss_within = np.zeros(X.shape[1])
        for c in classes:
            Xc = X[y == c]
            mc = Xc.mean(axis=0)
            ss_between += Xc.shape[0] * (mc - grand) ** 2
            ss_within += ((Xc - mc) ** 2).sum(axis=0)
        ms_between = ss_between / (k - 1)
        ms_within = ss_within / (n - k)
        scale = ((X - grand) ** 2).sum(axis=0) / (n - 1)
        F = ms_between / np.maximum(ms_within, tiny * np.maximum(scale, tiny))
        F[scale <= 0] = 0.0
    elif task == REGRESSION:
        Xc = X - X.mean(axis=0)
        yc = y.astype(np.float64) - y.mean()
        sx = np.sqrt((Xc**2).sum(axis=0))
        sy = np.sqrt((yc**2).sum())
        with np.errstate(invalid="ignore", divide="ignore"):
            r = (Xc.T @ yc) / (sx * sy)
        r = np.where((sx > 0) & (sy > 0), r, 0.0)
        r2 = np.clip(r * r, 0.0, 1.0)
        F = r2 / np.maximum(1.0 - r2, tiny) * (n - 2)
    else:
        raise ValueError(f"unknown task {task!r}")
    return FeatureScores(F, "univariate")


# -- linear lasso ----------------------------------------------------------------


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def _group_soft_threshold(W, t):
    """Row-wise group shrinkage: each row (one feature across outputs) is a group."""
    norms = np.sqrt((W * W).sum(axis=1, keepdims=True))
    with np.errstate(invalid="ignore", divide="ignore"):
        factor = np.where(norms > t, 1.0 - t / norms, 0.0)
    return W * factor


def lasso_fit(
    X,
    y,
    task: str,
    alpha: float,
    seed: int = 0,
    max_iter: int = 2000,
    tol: float = 1e-8,
) -> FeatureScores:
    """L1-penalized linear model, fit by accelerated proximal gradient (FISTA).

    Minimizes ``alpha * loss + (1 - alpha) * ||W||_1`` with the intercept left
    unpenalized.  Regression uses mean squared error and scores are ``|w_j|``;
    classification uses multinomial cross-entropy with one group per feature
    (its coefficients across classes) and scores are the group L2 norms.
    ``seed`` is accepted for interface uniformity; the solver is deterministic.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    X = np.asarray(X, dtype=np.float64)
    n, m = X.shape
    lam = 1.0 - alpha
    Xa = np.hstack([X, np.ones((n, 1))])
    spec_norm2 = np.linalg.norm(Xa, 2) ** 2

    if task == REGRESSION:
        Y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
        lipschitz = alpha * 2.0 * spec_norm2 / n

        def smooth_grad(W):
            r = Xa @ W - Y
            return alpha * 2.0 / n * (Xa.T @ r)

        def smooth_loss(W):
            r = Xa @ W - Y
            return alpha * float(np.mean(r * r))

        prox = soft_threshold
    elif task == CLASSIFICATION:
        labels = np.asarray(y).astype(np.intp)
        K = int(labels.max()) + 1
        Y = np.zeros((n, K))
        Y[np.arange(n), labels] = 1.0
        lipschitz = alpha * 0.5 * spec_norm2 / n

        def softmax(W):
            z = Xa @ W
            z -= z.max(axis=1, keepdims=True)
            e = np.exp(z)
            return e / e.sum(axis=1, keepdims=True)

        def smooth_grad(W):
            return alpha / n * (Xa.T @ (softmax(W) - Y))

        def smooth_loss(W):
            p = softmax(W)
            return -alpha * float(np.mean(np.log(np.maximum((p * Y).sum(axis=1), 1e-300))))

        prox = _group_soft_threshold
    else:
        raise ValueError(f"unknown task {task!r}")

    step = 1.0 / max(lipschitz, 1e-12)
    W = np.zeros((m + 1, Y.shape[1]))
    Z = W.copy()
    t = 1.0
    for it in range(max_iter):
        G = smooth_grad(Z)
        W_new = Z - step * G
        W_new[:m] = prox(W_new[:m], step * lam)
        if not np.all(np.isfinite(W_new)):
            raise FloatingPointError("lasso diverged; use a smaller step size")
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        Z = W_new + ((t - 1.0) / t_new) * (W_new - W)
        delta = np.max(np.abs(W_new - W))
        W, t = W_new, t_new
        if delta <= tol * max(1.0, np.max(np.abs(W))):
            break
    if not np.isfinite(smooth_loss(W)):
        raise FloatingPointError("lasso diverged; use a smaller step size")
    coef = W[:m]
    scores = np.abs(coef[:, 0]) if task == REGRESSION else np.sqrt((coef * coef).sum(axis=1))
    return FeatureScores(scores, "lasso")


# -- group penalties on networks ---------------------------------------------------


def group_lasso_penalty(W: ad.Node, weights=None, eps_norm: float = EPS_NORM) -> ad.Node:
    """Sum over input columns of ``c_j * sqrt(||W[:, j]||^2 + eps_norm)``."""
    if len(W.shape) != 2:
        raise ValueError(f"group lasso expects a weight matrix, got shape {W.shape}")
    norms = ad.sqrt(ad.sum(ad.square(W), axis=0, keepdims=True) + eps_norm)
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64).reshape(1, -1)
        if weights.shape[1] != W.shape[1]:
            raise ValueError(f"{weights.shape[1]} group weights for {W.shape[1]} groups")
        norms = norms * ad.const(weights)
    return ad.sum(norms)


def deep_lasso_penalty(loss_node: ad.Node, x_node: ad.Node, eps_norm: float = EPS_NORM) -> ad.Node:
    """Group norm of input gradients: sum_j sqrt(sum_i (dL/dx_ij)^2 + eps_norm).

    The input gradient is built as graph nodes, so the returned penalty can be
    differentiated with respect to the model parameters.
    """
    if x_node.op != "input":
        raise ValueError("deep lasso penalty needs the features as a differentiable input node")
    (g,) = ad.grad(loss_node, [x_node])
    return ad.sum(ad.sqrt(ad.sum(ad.square(g), axis=0) + eps_norm))


def adaptive_group_weights(W_hat: np.ndarray, gamma: float, eps_norm: float = EPS_NORM) -> np.ndarray:
    norms = np.sqrt((np.asarray(W_hat, dtype=np.float64) ** 2).sum(axis=0))
    if np.all(norms == 0):
        warnings.warn("group lasso estimate is all zero; adaptive weights capped at 1/eps_norm", RuntimeWarning)
    return 1.0 / (norms**gamma + eps_norm)


def column_norms(W: np.ndarray) -> np.ndarray:
    return np.sqrt((W * W).sum(axis=0))


@dataclass
class NetworkSelection:
    """Scores together with the trained network they were read from."""

    scores: FeatureScores
    model: TrainedModel
    extra: dict = field(default_factory=dict)


def _first_layer_hook(alpha: float, weights=None, eps_norm: float = EPS_NORM):
    if alpha == 1.0:
        return lambda L, x, params: L

    def hook(L, x, params):
        return L * alpha + group_lasso_penalty(params[0], weights, eps_norm) * (1.0 - alpha)

    return hook


def _check_network(spec: MlpSpec, X_train):
    if spec.in_dim != np.asarray(X_train).shape[1]:
        raise ValueError(f"model expects {spec.in_dim} features, data has {np.asarray(X_train).shape[1]}")


def first_layer_lasso_fit(
    spec: MlpSpec, X_train, y_train, X_val, y_val, task: str, cfg: TrainConfig, pcfg: PenaltyConfig, weights=None
) -> NetworkSelection:
    _check_network(spec, X_train)
    init = build_mlp(spec, cfg.seed)
    hook = _first_layer_hook(pcfg.alpha, weights, pcfg.eps_norm)
    model = fit(init, X_train, y_train, X_val, y_val, task, cfg, penalty=hook)
    scores = FeatureScores(column_norms(model.mlp.first_layer), "first_layer_lasso")
    return NetworkSelection(scores, model)


def adaptive_group_lasso_fit(
    spec: MlpSpec, X_train, y_train, X_val, y_val, task: str, cfg: TrainConfig, pcfg: PenaltyConfig
) -> NetworkSelection:
    """Two-stage group lasso: stage-2 groups are reweighted by stage-1 norms."""
    stage1 = first_layer_lasso_fit(spec, X_train, y_train, X_val, y_val, task, cfg, pcfg)
    weights = adaptive_group_weights(stage1.model.mlp.first_layer, pcfg.gamma, pcfg.eps_norm)
    stage2 = first_layer_lasso_fit(spec, X_train, y_train, X_val, y_val, task, cfg, pcfg, weights=weights)
    scores = FeatureScores(stage2.scores.scores, "adaptive_group_lasso")
    return NetworkSelection(scores, stage2.model, {"stage1_scores": stage1.scores, "group_weights": weights})


def deep_lasso_hook(alpha: float, eps_norm: float = EPS_NORM):
    if alpha == 1.0:
        return lambda L, x, params: L

    def hook(L, x, params):
        return L * alpha + deep_lasso_penalty(L, x, eps_norm) * (1.0 - alpha)

    return hook


def input_gradient_importance(mlp: Mlp, X, y, task: str, batch_size: int = 512) -> np.ndarray:
    """Per-feature norm of dL/dX over the whole set, with L the mean loss.

    Dropout is off.  Accumulated batch-wise from the per-sample gradients of
    the summed loss, then rescaled by ``1/n``.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    sq = np.zeros(X.shape[1])
    params = [ad.const(p) for p in mlp.params]
    for start in range(0, n, batch_size):
        xb = ad.var(X[start : start + batch_size])
        out = mlp.forward_graph(xb, params)
        total = loss(out, np.asarray(y)[start : start + batch_size], task, reduction="sum")
        (g,) = ad.grad(total, [xb])
        sq += (g.value**2).sum(axis=0)
    return np.sqrt(sq) / n


def deep_lasso_fit(
    spec: MlpSpec, X_train, y_train, X_val, y_val, task: str, cfg: TrainConfig, pcfg: PenaltyConfig
) -> NetworkSelection:
    """Train with the input-gradient group penalty; score by input-gradient norms on train."""
    _check_network(spec, X_train)
    init = build_mlp(spec, cfg.seed)
    model = fit(init, X_train, y_train, X_val, y_val, task, cfg, penalty=deep_lasso_hook(pcfg.alpha, pcfg.eps_norm))
    imp = input_gradient_importance(model.mlp, X_train, y_train, task, cfg.batch_size)
    return NetworkSelection(FeatureScores(imp, "deep_lasso"), model)


# -- serialization -----------------------------------------------------------------

CSV_COLUMNS = ("feature_index", "feature_name", "origin_tag", "score", "method", "split", "seed")


def write_scores_csv(
    scores: FeatureScores,
    path: str | Path,
    names: Optional[Sequence[str]] = None,
    origins: Optional[Sequence[str]] = None,
    seed: int = 0,
) -> None:
    m = len(scores)
    names = names or [f"f{j}" for j in range(m)]
    origins = origins or ["original"] * m
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for j in range(m):
            w.writerow([j, names[j], origins[j], repr(float(scores.scores[j])), scores.method, scores.computed_on, seed])


def read_scores_csv(path: str | Path) -> tuple[FeatureScores, list[dict]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty score file")
    missing = set(CSV_COLUMNS) - set(rows[0])
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    rows.sort(key=lambda r: int(r["feature_index"]))
    scores = FeatureScores([float(r["score"]) for r in rows], rows[0]["method"], rows[0]["split"])
    return scores, rows
