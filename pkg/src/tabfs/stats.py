"""Benchmark statistics: metrics, rank tests, rank assignment and selector agreement."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy.special import comb, ndtr
from scipy.stats import rankdata

from .fs import FeatureScores, select_top_k
from .nn import CLASSIFICATION, REGRESSION

MAXIMIZE = "maximize"
MINIMIZE = "minimize"
EXACT_LIMIT = 20


def _vector(x) -> np.ndarray:
    return x.scores if isinstance(x, FeatureScores) else np.asarray(x, dtype=np.float64)


def metrics(predictions, targets, task: str) -> float:
    """Accuracy (classification) or negative RMSE (regression); higher is better.

    Classification predictions may be labels or a score/logit matrix.
    """
    p = np.asarray(predictions)
    t = np.asarray(targets)
    if p.shape[0] != t.shape[0]:
        raise ValueError(f"{p.shape[0]} predictions for {t.shape[0]} targets")
    if task == CLASSIFICATION:
        labels = np.argmax(p, axis=1) if p.ndim == 2 else p
        return float(np.mean(labels == t))
    if task == REGRESSION:
        p = p.reshape(p.shape[0], -1)
        if p.shape[1] != 1:
            raise ValueError("regression predictions must have a single column")
        return -float(np.sqrt(np.mean((p[:, 0] - t) ** 2)))
    raise ValueError(f"unknown task {task!r}")


def spearman(a, b) -> float:
    """Pearson correlation of average ranks."""
    a, b = _vector(a), _vector(b)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("spearman needs two equal-length vectors of length >= 2")
    ra, rb = rankdata(a), rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if denom == 0:
        raise ValueError("spearman correlation is undefined for a constant vector")
    return float(np.clip(ra @ rb / denom, -1.0, 1.0))


def similarity_matrix(score_vectors: Sequence) -> np.ndarray:
    """Pairwise Spearman correlations between importance vectors."""
    k = len(score_vectors)
    out = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            out[i, j] = out[j, i] = spearman(score_vectors[i], score_vectors[j])
    return out


def average_similarity(matrices: Sequence[np.ndarray]) -> np.ndarray:
    """Element-wise mean of per-dataset similarity matrices."""
    return np.mean(np.stack(matrices), axis=0)


def mean_pairwise(matrix: np.ndarray) -> float:
    k = matrix.shape[0]
    if k < 2:
        return float("nan")
    return float(matrix[~np.eye(k, dtype=bool)].mean())


# -- rank-sum test -------------------------------------------------------------


def _rank_sum_counts(doubled_ranks: np.ndarray, n_a: int) -> np.ndarray:
    """Number of size-``n_a`` subsets achieving each doubled rank sum."""
    total = int(doubled_ranks.sum())
    counts = np.zeros((n_a + 1, total + 1))
    counts[0, 0] = 1.0
    for r in doubled_ranks.astype(int):
        counts[1:, r:] += counts[:-1, : total + 1 - r].copy()
    return counts[n_a]


def wilcoxon_rank_sum_one_sided(a, b, method: str = "auto") -> float:
    """p-value of the rank-sum test against H1: ``a`` tends to exceed ``b``.

    ``method='exact'`` counts every assignment of the pooled midranks;
    ``'approx'`` uses the normal approximation with tie and continuity
    corrections; ``'auto'`` is exact up to 20 pooled observations.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("rank-sum test needs non-empty samples")
    n_a, n_b = a.size, b.size
    N = n_a + n_b
    ranks = rankdata(np.concatenate([a, b]))
    w = float(ranks[:n_a].sum())
    if method == "auto":
        method = "exact" if N <= EXACT_LIMIT else "approx"
    if method == "exact":
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = _rank_sum_counts(doubled, n_a)
        w2 = int(round(2 * w))
        return float(min(1.0, counts[w2:].sum() / comb(N, n_a, exact=True)))
    if method == "approx":
        _, ties = np.unique(ranks, return_counts=True)
        tie_term = float(np.sum(ties**3 - ties)) / (N * (N - 1))
        var = n_a * n_b / 12.0 * ((N + 1) - tie_term)
        if var <= 0:
            return 1.0
        z = (w - n_a * (N + 1) / 2.0 - 0.5) / math.sqrt(var)
        return float(ndtr(-z))
    raise ValueError(f"unknown method {method!r}")


def assign_ranks(
    results: Mapping[str, Sequence[float]],
    direction: str = MAXIMIZE,
    p_threshold: float = 0.05,
    test: Optional[Callable[[str, str], float]] = None,
) -> dict[str, int]:
    """Group methods into significance tiers, best tier = rank 1.

    Repeatedly take the best remaining method by mean; every remaining method
    it does not beat at level ``p_threshold`` (one-sided rank-sum test) joins
    its tier.  ``test(best, other)`` may override the p-value computation.
    """
    if direction not in (MAXIMIZE, MINIMIZE):
        raise ValueError(f"unknown direction {direction!r}")
    sign = 1.0 if direction == MAXIMIZE else -1.0
    vals = {k: sign * np.asarray(v, dtype=np.float64) for k, v in results.items()}

    def p_value(best, other):
        if test is not None:
            return test(best, other)
        return wilcoxon_rank_sum_one_sided(vals[best], vals[other])

    names = list(vals)
    remaining = sorted(names, key=lambda k: (-float(np.mean(vals[k])), names.index(k)))
    ranks: dict[str, int] = {}
    rank = 0
    while remaining:
        rank += 1
        best = remaining[0]
        tier = [best] + [o for o in remaining[1:] if p_value(best, o) >= p_threshold]
        for name in tier:
            ranks[name] = rank
        remaining = [o for o in remaining if o not in ranks]
    return {k: ranks[k] for k in names}


@dataclass
class RankTable:
    """Per-seed metrics for methods x datasets, ranked dataset-wise."""

    cells: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)
    direction: str = MAXIMIZE
    p_threshold: float = 0.05

    def add(self, method: str, dataset: str, values: Sequence[float]) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.size < 2:
            raise ValueError("a rank table cell needs at least two seed values")
        self.cells[(method, dataset)] = values

    @property
    def methods(self) -> list[str]:
        return list(dict.fromkeys(m for m, _ in self.cells))

    @property
    def datasets(self) -> list[str]:
        return list(dict.fromkeys(d for _, d in self.cells))

    def mean(self, method: str, dataset: str) -> float:
        return float(np.mean(self.cells[(method, dataset)]))

    def std(self, method: str, dataset: str) -> float:
        return float(np.std(self.cells[(method, dataset)]))

    def ranks(self) -> dict[tuple[str, str], int]:
        out = {}
        for d in self.datasets:
            group = {m: self.cells[(m, d)] for m in self.methods if (m, d) in self.cells}
            for m, r in assign_ranks(group, self.direction, self.p_threshold).items():
                out[(m, d)] = r
        return out

    def average_rank(self) -> dict[str, float]:
        ranks = self.ranks()
        out = {}
        for m in self.methods:
            rs = [r for (mm, _), r in ranks.items() if mm == m]
            out[m] = float(np.mean(rs)) if rs else float("nan")
        return out


# -- selection-as-classification scores ---------------------------------------------


def _mask(is_original, n) -> np.ndarray:
    mask = np.asarray(is_original).astype(bool)
    if mask.shape != (n,):
        raise ValueError("mask length must equal the number of scores")
    if mask.all() or not mask.any():
        raise ValueError("mask must contain both original and extraneous features")
    return mask


def roc_auc(importances, is_original) -> float:
    """Probability that a random original feature outscores a random extraneous one (ties 1/2)."""
    s = _vector(importances)
    mask = _mask(is_original, s.size)
    ranks = rankdata(s)
    n_pos, n_neg = int(mask.sum()), int((~mask).sum())
    u = ranks[mask].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def precision_recall_at_k(importances, is_original, k: Optional[int] = None) -> tuple[float, float]:
    s = _vector(importances)
    mask = _mask(is_original, s.size)
    n_pos = int(mask.sum())
    k = n_pos if k is None else k
    hits = int(mask[select_top_k(s, k)].sum())
    return hits / k, hits / n_pos


def precision_at_k(importances, is_original) -> float:
    """Share of originals among the top-k, k = number of originals; equals recall."""
    precision, recall = precision_recall_at_k(importances, is_original)
    assert precision == recall, "precision and recall must coincide when k equals the positive count"
    return precision
