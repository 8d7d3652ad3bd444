"""Tabular datasets: CSV ingestion, splits, preprocessing and extraneous features."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtri

from .nn import CLASSIFICATION, REGRESSION

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = {TRAIN: "train", VAL: "val", TEST: "test"}
TEST_FRACTION = 0.20
VAL_FRACTION = 0.15
MAX_FEATURES = 5000

ORIGINS = ("original", "random", "corrupted", "second_order")


@dataclass(frozen=True)
class FeatureInfo:
    name: str
    origin: str = "original"
    sources: tuple[int, ...] = ()

    def __post_init__(self):
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown feature origin {self.origin!r}")

    @property
    def tag(self) -> str:
        if self.sources:
            return f"{self.origin}({','.join(map(str, self.sources))})"
        return self.origin

    @classmethod
    def from_tag(cls, name: str, tag: str) -> "FeatureInfo":
        if "(" in tag:
            origin, rest = tag.split("(", 1)
            sources = tuple(int(s) for s in rest.rstrip(")").split(",") if s)
            return cls(name, origin, sources)
        return cls(name, tag)


@dataclass
class Dataset:
    """Feature matrix, target and per-feature provenance.

    ``split`` holds one code per row (0 train, 1 val, 2 test) once assigned.
    Classification targets are class indices ``0..n_classes-1``.
    """

    X: np.ndarray
    y: np.ndarray
    task: str
    features: list[FeatureInfo]
    n_classes: Optional[int] = None
    split: Optional[np.ndarray] = None
    name: str = "dataset"
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y)
        if self.X.ndim != 2 or self.X.shape[1] != len(self.features):
            raise ValueError(f"X has shape {self.X.shape} but {len(self.features)} features are described")
        if self.y.shape[0] != self.X.shape[0]:
            raise ValueError("X and y row counts differ")
        if self.task not in (REGRESSION, CLASSIFICATION):
            raise ValueError(f"unknown task {self.task!r}")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def m(self) -> int:
        return self.X.shape[1]

    @property
    def original_mask(self) -> np.ndarray:
        return np.array([f.origin == "original" for f in self.features])

    @property
    def original_indices(self) -> np.ndarray:
        return np.flatnonzero(self.original_mask)

    @property
    def n_original(self) -> int:
        return int(self.original_mask.sum())

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def out_dim(self) -> int:
        return 1 if self.task == REGRESSION else int(self.n_classes)

    def rows(self, part: int) -> np.ndarray:
        if self.split is None:
            raise ValueError("dataset has no split assignment")
        return np.flatnonzero(self.split == part)

    def part(self, part: int) -> tuple[np.ndarray, np.ndarray]:
        r = self.rows(part)
        return self.X[r], self.y[r]

    @property
    def train(self):
        return self.part(TRAIN)

    @property
    def val(self):
        return self.part(VAL)

    @property
    def test(self):
        return self.part(TEST)

    def select_columns(self, cols: Sequence[int]) -> "Dataset":
        cols = list(cols)
        return replace(self, X=self.X[:, cols], features=[self.features[c] for c in cols])


# -- csv --------------------------------------------------------------------------


class DataError(ValueError):
    pass


def _parse_float(cell: str, row: int, col: str) -> float:
    if cell.strip() == "":
        raise DataError(f"missing value in row {row}, column {col!r}")
    try:
        v = float(cell)
    except ValueError:
        raise DataError(f"non-numeric cell {cell!r} in row {row}, column {col!r}") from None
    if not np.isfinite(v):
        raise DataError(f"missing or non-finite value in row {row}, column {col!r}")
    return v


def load_meta(meta_path: str | Path) -> dict:
    try:
        meta = json.loads(Path(meta_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read metadata {meta_path}: {exc}") from None
    if not isinstance(meta, dict) or "target" not in meta or meta.get("task") not in (REGRESSION, CLASSIFICATION):
        raise DataError(f"metadata {meta_path} must declare 'target' and 'task' (regression|classification)")
    return meta


def load_csv(path: str | Path, meta_path: str | Path | dict) -> Dataset:
    """Read a header-row CSV plus a JSON metadata file.

    Metadata keys: ``target`` (column name), ``task``, and optionally
    ``features`` (name -> origin tag), ``preprocessing``, ``split_seed`` and
    ``preprocessed``.  Extra keys are kept in :attr:`Dataset.info`.  The
    metadata may also be passed directly as a dict.
    """
    meta = meta_path if isinstance(meta_path, dict) else load_meta(meta_path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    if len(set(header)) != len(header):
        dupes = sorted({h for h in header if header.count(h) > 1})
        raise DataError(f"{path}: duplicate column names {dupes}")
    target = meta["target"]
    if target not in header:
        raise DataError(f"{path}: target column {target!r} not found")
    t_idx = header.index(target)
    feat_cols = [i for i in range(len(header)) if i != t_idx]
    values = np.empty((len(rows), len(header)))
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r + 1} has {len(row)} cells, expected {len(header)}")
        for c, cell in enumerate(row):
            values[r, c] = _parse_float(cell, r + 1, header[c])

    tags = meta.get("features", {})
    features = [FeatureInfo.from_tag(header[c], tags.get(header[c], "original")) for c in feat_cols]
    raw_y = values[:, t_idx]
    n_classes = None
    if meta["task"] == CLASSIFICATION:
        classes, y = np.unique(raw_y, return_inverse=True)
        n_classes = int(meta.get("n_classes", classes.size))
        y = y.astype(np.intp)
    else:
        y = raw_y
    info = {k: v for k, v in meta.items() if k not in ("target", "task", "features")}
    ds = Dataset(values[:, feat_cols], y, meta["task"], features, n_classes, name=Path(path).stem, info=info)
    if "split_seed" in meta:
        ds.split = split(ds, int(meta["split_seed"]))
    return ds


def save_csv(ds: Dataset, path: str | Path, meta_path: str | Path, target: str = "target", **extra_meta) -> None:
    if target in ds.names:
        raise DataError(f"target name {target!r} clashes with a feature name")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(ds.names + [target])
        yv = ds.y.astype(np.int64) if ds.task == CLASSIFICATION else ds.y
        for row, t in zip(ds.X, yv):
            w.writerow([repr(float(v)) for v in row] + [repr(t.item())])
    meta = {"target": target, "task": ds.task, "features": {f.name: f.tag for f in ds.features}}
    if ds.n_classes is not None:
        meta["n_classes"] = ds.n_classes
    meta.update(ds.info)
    meta.update(extra_meta)
    Path(meta_path).write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")


# -- splits -------------------------------------------------------------------------


def _apportion(total: int, weights: np.ndarray) -> np.ndarray:
    """Largest-remainder rounding of ``total * weights`` to integers summing to ``total``."""
    exact = total * weights
    base = np.floor(exact).astype(int)
    short = total - base.sum()
    order = np.lexsort((np.arange(weights.size), -(exact - base)))
    base[order[:short]] += 1
    return base


def split_sizes(n: int) -> tuple[int, int, int]:
    n_test = int(round(TEST_FRACTION * n))
    n_val = int(round(VAL_FRACTION * n))
    return n - n_test - n_val, n_val, n_test


def split(ds: Dataset, seed: int) -> np.ndarray:
    """Shuffled train/val/test assignment (20% test, 15% val), stratified for classification."""
    n = ds.n
    if n < 10:
        raise DataError(f"need at least 10 rows to split, got {n}")
    rng = np.random.default_rng(seed)
    n_train, n_val, n_test = split_sizes(n)
    codes = np.empty(n, dtype=np.int8)
    if ds.task != CLASSIFICATION:
        perm = rng.permutation(n)
        codes[perm[:n_test]] = TEST
        codes[perm[n_test : n_test + n_val]] = VAL
        codes[perm[n_test + n_val :]] = TRAIN
        return codes
    classes, counts = np.unique(ds.y, return_counts=True)
    if counts.min() < 3:
        raise DataError(f"class {classes[np.argmin(counts)]} has fewer than 3 samples; cannot stratify")
    test_q = _apportion(n_test, counts / n)
    val_q = _apportion(n_val, counts / n)
    for c, q_test, q_val in zip(classes, test_q, val_q):
        rows = rng.permutation(np.flatnonzero(ds.y == c))
        codes[rows[:q_test]] = TEST
        codes[rows[q_test : q_test + q_val]] = VAL
        codes[rows[q_test + q_val :]] = TRAIN
    return codes


# -- preprocessing ---------------------------------------------------------------


class QuantileTransformer:
    """Map each feature through its empirical CDF and the inverse normal CDF."""

    clip = 1e-7

    def __init__(self, n_quantiles: int = 1000):
        self.n_quantiles = n_quantiles
        self.references_: Optional[np.ndarray] = None
        self.levels_: Optional[np.ndarray] = None

    def fit(self, X) -> "QuantileTransformer":
        X = np.asarray(X, dtype=np.float64)
        n_q = max(2, min(self.n_quantiles, X.shape[0]))
        self.levels_ = np.linspace(0.0, 1.0, n_q)
        self.references_ = np.quantile(X, self.levels_, axis=0)
        return self

    def transform(self, X) -> np.ndarray:
        if self.references_ is None:
            raise RuntimeError("QuantileTransformer must be fitted before transform")
        X = np.asarray(X, dtype=np.float64)
        out = np.empty_like(X)
        lv = self.levels_
        for j in range(X.shape[1]):
            ref = self.references_[:, j]
            # averaging both interpolation directions keeps repeated reference values centred
            up = np.interp(X[:, j], ref, lv)
            down = -np.interp(-X[:, j], -ref[::-1], -lv[::-1])
            out[:, j] = 0.5 * (up + down)
        return ndtri(np.clip(out, self.clip, 1.0 - self.clip))

    def fit_transform(self, X) -> np.ndarray:
        return self.fit(X).transform(X)


class Standardizer:
    def __init__(self):
        self.mean_ = None
        self.std_ = None

    def fit(self, v, names: Optional[Sequence[str]] = None) -> "Standardizer":
        v = np.asarray(v, dtype=np.float64)
        self.mean_ = v.mean(axis=0)
        self.std_ = v.std(axis=0)
        bad = np.flatnonzero(np.atleast_1d(self.std_) <= 0)
        if bad.size:
            which = names[bad[0]] if names is not None else f"column {bad[0]}"
            raise DataError(f"zero variance in {which}; cannot standardize")
        return self

    def transform(self, v) -> np.ndarray:
        if self.mean_ is None:
            raise RuntimeError("Standardizer must be fitted before transform")
        return (np.asarray(v, dtype=np.float64) - self.mean_) / self.std_

    def inverse_transform(self, v) -> np.ndarray:
        return np.asarray(v) * self.std_ + self.mean_


def preprocess(ds: Dataset, method: Optional[str] = None) -> Dataset:
    """Normalize features (quantile or standardize) and standardize regression targets.

    All statistics come from the train rows.
    """
    if ds.split is None:
        raise DataError("assign a split before preprocessing")
    method = method or ds.info.get("preprocessing", "quantile")
    train = ds.rows(TRAIN)
    if method == "quantile":
        X = QuantileTransformer().fit(ds.X[train]).transform(ds.X)
    elif method == "standardize":
        X = Standardizer().fit(ds.X[train], ds.names).transform(ds.X)
    elif method == "none":
        X = ds.X.copy()
    else:
        raise DataError(f"unknown preprocessing {method!r}")
    y = ds.y
    info = dict(ds.info, preprocessed=True, preprocessing=method)
    if ds.task == REGRESSION:
        st = Standardizer().fit(ds.y[train], ["target"])
        y = st.transform(ds.y)
        info["target_mean"], info["target_std"] = float(st.mean_), float(st.std_)
    return replace(ds, X=X, y=y, info=info)


# -- extraneous features ------------------------------------------------------------


def n_extra_features(m: int, fraction: float) -> int:
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"extraneous fraction must lie in (0, 1), got {fraction}")
    return int(round(m * fraction / (1.0 - fraction)))


def _draw_order(ds: Dataset) -> np.ndarray:
    """Row order for noise draws: train rows first, then val, then test."""
    if ds.split is None:
        return np.arange(ds.n)
    return np.argsort(ds.split, kind="stable")


def _draw_rows(ds: Dataset, sampler, n_cols: int) -> np.ndarray:
    order = _draw_order(ds)
    draws = sampler((ds.n, n_cols))
    out = np.empty_like(draws)
    out[order] = draws
    return out


def _append(ds: Dataset, cols: np.ndarray, infos: list[FeatureInfo], cap: int) -> Dataset:
    if ds.m + len(infos) > cap:
        raise DataError(f"augmented dataset would have {ds.m + len(infos)} features (cap {cap})")
    return replace(ds, X=np.hstack([ds.X, cols]), features=list(ds.features) + infos)


def _train_rows(ds: Dataset) -> np.ndarray:
    return ds.rows(TRAIN) if ds.split is not None else np.arange(ds.n)


def add_random_features(ds: Dataset, fraction: float, seed: int, cap: int = MAX_FEATURES) -> Dataset:
    """Append i.i.d. standard normal columns making up ``fraction`` of all features."""
    k = n_extra_features(ds.n_original, fraction)
    rng = np.random.default_rng(seed)
    cols = _draw_rows(ds, rng.standard_normal, k)
    infos = [FeatureInfo(f"random_{i}", "random") for i in range(k)]
    return _append(ds, cols, infos, cap)


def add_corrupted_features(
    ds: Dataset, fraction: float, seed: int, noise: str = "gaussian", cap: int = MAX_FEATURES
) -> Dataset:
    """Append noisy copies of randomly chosen original features.

    gaussian: ``0.5 x + 0.5 e`` with ``e ~ N(0, sd(x))``;
    laplace: ``0.5 x + 0.5 sd(x) e`` with ``e ~ Laplace(0, 1/sqrt(2))``.
    ``sd(x)`` is the train-split standard deviation of the source.
    """
    if noise not in ("gaussian", "laplace"):
        raise ValueError(f"unknown noise kind {noise!r}")
    originals = ds.original_indices
    k = n_extra_features(originals.size, fraction)
    rng = np.random.default_rng(seed)
    sources = originals[rng.integers(0, originals.size, size=k)]
    sigma = ds.X[_train_rows(ds)][:, sources].std(axis=0)
    if noise == "gaussian":
        eps = _draw_rows(ds, rng.standard_normal, k) * sigma
    else:
        eps = _draw_rows(ds, lambda size: rng.laplace(0.0, 1.0 / np.sqrt(2.0), size), k) * sigma
    cols = 0.5 * ds.X[:, sources] + 0.5 * eps
    infos = [FeatureInfo(f"corrupted_{i}", "corrupted", (int(s),)) for i, s in enumerate(sources)]
    return _append(ds, cols, infos, cap)


def add_second_order_features(ds: Dataset, fraction: float, seed: int, cap: int = MAX_FEATURES) -> Dataset:
    """Append products of pairs of distinct, uniformly sampled original features."""
    originals = ds.original_indices
    if originals.size < 2:
        raise DataError("second-order features need at least two original features")
    k = n_extra_features(originals.size, fraction)
    rng = np.random.default_rng(seed)
    pairs = [tuple(sorted(int(v) for v in originals[rng.choice(originals.size, 2, replace=False)])) for _ in range(k)]
    cols = np.column_stack([ds.X[:, i] * ds.X[:, j] for i, j in pairs]) if k else np.empty((ds.n, 0))
    infos = [FeatureInfo(f"second_order_{t}", "second_order", p) for t, p in enumerate(pairs)]
    return _append(ds, cols, infos, cap)


SETUPS = ("none", "random", "corrupted", "corrupted-laplace", "second-order")


def augment(ds: Dataset, setup: str, fraction: float, seed: int) -> Dataset:
    if setup == "none":
        return ds
    if setup == "random":
        return add_random_features(ds, fraction, seed)
    if setup in ("corrupted", "corrupted-gauss"):
        return add_corrupted_features(ds, fraction, seed, "gaussian")
    if setup in ("corrupted-laplace",):
        return add_corrupted_features(ds, fraction, seed, "laplace")
    if setup == "second-order":
        return add_second_order_features(ds, fraction, seed)
    raise ValueError(f"unknown setup {setup!r}; expected one of {SETUPS}")


def prepare(ds: Dataset, seed: int, setup: str = "none", fraction: float = 0.5, method: Optional[str] = None) -> Dataset:
    """Split, preprocess, then add extraneous features."""
    if ds.split is None:
        ds = replace(ds, split=split(ds, seed))
    if not ds.info.get("preprocessed"):
        ds = preprocess(ds, method)
    return augment(ds, setup, fraction, seed + 1)


# -- synthetic ground truth ------------------------------------------------------


def make_synthetic_oracle(
    n: int,
    m_informative: int,
    task: str = REGRESSION,
    seed: int = 0,
    coef: Optional[Sequence[float]] = None,
    noise: float = 0.1,
) -> Dataset:
    """Standard normal features with a linear (or thresholded linear) target.

    Coefficient magnitudes are drawn from U[0.5, 1.5] with random signs unless
    ``coef`` is given.  Classification labels are ``1[Xc + noise * e > 0]``.
    Every feature is informative; add extraneous columns with the generators.
    """
    if m_informative < 1:
        raise ValueError("need at least one informative feature")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, m_informative))
    if coef is None:
        c = rng.uniform(0.5, 1.5, m_informative) * rng.choice([-1.0, 1.0], m_informative)
    else:
        c = np.asarray(coef, dtype=np.float64)
    signal = X @ c + noise * rng.standard_normal(n)
    features = [FeatureInfo(f"x{j}") for j in range(m_informative)]
    info = {"informative": list(range(m_informative)), "coef": c.tolist(), "generator_seed": seed}
    if task == CLASSIFICATION:
        return Dataset(X, (signal > 0).astype(np.intp), task, features, 2, name="synthetic", info=info)
    return Dataset(X, signal, task, features, name="synthetic", info=info)


# -- California Housing ----------------------------------------------------------

CALIFORNIA_ENV = "TABFS_CALIFORNIA_CSV"
CALIFORNIA_FEATURES = (
    "MedInc", "HouseAge", "AveRooms", "AveBedrms", "Population", "AveOccup", "Latitude", "Longitude",
)


def load_california_housing(path: Optional[str | Path] = None) -> Dataset:
    """California Housing (20640 x 8, regression).

    Looked up in order: ``path``; the ``TABFS_CALIFORNIA_CSV`` environment
    variable; the scikit-learn download cache.  A CSV must hold the eight
    standard feature columns and a ``MedHouseVal`` target (a JSON sidecar is
    not needed).  Raises :class:`DataError` when none is available.
    """
    path = path or os.environ.get(CALIFORNIA_ENV)
    if path:
        meta = Path(str(path) + ".meta.json")
        if meta.exists():
            ds = load_csv(path, meta)
        else:
            ds = load_csv(path, {"target": "MedHouseVal", "task": REGRESSION})
        return replace(ds, name="california_housing")
    try:
        from sklearn.datasets import fetch_california_housing
    except ImportError:
        fetch_california_housing = None
    if fetch_california_housing is not None:
        try:
            bunch = fetch_california_housing(download_if_missing=False)
        except OSError:
            bunch = None
        if bunch is not None:
            features = [FeatureInfo(n) for n in bunch.feature_names]
            return Dataset(np.asarray(bunch.data, np.float64), np.asarray(bunch.target, np.float64),
                           REGRESSION, features, name="california_housing")
    raise DataError(
        f"California Housing not available: set {CALIFORNIA_ENV} to a CSV with columns "
        f"{', '.join(CALIFORNIA_FEATURES)}, MedHouseVal"
    )

