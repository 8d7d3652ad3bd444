"""Benchmark harness: random search, seeded final runs, result log and reports.

A benchmark cell is one (dataset, extraneous setup, selector, downstream
model).  Each cell runs ``n_trials`` random-search trials scored on the
validation split; the best hyperparameters are then re-run over ``n_seeds``
seeds and only those runs are evaluated on the test split.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from . import data as D
from . import fs, stats, trees
from .nn import MlpSpec, TrainConfig, build_mlp, fit

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

FS_METHODS = (
    "none",
    "univariate",
    "lasso",
    "first_layer_lasso",
    "adaptive_group_lasso",
    "random_forest",
    "xgboost",
    "deep_lasso",
)
MODELS = ("mlp", "gbdt")


# -- search spaces -----------------------------------------------------------------


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"empty range [{self.lo}, {self.hi}]")

    def sample(self, rng):
        return float(rng.uniform(self.lo, self.hi))


@dataclass(frozen=True)
class LogUniform(Uniform):
    def __post_init__(self):
        super().__post_init__()
        if self.lo <= 0:
            raise ValueError("log-uniform bounds must be positive")

    def sample(self, rng):
        return float(math.exp(rng.uniform(math.log(self.lo), math.log(self.hi))))


@dataclass(frozen=True)
class UniformInt(Uniform):
    def sample(self, rng):
        return int(rng.integers(int(self.lo), int(self.hi) + 1))


@dataclass(frozen=True)
class ZeroOr:
    """Zero with probability 1/2, otherwise a draw from ``dist``."""

    dist: Uniform

    def sample(self, rng):
        flip = rng.random()
        value = self.dist.sample(rng)
        return type(value)(0) if flip < 0.5 else value


@dataclass(frozen=True)
class Fixed:
    value: Any

    def sample(self, rng):
        return self.value


MLP_SPACE = {
    "n_layers": UniformInt(1, 8),
    "layer_size": UniformInt(1, 512),
    "dropout": ZeroOr(Uniform(0.0, 0.5)),
    "lr": LogUniform(1e-5, 1e-2),
    "weight_decay": ZeroOr(LogUniform(1e-6, 1e-3)),
}
XGB_SPACE = {
    "max_depth": UniformInt(3, 10),
    "min_child_weight": LogUniform(1e-8, 1e5),
    "subsample": Uniform(0.5, 1.0),
    "learning_rate": LogUniform(1e-5, 1.0),
    "colsample_bytree": Uniform(0.5, 1.0),
    "gamma": ZeroOr(LogUniform(1e-8, 1e2)),
    "reg_lambda": ZeroOr(LogUniform(1e-8, 1e2)),
}
RF_SPACE = {
    "n_estimators": UniformInt(10, 2000),
    "max_depth": UniformInt(3, 10),
}
PENALTY_SPACE = {
    "lasso": Uniform(1e-3, 5e-1),
    "deep_lasso": LogUniform(1e-2, 5e-1),
    "first_layer_lasso": LogUniform(1e-2, 5e-1),
    "adaptive_group_lasso": LogUniform(1e-3, 5e-1),
}


def parse_dist(spec) -> Any:
    """Distribution from its JSON form.

    ``{"uniform": [lo, hi]}``, ``{"loguniform": [lo, hi]}``, ``{"int": [lo, hi]}``,
    ``{"zero_or": <dist>}`` or a bare value (held fixed).
    """
    if not isinstance(spec, dict):
        return Fixed(spec)
    ((kind, arg),) = spec.items()
    if kind == "uniform":
        return Uniform(*arg)
    if kind == "loguniform":
        return LogUniform(*arg)
    if kind == "int":
        return UniformInt(*arg)
    if kind == "zero_or":
        return ZeroOr(parse_dist(arg))
    if kind == "fixed":
        return Fixed(arg)
    raise ValueError(f"unknown distribution {kind!r}")


def sample_hyperparams(space: dict, rng) -> dict:
    """One draw from every distribution in ``space`` (nested dicts allowed)."""
    out = {}
    for name, dist in space.items():
        if isinstance(dist, dict):
            out[name] = sample_hyperparams(dist, rng)
        else:
            if isinstance(dist, Uniform) and not dist.lo < dist.hi:
                raise ValueError(f"{name}: empty range")
            out[name] = dist.sample(rng)
    return out


def search_space(fs_method: str, model: str, overrides: Optional[dict] = None) -> dict:
    """Joint space for the selector and the downstream model of one cell."""
    space: dict = {}
    uses_mlp = model == "mlp" or fs_method in ("first_layer_lasso", "adaptive_group_lasso", "deep_lasso")
    if uses_mlp:
        space["mlp"] = dict(MLP_SPACE)
    if model == "gbdt" or fs_method == "xgboost":
        space["gbdt"] = dict(XGB_SPACE)
    if fs_method == "random_forest":
        space["forest"] = dict(RF_SPACE)
    if fs_method in PENALTY_SPACE:
        space["penalty"] = {"weight": PENALTY_SPACE[fs_method]}
    for group, params in (overrides or {}).items():
        if group not in space:
            continue
        for name, dist in params.items():
            space[group][name] = parse_dist(dist)
    return space


# -- configs and records ------------------------------------------------------------


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: dict
    fs_method: str = "none"
    model: str = "mlp"
    setup: str = "random"
    fraction: float = 0.5
    n_trials: int = 20
    n_seeds: int = 10
    master_seed: int = 0
    train: dict = field(default_factory=dict)
    space: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.fs_method not in FS_METHODS:
            raise ValueError(f"unknown feature selection method {self.fs_method!r}")
        if self.model not in MODELS:
            raise ValueError(f"unknown downstream model {self.model!r}")
        if self.setup != "none" and not 0.0 < self.fraction < 1.0:
            raise ValueError("fraction must lie in (0, 1)")
        if self.n_seeds < 2:
            raise ValueError("n_seeds must be >= 2 for the rank-sum test")
        if self.n_trials < 1:
            raise ValueError("n_trials must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def hash(self) -> str:
        return hashlib.sha256(_canonical(self.to_dict()).encode()).hexdigest()[:16]

    @property
    def dataset_name(self) -> str:
        return dataset_name(self.dataset)

    @property
    def label(self) -> str:
        fs_label = "No FS" if self.fs_method == "none" else self.fs_method
        return f"{fs_label} + {self.model}"


@dataclass
class ResultRecord:
    config_hash: str
    kind: str  # "trial" or "final"
    index: int
    seed: int
    cell: dict
    hyperparams: dict
    status: str = "ok"
    error: str = ""
    selected: list = field(default_factory=list)
    scores: Optional[list] = None
    n_original: int = 0
    n_features: int = 0
    val_metric: Optional[float] = None
    test_metric: Optional[float] = None
    fs_seconds: float = 0.0
    train_seconds: float = 0.0

    @property
    def key(self) -> tuple:
        return (self.config_hash, self.kind, self.index)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self, timings: bool = False) -> dict:
        d = asdict(self)
        if not timings:
            d.pop("fs_seconds")
            d.pop("train_seconds")
        return d


def derive_seed(master_seed: int, *key: int) -> int:
    """Counter-based seed for one (config, stage, index) stream."""
    ss = np.random.SeedSequence(master_seed, spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _config_key(config: ExperimentConfig) -> int:
    return int(config.hash[:8], 16)


# -- datasets ------------------------------------------------------------------------


def dataset_name(ref: dict) -> str:
    if "name" in ref:
        return ref["name"]
    if ref.get("kind") == "synthetic":
        return f"synthetic-{ref.get('task', 'regression')}-{ref.get('m_informative', 8)}"
    if ref.get("kind") == "csv":
        return Path(ref["path"]).stem
    return ref.get("kind", "dataset")


def load_dataset(ref: dict) -> D.Dataset:
    kind = ref.get("kind")
    if kind == "synthetic":
        return D.make_synthetic_oracle(
            int(ref.get("n", 2000)),
            int(ref.get("m_informative", 8)),
            ref.get("task", "regression"),
            int(ref.get("seed", 0)),
            noise=float(ref.get("noise", 0.1)),
        )
    if kind == "csv":
        return D.load_csv(ref["path"], ref["meta"])
    if kind == "california_housing":
        return D.load_california_housing(ref.get("path"))
    raise ValueError(f"unknown dataset kind {kind!r}")


@lru_cache(maxsize=16)
def _prepared(ref_json: str, setup: str, fraction: float, master_seed: int) -> D.Dataset:
    ds = load_dataset(json.loads(ref_json))
    return D.prepare(ds, seed=master_seed, setup=setup, fraction=fraction)


def prepared_dataset(config: ExperimentConfig) -> D.Dataset:
    return _prepared(_canonical(config.dataset), config.setup, config.fraction, config.master_seed)


# -- one trial -------------------------------------------------------------------


def _train_config(config: ExperimentConfig, mlp_hp: dict, seed: int) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)} - {"lr", "weight_decay", "seed"}
    extra = {k: (tuple(v) if isinstance(v, list) else v) for k, v in config.train.items() if k in names}
    return TrainConfig(lr=mlp_hp["lr"], weight_decay=mlp_hp["weight_decay"], seed=seed, **extra)


def _mlp_spec(mlp_hp: dict, in_dim: int, out_dim: int) -> MlpSpec:
    return MlpSpec(in_dim, out_dim, mlp_hp["n_layers"], mlp_hp["layer_size"], mlp_hp["dropout"])


def _gbdt_config(hp: dict, config: ExperimentConfig) -> trees.GbdtConfig:
    n_est = int(config.train.get("gbdt_n_estimators", 2000))
    return trees.GbdtConfig(n_estimators=n_est, **hp)


def run_selector(config: ExperimentConfig, hp: dict, ds: D.Dataset, seed: int) -> fs.FeatureScores:
    method = config.fs_method
    Xtr, ytr = ds.train
    Xv, yv = ds.val
    task = ds.task
    if method == "univariate":
        return fs.univariate_scores(Xtr, ytr, task)
    if method == "lasso":
        return fs.lasso_fit(Xtr, ytr, task, 1.0 - hp["penalty"]["weight"], seed)
    if method == "random_forest":
        cfg = trees.ForestConfig(**hp["forest"])
        return trees.fit_forest(Xtr, ytr, task, cfg, seed)[1]
    if method == "xgboost":
        return trees.fit_gbdt(Xtr, ytr, task, _gbdt_config(hp["gbdt"], config), seed, val=(Xv, yv))[1]
    spec = _mlp_spec(hp["mlp"], ds.m, ds.out_dim)
    tcfg = _train_config(config, hp["mlp"], seed)
    pcfg = fs.PenaltyConfig.from_penalty_weight(hp["penalty"]["weight"])
    runner = {
        "first_layer_lasso": fs.first_layer_lasso_fit,
        "adaptive_group_lasso": fs.adaptive_group_lasso_fit,
        "deep_lasso": fs.deep_lasso_fit,
    }[method]
    return runner(spec, Xtr, ytr, Xv, yv, task, tcfg, pcfg).scores


def fit_downstream(config: ExperimentConfig, hp: dict, ds: D.Dataset, seed: int):
    """Train the downstream model; returns a callable mapping X to predictions."""
    Xtr, ytr = ds.train
    Xv, yv = ds.val
    if config.model == "gbdt":
        model, _ = trees.fit_gbdt(Xtr, ytr, ds.task, _gbdt_config(hp["gbdt"], config), seed, val=(Xv, yv))
        return model.predict
    spec = _mlp_spec(hp["mlp"], ds.m, ds.out_dim)
    trained = fit(build_mlp(spec, seed), Xtr, ytr, Xv, yv, ds.task, _train_config(config, hp["mlp"], seed))
    return trained.mlp.predict


def run_trial(
    config: ExperimentConfig,
    hyperparams: dict,
    seed: int,
    final: bool = False,
    index: int = 0,
    ds: Optional[D.Dataset] = None,
) -> ResultRecord:
    """Select features, retrain the downstream model on the top-k and score it.

    k is the number of original features.  The test split is only touched
    when ``final`` is set.  Failures are recorded rather than raised.
    """
    rec = ResultRecord(
        config_hash=config.hash,
        kind="final" if final else "trial",
        index=index,
        seed=int(seed),
        cell=cell_summary(config),
        hyperparams=hyperparams,
    )
    try:
        ds = ds if ds is not None else prepared_dataset(config)
        rec.n_original, rec.n_features = ds.n_original, ds.m
        t0 = time.perf_counter()
        if config.fs_method == "none":
            selected = list(range(ds.m))
        else:
            scores = run_selector(config, hyperparams, ds, seed)
            selected = fs.select_top_k(scores, ds.n_original)
            rec.scores = [float(v) for v in scores.scores]
        t1 = time.perf_counter()
        sub = ds.select_columns(selected)
        predict = fit_downstream(config, hyperparams, sub, seed)
        rec.val_metric = stats.metrics(predict(sub.val[0]), sub.val[1], ds.task)
        if final:
            rec.test_metric = stats.metrics(predict(sub.test[0]), sub.test[1], ds.task)
        rec.selected = [int(i) for i in selected]
        rec.fs_seconds, rec.train_seconds = t1 - t0, time.perf_counter() - t1
        for v in (rec.val_metric, rec.test_metric):
            if v is not None and not math.isfinite(v):
                raise FloatingPointError("non-finite metric")
    except Exception as exc:  # noqa: BLE001 - a failed trial must not stop the grid
        logger.warning("trial failed (%s, %s #%d): %s", config.label, rec.kind, index, exc)
        rec.status, rec.error = "failed", f"{type(exc).__name__}: {exc}"
        rec.val_metric = rec.test_metric = None
    return rec


def cell_summary(config: ExperimentConfig) -> dict:
    return {
        "dataset": config.dataset_name,
        "setup": config.setup,
        "fraction": config.fraction,
        "fs_method": config.fs_method,
        "model": config.model,
        "n_seeds": config.n_seeds,
    }


# -- grid execution ------------------------------------------------------------------

TRIAL_STAGE, FINAL_STAGE, SAMPLE_STAGE = 0, 1, 2


def trial_hyperparams(config: ExperimentConfig, trial: int) -> dict:
    rng = np.random.default_rng(derive_seed(config.master_seed, _config_key(config), SAMPLE_STAGE, trial))
    return sample_hyperparams(search_space(config.fs_method, config.model, config.space), rng)


def _run_cell(args) -> ResultRecord:
    config_dict, hp, seed, final, index = args
    return run_trial(ExperimentConfig(**config_dict), hp, seed, final=final, index=index)


def _map(fn, items: list, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def best_trial(records: Sequence[ResultRecord]) -> Optional[ResultRecord]:
    """Highest validation metric; earliest trial wins ties."""
    ok = [r for r in records if r.ok and r.kind == "trial"]
    if not ok:
        return None
    return max(ok, key=lambda r: (r.val_metric, -r.index))


def run_config(config: ExperimentConfig, jobs: int = 1) -> list[ResultRecord]:
    """Random search on validation, then seeded final runs of the best trial."""
    key = _config_key(config)
    trial_args = [
        (config.to_dict(), trial_hyperparams(config, t), derive_seed(config.master_seed, key, TRIAL_STAGE, t), False, t)
        for t in range(config.n_trials)
    ]
    trials = _map(_run_cell, trial_args, jobs)
    best = best_trial(trials)
    if best is None:
        warnings.warn(f"every trial failed for {config.label} on {config.dataset_name}", RuntimeWarning)
        return trials
    final_args = [
        (config.to_dict(), best.hyperparams, derive_seed(config.master_seed, key, FINAL_STAGE, s), True, s)
        for s in range(config.n_seeds)
    ]
    return trials + _map(_run_cell, final_args, jobs)


@dataclass
class BenchmarkResult:
    records: list[ResultRecord]
    tables: dict = field(default_factory=dict)
    percent_selected: dict = field(default_factory=dict)
    similarity: dict = field(default_factory=dict)
    selection_scores: dict = field(default_factory=dict)


def run_benchmark(
    suite: Iterable[ExperimentConfig], log_path: Optional[str | Path] = None, jobs: int = 1
) -> BenchmarkResult:
    configs = list(suite)
    if not configs:
        raise ValueError("empty benchmark suite")
    records: list[ResultRecord] = []
    for config in configs:
        logger.info("running %s on %s (%s %.2f)", config.label, config.dataset_name, config.setup, config.fraction)
        cell = run_config(config, jobs)
        records.extend(cell)
        if log_path is not None:
            append_records(log_path, cell)
    return aggregate(records)


# -- aggregation ---------------------------------------------------------------------


def _group_key(cell: dict) -> tuple:
    return (cell["setup"], cell["fraction"], cell["model"])


def _method_label(cell: dict) -> str:
    return ("No FS" if cell["fs_method"] == "none" else cell["fs_method"]) + " + " + cell["model"]


def final_metrics(records: Sequence[ResultRecord]) -> dict:
    """(setup, fraction, model) -> {(method label, dataset): test metrics}."""
    cells: dict = {}
    for r in records:
        if r.kind != "final" or not r.ok:
            continue
        group = cells.setdefault(_group_key(r.cell), {})
        group.setdefault((_method_label(r.cell), r.cell["dataset"]), {})[r.index] = r.test_metric
    return cells


def aggregate(records: Sequence[ResultRecord]) -> BenchmarkResult:
    result = BenchmarkResult(list(records))
    n_seeds = {(_method_label(r.cell), r.cell["dataset"], _group_key(r.cell)): r.cell["n_seeds"] for r in records}
    for group, cells in final_metrics(records).items():
        table = stats.RankTable()
        for (method, dataset), by_seed in cells.items():
            need = n_seeds[(method, dataset, group)]
            if len(by_seed) < need:
                warnings.warn(f"{method} on {dataset}: only {len(by_seed)}/{need} final runs succeeded", RuntimeWarning)
                continue
            table.add(method, dataset, [by_seed[i] for i in sorted(by_seed)])
        result.tables[group] = table

    finals = [r for r in records if r.kind == "final" and r.ok and r.cell["fs_method"] != "none"]
    pct: dict = {}
    for r in finals:
        extraneous = sum(1 for i in r.selected if i >= r.n_original)
        pct.setdefault((r.cell["setup"], r.cell["fraction"], r.cell["fs_method"], r.cell["dataset"]), []).append(
            100.0 * extraneous / len(r.selected)
        )
    result.percent_selected = {k: float(np.mean(v)) for k, v in pct.items()}

    by_dataset: dict = {}
    for r in finals:
        if r.index == 0 and r.scores is not None:
            key = (r.cell["setup"], r.cell["fraction"], r.cell["dataset"])
            by_dataset.setdefault(key, {})[r.cell["fs_method"]] = r.scores
    per_setup: dict = {}
    for (setup, fraction, dataset), vecs in by_dataset.items():
        methods = sorted(vecs)
        if len(methods) < 2:
            continue
        try:
            mat = stats.similarity_matrix([vecs[m] for m in methods])
        except ValueError as exc:
            warnings.warn(f"similarity skipped for {dataset}: {exc}", RuntimeWarning)
            continue
        per_setup.setdefault((setup, fraction, tuple(methods)), []).append(mat)
    result.similarity = {k: stats.average_similarity(v) for k, v in per_setup.items()}

    scores: dict = {}
    for r in finals:
        if r.cell["setup"] != "random" or r.scores is None:
            continue
        mask = np.arange(len(r.scores)) < r.n_original
        key = (r.cell["fraction"], r.cell["fs_method"], r.cell["dataset"])
        scores.setdefault(key, []).append((stats.roc_auc(r.scores, mask), stats.precision_at_k(r.scores, mask)))
    result.selection_scores = {k: tuple(np.mean(v, axis=0)) for k, v in scores.items()}
    return result


# -- persistence ---------------------------------------------------------------------


class CorruptLogError(ValueError):
    pass


def record_line(rec: ResultRecord) -> str:
    payload = rec.to_dict()
    checksum = hashlib.sha256(_canonical(payload).encode()).hexdigest()[:16]
    return _canonical({"schema": SCHEMA_VERSION, "checksum": checksum, "record": payload})


def parse_line(line: str, lineno: int = 0) -> ResultRecord:
    try:
        obj = json.loads(line)
        payload = obj["record"]
        checksum = obj["checksum"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptLogError(f"line {lineno}: unreadable record ({exc})") from None
    if obj.get("schema") != SCHEMA_VERSION:
        raise CorruptLogError(f"line {lineno}: unsupported schema {obj.get('schema')!r}")
    if hashlib.sha256(_canonical(payload).encode()).hexdigest()[:16] != checksum:
        raise CorruptLogError(f"line {lineno}: checksum mismatch (partial or edited write)")
    return ResultRecord(**payload)


def load_records(path: str | Path) -> list[ResultRecord]:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                out.append(parse_line(line, lineno))
    return out


def append_records(path: str | Path, records: Iterable[ResultRecord]) -> int:
    """Append records not already present (by config hash, kind and index)."""
    path = Path(path)
    seen = {r.key for r in load_records(path)}
    lines = []
    for r in records:
        if r.key in seen:
            continue
        seen.add(r.key)
        lines.append(record_line(r) + "\n")
    if lines:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a", encoding="utf-8") as fh:
            fh.writelines(lines)
    return len(lines)


def write_timings(path: str | Path, records: Iterable[ResultRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(_canonical({"key": list(r.key), "fs_seconds": r.fs_seconds, "train_seconds": r.train_seconds}) + "\n")


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def tables_csv(result: BenchmarkResult) -> str:
    lines = ["setup,fraction,model,method,dataset,mean,std,rank"]
    for (setup, fraction, model), table in result.tables.items():
        ranks = table.ranks()
        for (method, dataset), _ in table.cells.items():
            lines.append(
                ",".join(
                    [
                        setup,
                        _fmt(fraction),
                        model,
                        method,
                        dataset,
                        _fmt(table.mean(method, dataset)),
                        _fmt(table.std(method, dataset)),
                        str(ranks[(method, dataset)]),
                    ]
                )
            )
    return "\n".join(lines) + "\n"


def _markdown_table(table: stats.RankTable, title: str) -> list[str]:
    datasets = table.datasets
    avg = table.average_rank()
    out = [f"### {title}", "", "| method | " + " | ".join(datasets) + " | rank |"]
    out.append("|---" * (len(datasets) + 2) + "|")
    for m in table.methods:
        cells = []
        for d in datasets:
            cells.append(_fmt(table.mean(m, d)) if (m, d) in table.cells else "-")
        out.append(f"| {m} | " + " | ".join(cells) + f" | {avg[m]:.2f} |")
    return out + [""]


def report_markdown(result: BenchmarkResult, mode: str = "standard") -> str:
    """Markdown report: one table per (setup, fraction, model) with a rank column.

    ``mode='bridge'`` instead compares the GBDT baseline, the MLP without
    selection and the MLP after Deep Lasso selection in one ranked table.
    """
    lines = ["# Benchmark report", ""]
    if mode == "bridge":
        for (setup, fraction), table in bridging_gap_tables(result.records).items():
            lines += _markdown_table(table, f"{setup} {_fmt(100 * fraction)}%: GBDT vs MLP")
        return "\n".join(lines)
    if mode != "standard":
        raise ValueError(f"unknown report mode {mode!r}")
    for (setup, fraction, model), table in result.tables.items():
        lines += _markdown_table(table, f"{setup} {_fmt(100 * fraction)}% extraneous, downstream {model}")
    if result.percent_selected:
        lines += ["### Percent of extraneous features selected", "", "| setup | % | method | dataset | selected % |"]
        lines.append("|---|---|---|---|---|")
        for (setup, fraction, method, dataset), v in sorted(result.percent_selected.items()):
            lines.append(f"| {setup} | {_fmt(100 * fraction)} | {method} | {dataset} | {_fmt(v)} |")
        lines.append("")
    for (setup, fraction, methods), mat in result.similarity.items():
        lines += [f"### Importance rank correlation ({setup} {_fmt(100 * fraction)}%)", ""]
        lines.append("| | " + " | ".join(methods) + " |")
        lines.append("|---" * (len(methods) + 1) + "|")
        for name, row in zip(methods, mat):
            lines.append(f"| {name} | " + " | ".join(_fmt(v) for v in row) + " |")
        lines += ["", f"mean pairwise correlation: {_fmt(stats.mean_pairwise(mat))}", ""]
    if result.selection_scores:
        lines += ["### Random features: ROC-AUC and precision@k", "", "| % | method | dataset | ROC-AUC | precision |"]
        lines.append("|---|---|---|---|---|")
        for (fraction, method, dataset), (auc, prec) in sorted(result.selection_scores.items()):
            lines.append(f"| {_fmt(100 * fraction)} | {method} | {dataset} | {_fmt(auc)} | {_fmt(prec)} |")
        lines.append("")
    return "\n".join(lines)


def bridging_gap_tables(records: Sequence[ResultRecord]) -> dict:
    """Rank XGBoost (no selection), MLP (no selection) and Deep Lasso + MLP together."""
    keep = {("none", "gbdt"), ("none", "mlp"), ("deep_lasso", "mlp")}
    out: dict = {}
    groups: dict = {}
    for r in records:
        if r.kind == "final" and r.ok and (r.cell["fs_method"], r.cell["model"]) in keep:
            key = (r.cell["setup"], r.cell["fraction"])
            groups.setdefault(key, {}).setdefault((_method_label(r.cell), r.cell["dataset"]), {})[r.index] = r.test_metric
    for key, cells in groups.items():
        table = stats.RankTable()
        for (method, dataset), by_seed in cells.items():
            if len(by_seed) >= 2:
                table.add(method, dataset, [by_seed[i] for i in sorted(by_seed)])
        out[key] = table
    return out


def noise_sweep_csv(records: Sequence[ResultRecord]) -> str:
    """Test metric versus extraneous fraction for runs without selection (plot-ready)."""
    rows: dict = {}
    for r in records:
        if r.kind == "final" and r.ok and r.cell["fs_method"] == "none":
            rows.setdefault((r.cell["dataset"], r.cell["model"], r.cell["setup"], r.cell["fraction"]), []).append(
                r.test_metric
            )
    lines = ["dataset,model,setup,fraction,mean,std,n"]
    for (dataset, model, setup, fraction), v in sorted(rows.items()):
        lines.append(f"{dataset},{model},{setup},{_fmt(fraction)},{_fmt(np.mean(v))},{_fmt(np.std(v))},{len(v)}")
    return "\n".join(lines) + "\n"


def write_outputs(result: BenchmarkResult, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "tables.csv").write_text(tables_csv(result), encoding="utf-8")
    (out / "report.md").write_text(report_markdown(result), encoding="utf-8")
    (out / "noise_sweep.csv").write_text(noise_sweep_csv(result.records), encoding="utf-8")
    if any(r.cell["model"] == "gbdt" for r in result.records):
        (out / "bridge.md").write_text(report_markdown(result, mode="bridge"), encoding="utf-8")


# -- suite files -----------------------------------------------------------------------


def noise_sweep_suite(
    dataset: dict,
    fractions: Sequence[float] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9),
    models: Sequence[str] = ("mlp", "gbdt"),
    **kw,
) -> list[ExperimentConfig]:
    """Configs for metric-versus-noise curves: no selection, random features."""
    return [
        ExperimentConfig(dataset=dataset, fs_method="none", model=m, setup="random", fraction=p, **kw)
        for p in fractions
        for m in models
    ]


def expand_suite(suite: dict) -> list[ExperimentConfig]:
    """Expand a suite definition into configs (datasets x setups x methods x models)."""
    common = {k: suite[k] for k in ("n_trials", "n_seeds", "master_seed", "train", "space") if k in suite}
    setups = suite.get("setups", [{"kind": "random", "fraction": 0.5}])
    configs = []
    for ds in suite["datasets"]:
        for st in setups:
            for model in suite.get("models", ["mlp"]):
                for method in suite.get("methods", ["none"]):
                    configs.append(
                        ExperimentConfig(
                            dataset=ds,
                            fs_method=method,
                            model=model,
                            setup=st["kind"],
                            fraction=float(st.get("fraction", 0.5)),
                            **common,
                        )
                    )
    return configs


def load_suite(path: str | Path) -> dict:
    suite = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(suite, dict) or not suite.get("datasets"):
        raise ValueError(f"{path}: suite must define a non-empty 'datasets' list")
    return suite
