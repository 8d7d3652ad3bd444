"""Acceptance criteria, one test each; every test records a PASS/FAIL line.

The lines are printed in the "acceptance criteria" section at the end of the
pytest run.  Run just this file with ``pytest tests/test_acceptance.py``.
"""

import time

import numpy as np
import pytest

from tabfs import autodiff as ad
from tabfs import bench, data, fs, nn, stats, trees
from tabfs.nn import CLASSIFICATION, REGRESSION, MlpSpec, TrainConfig

from .test_stats import _brute_force_p

PENALTY_GRID = (0.01, 0.03, 0.1, 0.3, 0.5)


def _oracle(seed: int) -> data.Dataset:
    """20 informative features plus 20 random N(0, 1) columns, n = 2000."""
    return data.prepare(data.make_synthetic_oracle(2000, 20, REGRESSION, seed), seed, "random", 0.5)


def _tuned_deep_lasso(ds: data.Dataset, seed: int) -> fs.NetworkSelection:
    """Deep Lasso with the penalty weight picked by validation RMSE."""
    Xtr, ytr = ds.train
    Xv, yv = ds.val
    best = None
    for w in PENALTY_GRID:
        sel = fs.deep_lasso_fit(
            MlpSpec(ds.m, 1, 1, 64, 0.0), Xtr, ytr, Xv, yv, REGRESSION,
            TrainConfig(lr=1e-2, seed=seed), fs.PenaltyConfig.from_penalty_weight(w),
        )
        val = sel.model.history[sel.model.best_epoch - 1]["val_metric"]
        if best is None or val < best[0]:
            best = (val, sel)
    return best[1]


def _unflatten(theta: ad.Node, shapes) -> list:
    parts, off = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        parts.append(ad.reshape(ad.select_rows(theta, np.arange(off, off + size)), shape))
        off += size
    return parts


def test_criterion_1_deep_lasso_equals_lasso_on_linear_models(criterion):
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        n, m = int(rng.integers(1, 65)), int(rng.integers(1, 17))
        X = ad.var(rng.standard_normal((n, m)))
        w = rng.standard_normal(m)
        f = ad.sum(X @ ad.const(w[:, None]))
        got = fs.deep_lasso_penalty(f, X, eps_norm=0.0).value
        want = np.sqrt(n) * np.abs(w).sum()
        worst = max(worst, abs(got - want) / want)
    elapsed = time.perf_counter() - t0
    ok = criterion("1 linear equivalence", worst <= 1e-9 and elapsed < 10, f"max rel err {worst:.2e}, {elapsed:.2f}s")
    assert ok


def test_criterion_2_gradient_oracles(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    first = 0.0
    for trial in range(20):
        d, out = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        task = REGRESSION if out == 1 else CLASSIFICATION
        spec = MlpSpec(d, out, int(rng.integers(0, 3)), int(rng.integers(2, 8)))
        mlp = nn.build_mlp(spec, seed=trial)
        X = rng.standard_normal((8, d))
        y = rng.standard_normal(8) if task == REGRESSION else rng.integers(0, out, 8)
        shapes = [p.shape for p in mlp.params]
        theta = np.concatenate([p.ravel() for p in mlp.params])
        f = lambda t: nn.loss(mlp.forward_graph(ad.const(X), _unflatten(t, shapes)), y, task)  # noqa: E731
        first = max(first, ad.finite_diff_check(f, theta, 1e-6))

    spec = MlpSpec(4, 1, 2, 8)  # 121 parameters
    mlp = nn.build_mlp(spec, seed=3)
    assert mlp.n_parameters <= 200
    X = rng.standard_normal((10, 4))
    y = rng.standard_normal(10)
    shapes = [p.shape for p in mlp.params]
    theta = np.concatenate([p.ravel() for p in mlp.params])

    def penalty(t):
        x = ad.var(X)
        return fs.deep_lasso_penalty(nn.loss(mlp.forward_graph(x, _unflatten(t, shapes)), y, REGRESSION), x)

    second = ad.finite_diff_check(penalty, theta, 1e-6)
    elapsed = time.perf_counter() - t0
    ok = first <= 1e-5 and second <= 1e-4 and elapsed < 60
    assert criterion("2 gradient oracles", ok, f"first-order {first:.1e}, second-order {second:.1e}, {elapsed:.1f}s")


def test_criterion_3_random_feature_recovery(criterion):
    t0 = time.perf_counter()
    ds = _oracle(0)
    Xtr, ytr = ds.train
    mask = ds.original_mask
    scores = {
        "univariate": fs.univariate_scores(Xtr, ytr, REGRESSION),
        "lasso": fs.lasso_fit(Xtr, ytr, REGRESSION, alpha=0.9),
        "deep_lasso": _tuned_deep_lasso(ds, 0).scores,
        "random_forest": trees.fit_forest(Xtr, ytr, REGRESSION, trees.ForestConfig(n_estimators=100), seed=0)[1],
    }
    aucs = {k: stats.roc_auc(s, mask) for k, s in scores.items()}
    elapsed = time.perf_counter() - t0
    detail = ", ".join(f"{k} {v:.3f}" for k, v in aucs.items()) + f", {elapsed:.0f}s"
    assert criterion("3 random-feature recovery", min(aucs.values()) >= 0.9 and elapsed < 600, detail)


def test_criterion_4_deep_lasso_noise_suppression(criterion):
    ratios = []
    for seed in range(10):
        ds = _oracle(seed)
        s = _tuned_deep_lasso(ds, seed).scores.scores
        mask = ds.original_mask
        ratios.append(s[~mask].mean() / s[mask].mean())
    hits = sum(r <= 0.1 for r in ratios)
    detail = f"{hits}/10 seeds with ratio <= 0.1 (max {max(ratios):.3f})"
    assert criterion("4 Deep Lasso noise suppression", hits >= 8, detail)


def test_criterion_5_generator_statistics(criterion):
    from scipy.stats import kstest

    rng = np.random.default_rng(5)
    x = rng.standard_normal(10_000) * 2.0 + 1.0
    base = data.Dataset(x[:, None], np.zeros(x.size), REGRESSION, [data.FeatureInfo("x")])
    corr = np.corrcoef(x, data.add_corrupted_features(base, 0.5, 1).X[:, 1])[0, 1]

    z = rng.standard_normal(100_000)
    z = (z - z.mean()) / z.std()
    lap_base = data.Dataset(z[:, None], np.zeros(z.size), REGRESSION, [data.FeatureInfo("z")])
    eps = 2 * data.add_corrupted_features(lap_base, 0.5, 2, "laplace").X[:, 1] - z
    lap_var = eps.var()

    skewed = rng.lognormal(size=(10_000, 3))
    qt = data.QuantileTransformer().fit_transform(skewed)
    ks = max(kstest(qt[:, j], "norm").statistic for j in range(3))

    ok = abs(corr - 1 / np.sqrt(2)) <= 0.05 and abs(lap_var - 1) <= 0.05 and ks <= 0.02
    assert criterion("5 generator statistics", ok, f"corr {corr:.4f}, laplace var {lap_var:.4f}, KS {ks:.4f}")


def test_criterion_6_statistics_oracles(criterion):
    rng = np.random.default_rng(6)
    worst = 0.0
    for n_a in range(1, 8):
        for n_b in range(1, 8):
            for _ in range(3):
                a = rng.integers(0, 5, n_a).astype(float)
                b = rng.integers(0, 5, n_b).astype(float)
                p = stats.wilcoxon_rank_sum_one_sided(a, b, "exact")
                worst = max(worst, abs(p - _brute_force_p(a, b)))
    example = stats.wilcoxon_rank_sum_one_sided([4, 5, 6], [1, 2, 3])

    rho_err = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 40))
        a, b = rng.permutation(n), rng.permutation(n)
        formula = 1 - 6 * np.sum((a - b) ** 2) / (n * (n**2 - 1))
        rho_err = max(rho_err, abs(stats.spearman(a, b) - formula))

    identity = True
    for _ in range(500):
        n = int(rng.integers(2, 50))
        mask = np.zeros(n, bool)
        mask[rng.choice(n, int(rng.integers(1, n)), replace=False)] = True
        p, r = stats.precision_recall_at_k(np.round(rng.standard_normal(n), 1), mask)
        identity &= p == r

    ok = worst <= 1e-12 and example == 0.05 and rho_err <= 1e-12 and identity
    detail = f"enumeration err {worst:.1e}, example p {example}, spearman err {rho_err:.1e}, precision=recall {identity}"
    assert criterion("6 statistics oracles", ok, detail)


def test_criterion_7_california_housing_direction(criterion):
    try:
        data.load_california_housing()
    except data.DataError as exc:
        criterion("7 California Housing direction", False, f"dataset unavailable: {exc}")
        pytest.xfail(f"California Housing not available offline ({data.CALIFORNIA_ENV} unset)")
    t0 = time.perf_counter()
    finals = {}
    for method in ("none", "deep_lasso"):
        cfg = bench.ExperimentConfig(
            dataset={"kind": "california_housing"}, fs_method=method, model="mlp",
            setup="random", fraction=0.5, n_trials=20, n_seeds=10, master_seed=0,
        )
        recs = [r for r in bench.run_config(cfg) if r.kind == "final" and r.ok]
        finals[method] = {r.index: r.test_metric for r in recs}
    wins = sum(finals["deep_lasso"].get(s, -np.inf) > finals["none"].get(s, np.inf) for s in range(10))
    elapsed = time.perf_counter() - t0
    detail = f"Deep Lasso wins {wins}/10 seeds, {elapsed / 60:.1f} min"
    assert criterion("7 California Housing direction", wins >= 8 and elapsed < 45 * 60, detail)


MINI_SUITE = {
    "datasets": [
        {"kind": "synthetic", "n": 400, "m_informative": 4, "seed": 3},
        {"kind": "synthetic", "n": 400, "m_informative": 4, "task": "classification", "seed": 4},
    ],
    "setups": [{"kind": "random", "fraction": 0.5}, {"kind": "corrupted", "fraction": 0.5}],
    "methods": list(bench.FS_METHODS),
    "models": ["mlp", "gbdt"],
    "n_trials": 2,
    "n_seeds": 2,
    "master_seed": 11,
    "train": {"max_epochs": 3, "patience": 2, "batch_size": 128, "gbdt_n_estimators": 10},
    "space": {"mlp": {"n_layers": {"int": [1, 2]}, "layer_size": {"int": [8, 32]}}, "forest": {"n_estimators": 10}},
}


def test_criterion_8_determinism(criterion, tmp_path):
    logs = []
    for run, jobs in (("a", 1), ("b", 1), ("c", 2)):
        path = tmp_path / run / "results.jsonl"
        result = bench.run_benchmark(bench.expand_suite(MINI_SUITE), path, jobs=jobs)
        bench.write_outputs(result, tmp_path / run)
        logs.append((path.read_bytes(), (tmp_path / run / "report.md").read_bytes()))
    n_records = len(bench.load_records(tmp_path / "a" / "results.jsonl"))
    ok = logs[0] == logs[1] == logs[2] and n_records > 0
    assert criterion("8 determinism", ok, f"{n_records} records identical across 3 runs (1 and 2 workers)")
