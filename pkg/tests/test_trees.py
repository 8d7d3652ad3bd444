import numpy as np
import pytest

from tabfs import trees
from tabfs.nn import CLASSIFICATION, REGRESSION
from tabfs.trees import ForestConfig, GbdtConfig


def _step_data(n=1000, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 2))
    return X, (X[:, 0] > 0).astype(int)


def test_split_gain_example():
    assert trees.split_gain(2.0, 1.0, -2.0, 1.0, 1.0, 0.0) == pytest.approx(2.0)
    assert trees.split_gain(2.0, 1.0, -2.0, 1.0, 1.0, 0.5) == pytest.approx(1.5)


def test_forest_finds_determining_feature():
    X, y = _step_data()
    _, scores = trees.fit_forest(X, y, CLASSIFICATION, ForestConfig(n_estimators=30, max_depth=6), seed=0)
    assert scores.scores[0] > 0.8
    assert scores.scores.sum() == pytest.approx(1.0)


def test_forest_constant_feature_gets_zero():
    rng = np.random.default_rng(1)
    X = np.column_stack([rng.standard_normal(200), np.full(200, 3.0), rng.standard_normal(200)])
    y = X[:, 0] + 0.1 * X[:, 2]
    _, s = trees.fit_forest(X, y, REGRESSION, ForestConfig(n_estimators=10, max_depth=5, max_features=3))
    assert s.scores[1] == 0.0


def test_forest_constant_target_and_errors():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((50, 3))
    forest, s = trees.fit_forest(X, np.full(50, 2.5), REGRESSION, ForestConfig(n_estimators=5))
    np.testing.assert_array_equal(forest.predict(X), 2.5)
    assert np.all(s.scores == 0.0)
    with pytest.raises(ValueError, match="two classes"):
        trees.fit_forest(X, np.zeros(50, dtype=int), CLASSIFICATION)
    with pytest.raises(ValueError):
        forest.predict(np.zeros((2, 4)))


def test_forest_splits_strictly_decrease_impurity():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((300, 4))
    y = (X[:, 0] + X[:, 1] ** 2 > 0.5).astype(int)
    forest, _ = trees.fit_forest(X, y, CLASSIFICATION, ForestConfig(n_estimators=5, max_depth=6), seed=1)
    for t in forest.trees:
        for i in np.flatnonzero(t.left >= 0):
            l, r = t.left[i], t.right[i]
            assert t.n_samples[i] == t.n_samples[l] + t.n_samples[r]
            children = t.n_samples[l] * t.impurity[l] + t.n_samples[r] * t.impurity[r]
            assert children < t.n_samples[i] * t.impurity[i]
        assert t.depth <= 6


def test_forest_is_seed_deterministic_and_permutation_equivariant():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((2000, 5))
    y = X[:, 0] - 2 * X[:, 3] + 0.1 * rng.standard_normal(2000)
    # large, shallow nodes: tiny nodes admit exact gain ties, broken by column position
    cfg = ForestConfig(n_estimators=8, max_depth=3, max_features=5)
    _, a = trees.fit_forest(X, y, REGRESSION, cfg, seed=9)
    _, b = trees.fit_forest(X, y, REGRESSION, cfg, seed=9)
    np.testing.assert_array_equal(a.scores, b.scores)
    perm = np.array([3, 0, 4, 1, 2])
    _, c = trees.fit_forest(X[:, perm], y, REGRESSION, cfg, seed=9)
    np.testing.assert_allclose(c.scores, a.scores[perm], rtol=1e-12)


def test_duplicated_feature_keeps_importance_mass():
    ratios = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((300, 4))
        y = 2 * X[:, 0] + X[:, 1] + 0.3 * rng.standard_normal(300)
        cfg = ForestConfig(n_estimators=20, max_depth=5)
        _, single = trees.fit_forest(X, y, REGRESSION, cfg, seed=seed)
        _, dup = trees.fit_forest(np.column_stack([X, X[:, 0]]), y, REGRESSION, cfg, seed=seed)
        ratios.append((dup.scores[0] + dup.scores[4]) / single.scores[0])
    assert np.mean(ratios) >= 0.9
    assert np.mean(np.array(ratios) >= 0.9) >= 0.8


def test_forest_vote_of_identical_trees():
    X, y = _step_data(200)
    forest, _ = trees.fit_forest(X, y, CLASSIFICATION, ForestConfig(n_estimators=1, max_depth=1), seed=0)
    single = np.argmax(forest.trees[0].predict(X), axis=1)
    tripled = trees.Forest(forest.trees * 3, CLASSIFICATION, 2, 2)
    np.testing.assert_array_equal(tripled.predict(X), single)


def _brute_force_stump(X, g, h, lam):
    best = (-np.inf, None, None)
    for j in range(X.shape[1]):
        order = np.argsort(X[:, j], kind="stable")
        xs = X[order, j]
        for i in range(1, len(xs)):
            if xs[i] == xs[i - 1]:
                continue
            left = order[:i]
            right = order[i:]
            gain = trees.split_gain(g[left].sum(), h[left].sum(), g[right].sum(), h[right].sum(), lam, 0.0)
            if gain > best[0]:
                best = (gain, j, (xs[i - 1] + xs[i]) / 2)
    return best


def test_boosted_stump_matches_brute_force():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((60, 3))
    y = np.sin(2 * X[:, 1]) + 0.2 * X[:, 2]
    cfg = GbdtConfig(n_estimators=1, max_depth=1, learning_rate=1.0, reg_lambda=1.0, min_child_weight=0.0)
    model, _ = trees.fit_gbdt(X, y, REGRESSION, cfg)
    t = model.rounds[0][0]
    g = y.mean() - y
    gain, feat, thr = _brute_force_stump(X, g, np.ones_like(y), 1.0)
    assert t.feature[0] == feat
    assert t.threshold[0] == pytest.approx(thr)
    assert t.gain[0] == pytest.approx(gain, rel=1e-12)
    left = X[:, feat] <= thr
    assert t.value[t.left[0], 0] == pytest.approx(-g[left].sum() / (left.sum() + 1.0))


def test_boosted_stump_importance_and_heavy_regularization():
    X = np.linspace(-1, 1, 100).reshape(-1, 1)
    y = (X[:, 0] > 0).astype(int)
    model, s = trees.fit_gbdt(X, y, CLASSIFICATION, GbdtConfig(n_estimators=1, max_depth=1))
    assert model.rounds[0][0].feature[0] == 0
    np.testing.assert_array_equal(s.scores, [1.0])
    X2 = np.random.default_rng(0).standard_normal((100, 3))
    y2 = X2[:, 0]
    model, s = trees.fit_gbdt(X2, y2, REGRESSION, GbdtConfig(n_estimators=5, reg_lambda=1e12))
    assert all(t.depth == 0 for r in model.rounds for t in r)
    assert np.all(s.scores == 0.0)


def test_gbdt_gains_positive_and_min_child_weight():
    rng = np.random.default_rng(6)
    X = rng.standard_normal((400, 4))
    y = X[:, 0] * X[:, 1] + 0.1 * rng.standard_normal(400)
    cfg = GbdtConfig(n_estimators=10, max_depth=4, min_child_weight=15.0, gamma=0.1)
    model, _ = trees.fit_gbdt(X, y, REGRESSION, cfg)
    for r in model.rounds:
        t = r[0]
        internal = t.left >= 0
        assert np.all(t.gain[internal] > 0)
        assert np.all(t.n_samples[~internal] >= 15)


def test_gbdt_identical_rounds_sum_and_empty_ensemble():
    X = np.linspace(-1, 1, 50).reshape(-1, 1)
    y = X[:, 0] * 2
    model, _ = trees.fit_gbdt(X, y, REGRESSION, GbdtConfig(n_estimators=1, max_depth=1, learning_rate=1.0))
    stump = model.rounds[0][0]
    stacked = trees.Gbdt([[stump]] * 4, REGRESSION, 0, 1, model.base_score, 1.0)
    np.testing.assert_allclose(stacked.raw_predict(X)[:, 0], model.base_score[0] + 4 * stump.predict(X)[:, 0])
    empty = trees.Gbdt([], REGRESSION, 0, 1, np.array([0.7]), 0.3)
    np.testing.assert_array_equal(empty.predict(X), 0.7)


def test_gbdt_early_stopping_and_multiclass():
    rng = np.random.default_rng(7)
    X = rng.standard_normal((600, 3))
    y = np.argmax(X + 0.3 * rng.standard_normal((600, 3)), axis=1)
    cfg = GbdtConfig(n_estimators=400, max_depth=3, learning_rate=0.5, early_stopping_rounds=10)
    model, s = trees.fit_gbdt(X[:400], y[:400], CLASSIFICATION, cfg, val=(X[400:], y[400:]))
    assert len(model.history) < 400
    assert len(model.history) - model.best_iteration == 10
    assert model.best_iteration == int(np.argmin(model.history)) + 1
    assert len(model.rounds[0]) == 3
    assert np.mean(model.predict(X[400:]) == y[400:]) > 0.7
    np.testing.assert_allclose(model.predict_proba(X[:5]).sum(axis=1), 1.0)
    assert s.scores.sum() == pytest.approx(1.0)


def test_gbdt_permutation_equivariance():
    rng = np.random.default_rng(8)
    X = rng.standard_normal((300, 4))
    y = X[:, 0] + 0.5 * X[:, 2] ** 2
    cfg = GbdtConfig(n_estimators=20, max_depth=3, min_child_weight=10.0)
    _, a = trees.fit_gbdt(X, y, REGRESSION, cfg)
    perm = np.array([2, 3, 0, 1])
    _, b = trees.fit_gbdt(X[:, perm], y, REGRESSION, cfg)
    np.testing.assert_allclose(b.scores, a.scores[perm], rtol=1e-10)


def test_config_validation():
    with pytest.raises(ValueError):
        GbdtConfig(n_estimators=2001)
    with pytest.raises(ValueError):
        GbdtConfig(subsample=0.0)
    with pytest.raises(ValueError):
        ForestConfig(n_estimators=0)


@pytest.mark.parametrize("kind", ["forest", "gbdt"])
def test_ensemble_roundtrip(tmp_path, kind):
    X, y = _step_data(300, seed=3)
    if kind == "forest":
        model, _ = trees.fit_forest(X, y, CLASSIFICATION, ForestConfig(n_estimators=4, max_depth=3), seed=2)
    else:
        model, _ = trees.fit_gbdt(X, y, CLASSIFICATION, GbdtConfig(n_estimators=5, subsample=0.7), seed=2)
    path = tmp_path / "model.json"
    trees.save_ensemble(model, path)
    back = trees.load_ensemble(path)
    np.testing.assert_array_equal(back.predict(X), model.predict(X))
