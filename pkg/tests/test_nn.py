import math

import numpy as np
import pytest
from scipy.special import logsumexp

from tabfs import autodiff as ad
from tabfs import nn
from tabfs.nn import CLASSIFICATION, REGRESSION, MlpSpec, TrainConfig


def _linear_task(n=300, d=4, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    y = X @ np.arange(1.0, d + 1)
    return X[:200], y[:200], X[200:], y[200:]


def test_parameter_count():
    assert nn.build_mlp(MlpSpec(2, 1, n_layers=1, layer_size=4)).n_parameters == 17


def test_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec(0, 1)
    with pytest.raises(ValueError):
        MlpSpec(2, 1, dropout=0.6)
    with pytest.raises(ValueError):
        MlpSpec(2, 1, layer_size=0)


def test_linear_model_when_no_hidden_layers():
    mlp = nn.build_mlp(MlpSpec(3, 1, n_layers=0), seed=2)
    assert [p.shape for p in mlp.params] == [(1, 3), (1, 1)]


def test_init_deterministic():
    a = nn.build_mlp(MlpSpec(5, 2, 2, 8), seed=4)
    b = nn.build_mlp(MlpSpec(5, 2, 2, 8), seed=4)
    for p, q in zip(a.params, b.params):
        np.testing.assert_array_equal(p, q)


def test_no_dropout_train_equals_eval():
    mlp = nn.build_mlp(MlpSpec(3, 2, 2, 6), seed=1)
    X = np.random.default_rng(0).standard_normal((7, 3))
    out = mlp.forward_graph(ad.const(X), [ad.var(p) for p in mlp.params], dropout_rng=np.random.default_rng(5))
    np.testing.assert_allclose(out.value, mlp.predict(X), rtol=0, atol=1e-14)


def test_loss_values():
    assert nn.loss(ad.var([[1.0], [2.0]]), np.array([1.0, 2.0]), REGRESSION).value == 0.0
    ce = nn.loss(ad.var([[0.0, 0.0]]), np.array([0]), CLASSIFICATION).value
    assert ce == pytest.approx(math.log(2))


def test_cross_entropy_matches_reference():
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((6, 4)) * 30  # large values exercise the shift
    y = rng.integers(0, 4, 6)
    want = np.mean(logsumexp(logits, axis=1) - logits[np.arange(6), y])
    got = nn.loss(ad.var(logits), y, CLASSIFICATION).value
    assert got == pytest.approx(want, rel=1e-12)
    total = nn.loss(ad.var(logits), y, CLASSIFICATION, reduction="sum").value
    assert total == pytest.approx(6 * want, rel=1e-12)


def test_loss_errors():
    with pytest.raises(ValueError, match="out of range"):
        nn.loss(ad.var([[0.0, 1.0]]), np.array([2]), CLASSIFICATION)
    with pytest.raises(ValueError):
        nn.loss(ad.var([[0.0, 1.0]]), np.array([1.0]), REGRESSION)


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    t = rng.standard_normal(5)
    assert ad.finite_diff_check(lambda o: nn.loss(o, t, REGRESSION), rng.standard_normal((5, 1)), 1e-6) <= 1e-6
    y = rng.integers(0, 3, 5)
    assert ad.finite_diff_check(lambda o: nn.loss(o, y, CLASSIFICATION), rng.standard_normal((5, 3)), 1e-6) <= 1e-6


def test_adamw_first_step():
    p = [np.array([1.0])]
    nn.AdamW(lr=0.1).step(p, [np.array([1.0])])
    assert p[0][0] == pytest.approx(0.9, abs=1e-7)


def test_adamw_decoupled_decay():
    p = [np.array([1.0])]
    nn.AdamW(lr=0.1, weight_decay=0.1).step(p, [np.array([0.0])])
    assert p[0][0] == pytest.approx(0.99, abs=1e-15)


def test_lr_schedule():
    cfg = TrainConfig(lr=1.0)
    assert [nn.lr_at_epoch(cfg, e) for e in (0, 39, 40, 79, 80, 150)] == pytest.approx(
        [1.0, 1.0, 0.1, 0.1, 0.01, 0.01]
    )


def test_train_config_defaults():
    cfg = TrainConfig()
    assert (cfg.max_epochs, cfg.patience, cfg.batch_size, cfg.lr_decay_epochs, cfg.lr_decay_factor) == (
        200,
        20,
        512,
        (40, 80),
        0.1,
    )


def test_fit_converges_on_noiseless_linear_task():
    Xtr, ytr, Xv, yv = _linear_task()
    model = nn.build_mlp(MlpSpec(4, 1, n_layers=0), seed=0)
    init = float(np.mean((model.predict(Xtr)[:, 0] - ytr) ** 2))
    out = nn.fit(model, Xtr, ytr, Xv, yv, REGRESSION, TrainConfig(max_epochs=300, lr=0.05, batch_size=32))
    final = float(np.mean((out.mlp.predict(Xtr)[:, 0] - ytr) ** 2))
    assert final < 1e-2 * init


def test_fit_restores_best_epoch_and_is_reproducible():
    Xtr, ytr, Xv, yv = _linear_task(seed=1)
    yv = yv + np.random.default_rng(0).standard_normal(yv.size)
    spec = MlpSpec(4, 1, 1, 16, dropout=0.2)
    cfg = TrainConfig(max_epochs=30, patience=5, lr=1e-2, batch_size=64, seed=3)
    a = nn.fit(nn.build_mlp(spec, 0), Xtr, ytr, Xv, yv, REGRESSION, cfg)
    b = nn.fit(nn.build_mlp(spec, 0), Xtr, ytr, Xv, yv, REGRESSION, cfg)
    assert a.history == b.history
    metrics = [h["val_metric"] for h in a.history]
    assert metrics[a.best_epoch - 1] == min(metrics)
    assert nn.evaluate(a, Xv, yv, REGRESSION) == pytest.approx(min(metrics), rel=1e-12)


def test_identity_penalty_is_bit_identical():
    Xtr, ytr, Xv, yv = _linear_task(seed=2)
    spec = MlpSpec(4, 1, 1, 8)
    cfg = TrainConfig(max_epochs=5, batch_size=50, lr=1e-2)
    a = nn.fit(nn.build_mlp(spec, 0), Xtr, ytr, Xv, yv, REGRESSION, cfg)
    b = nn.fit(nn.build_mlp(spec, 0), Xtr, ytr, Xv, yv, REGRESSION, cfg, penalty=lambda L, x, p: L)
    for p, q in zip(a.mlp.params, b.mlp.params):
        assert p.tobytes() == q.tobytes()


def test_patience_one_stops_at_epoch_two():
    Xtr, ytr, Xv, yv = _linear_task()
    # zero learning rate: the metric never improves after the first epoch
    out = nn.fit(nn.build_mlp(MlpSpec(4, 1, 0), 0), Xtr, ytr, Xv, yv, REGRESSION, TrainConfig(lr=0.0, patience=1))
    assert len(out.history) == 2 and out.best_epoch == 1


def test_non_finite_objective_aborts():
    Xtr, ytr, Xv, yv = _linear_task()
    bad = lambda L, x, p: ad.log(L * 0.0)  # noqa: E731
    with pytest.raises(FloatingPointError, match="epoch 1, batch 0"):
        nn.fit(nn.build_mlp(MlpSpec(4, 1, 0), 0), Xtr, ytr, Xv, yv, REGRESSION, TrainConfig(), penalty=bad)


def test_evaluate_examples():
    y = np.random.default_rng(0).standard_normal(10_000)
    y = (y - y.mean()) / y.std()
    assert nn.evaluate_outputs(np.zeros((y.size, 1)), y, REGRESSION) == pytest.approx(1.0)
    assert nn.evaluate_outputs(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 0]), CLASSIFICATION) == 0.5
    with pytest.raises(ValueError):
        nn.build_mlp(MlpSpec(3, 1)).predict(np.zeros((2, 4)))


def test_checkpoint_roundtrip(tmp_path):
    Xtr, ytr, Xv, yv = _linear_task()
    model = nn.fit(nn.build_mlp(MlpSpec(4, 1, 1, 8), 0), Xtr, ytr, Xv, yv, REGRESSION, TrainConfig(max_epochs=3))
    path = tmp_path / "m.npz"
    nn.save_model(model, path)
    back = nn.load_model(path)
    assert back.spec == model.spec and back.best_epoch == model.best_epoch
    np.testing.assert_array_equal(back.mlp.predict(Xv), model.mlp.predict(Xv))
