import json

import numpy as np
import pytest

from tabfs import bench
from tabfs.bench import ExperimentConfig, LogUniform, Uniform, UniformInt, ZeroOr

SMALL = {"kind": "synthetic", "n": 300, "m_informative": 3, "seed": 1}
TRAIN = {"max_epochs": 3, "patience": 2, "batch_size": 64, "gbdt_n_estimators": 10}


def _config(**kw):
    base = dict(dataset=SMALL, fs_method="univariate", model="mlp", n_trials=2, n_seeds=2, train=TRAIN)
    base.update(kw)
    return ExperimentConfig(**base)


def test_log_uniform_is_uniform_in_log_space():
    rng = np.random.default_rng(0)
    d = LogUniform(1e-5, 1e-2)
    draws = np.array([d.sample(rng) for _ in range(20_000)])
    assert np.all((draws >= 1e-5) & (draws <= 1e-2))
    assert np.mean(draws < 10**-3.5) == pytest.approx(0.5, abs=0.02)


def test_zero_or_is_half_zeros():
    rng = np.random.default_rng(1)
    draws = np.array([ZeroOr(LogUniform(1e-4, 1e-1)).sample(rng) for _ in range(20_000)])
    assert np.mean(draws == 0) == pytest.approx(0.5, abs=0.02)
    assert np.all(draws[draws > 0] >= 1e-4)


def test_int_draws_cover_inclusive_range():
    rng = np.random.default_rng(2)
    draws = {UniformInt(1, 3).sample(rng) for _ in range(200)}
    assert draws == {1, 2, 3}


def test_invalid_ranges_raise():
    with pytest.raises(ValueError):
        Uniform(1.0, 1.0)
    with pytest.raises(ValueError):
        LogUniform(0.0, 1.0)
    with pytest.raises(ValueError):
        bench.parse_dist({"gamma": [1, 2]})


def test_parse_dist_forms():
    assert bench.parse_dist({"uniform": [0, 1]}) == Uniform(0, 1)
    assert bench.parse_dist({"int": [2, 4]}) == UniformInt(2, 4)
    assert bench.parse_dist({"zero_or": {"loguniform": [1e-3, 1]}}) == ZeroOr(LogUniform(1e-3, 1))
    assert bench.parse_dist(7).sample(None) == 7


def test_search_space_groups():
    assert set(bench.search_space("deep_lasso", "gbdt")) == {"mlp", "gbdt", "penalty"}
    assert set(bench.search_space("random_forest", "mlp")) == {"mlp", "forest"}
    assert set(bench.search_space("none", "gbdt")) == {"gbdt"}
    space = bench.search_space("none", "mlp", {"mlp": {"n_layers": 2}})
    assert bench.sample_hyperparams(space, np.random.default_rng(0))["mlp"]["n_layers"] == 2


def test_config_hash_is_stable_and_sensitive():
    a, b = _config(), _config()
    assert a.hash == b.hash and len(a.hash) == 16
    assert _config(master_seed=1).hash != a.hash
    with pytest.raises(ValueError):
        _config(fs_method="magic")
    with pytest.raises(ValueError):
        _config(n_seeds=1)


def test_derive_seed_streams_differ():
    seeds = {bench.derive_seed(0, 5, s, i) for s in range(3) for i in range(10)}
    assert len(seeds) == 30
    assert bench.derive_seed(0, 5, 1, 2) == bench.derive_seed(0, 5, 1, 2)


def _record(index=0, **kw):
    return bench.ResultRecord("abc", "trial", index, 1, {"setup": "random"}, {"mlp": {"lr": 0.1}}, **kw)


def test_log_roundtrip_and_dedup(tmp_path):
    path = tmp_path / "log.jsonl"
    assert bench.append_records(path, [_record(0, val_metric=0.5), _record(1)]) == 2
    assert bench.append_records(path, [_record(1), _record(2)]) == 1
    back = bench.load_records(path)
    assert [r.index for r in back] == [0, 1, 2]
    assert back[0].val_metric == 0.5
    first = json.loads(path.read_text().splitlines()[0])
    assert first["schema"] == bench.SCHEMA_VERSION and "fs_seconds" not in first["record"]


def test_corrupt_and_truncated_logs_detected(tmp_path):
    path = tmp_path / "log.jsonl"
    bench.append_records(path, [_record(0, val_metric=0.5)])
    line = path.read_text()
    path.write_text(line.replace("0.5", "0.6"))
    with pytest.raises(bench.CorruptLogError, match="checksum"):
        bench.load_records(path)
    path.write_text(line[: len(line) // 2])
    with pytest.raises(bench.CorruptLogError, match="line 1"):
        bench.load_records(path)


def test_best_trial_prefers_earliest_tie():
    recs = [_record(0, val_metric=0.5), _record(1, val_metric=0.7), _record(2, val_metric=0.7)]
    assert bench.best_trial(recs).index == 1
    assert bench.best_trial([_record(0, status="failed")]) is None


def test_run_config_is_deterministic():
    cfg = _config()
    a = bench.run_config(cfg)
    b = bench.run_config(cfg)
    assert [bench.record_line(r) for r in a] == [bench.record_line(r) for r in b]
    finals = [r for r in a if r.kind == "final"]
    assert len(finals) == 2 and all(r.ok and r.test_metric is not None for r in finals)
    assert all(r.test_metric is None for r in a if r.kind == "trial")
    assert all(len(r.selected) == 3 and r.n_features == 6 for r in a)


def test_no_selection_trains_on_every_column():
    recs = bench.run_config(_config(fs_method="none", model="gbdt"))
    assert all(r.selected == list(range(6)) and r.scores is None for r in recs)


def test_failed_trial_is_recorded():
    rec = bench.run_trial(_config(), {}, seed=0)
    assert rec.status == "failed" and "KeyError" in rec.error
    assert rec.val_metric is None


def test_run_benchmark_and_reports(tmp_path):
    configs = [_config(fs_method=m) for m in ("none", "univariate", "lasso")]
    log = tmp_path / "results.jsonl"
    result = bench.run_benchmark(configs, log)
    assert len(bench.load_records(log)) == len(result.records) == 3 * 4
    bench.write_outputs(result, tmp_path / "out")
    report = (tmp_path / "out" / "report.md").read_text()
    assert "rank" in report.lower() and "lasso + mlp" in report
    assert (tmp_path / "out" / "tables.csv").read_text().count("\n") >= 4
    again = bench.aggregate(bench.load_records(log))
    assert bench.report_markdown(again) == bench.report_markdown(result)


def test_noise_sweep_suite_and_expand():
    configs = bench.noise_sweep_suite(SMALL, fractions=(0.1, 0.5), models=("mlp",))
    assert [(c.fs_method, c.setup, c.fraction) for c in configs] == [("none", "random", 0.1), ("none", "random", 0.5)]
    suite = {"datasets": [SMALL], "methods": ["none", "lasso"], "models": ["mlp", "gbdt"], "n_seeds": 3}
    expanded = bench.expand_suite(suite)
    assert len(expanded) == 4 and all(c.n_seeds == 3 for c in expanded)


def test_california_reference_runs_through_the_harness(tmp_path, monkeypatch):
    rng = np.random.default_rng(0)
    X = rng.standard_normal((200, 8))
    y = X[:, 0] - X[:, 6] + 0.1 * rng.standard_normal(200)
    path = tmp_path / "cal.csv"
    header = ",".join(("MedInc", "HouseAge", "AveRooms", "AveBedrms", "Population", "AveOccup", "Latitude", "Longitude", "MedHouseVal"))
    path.write_text(header + "\n" + "\n".join(",".join(map(repr, row)) for row in np.column_stack([X, y]).tolist()) + "\n")
    monkeypatch.setenv("TABFS_CALIFORNIA_CSV", str(path))
    recs = bench.run_config(_config(dataset={"kind": "california_housing"}, fs_method="deep_lasso"))
    finals = [r for r in recs if r.kind == "final"]
    assert len(finals) == 2 and all(r.ok and r.n_features == 16 for r in finals)
    assert finals[0].cell["dataset"] == "california_housing"
