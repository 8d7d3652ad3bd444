"""Command-line entry point: ``tabfs <command> [flags]``.

Commands: synth, augment, select, train, bench, report.  Exit codes are
0 (success), 2 (usage), 3 (data) and 4 (numeric failure); on failure one
JSON line ``{"error": ..., "exit": ..., "reason": ...}`` goes to stderr.
Relative output paths are resolved against ``$TABFS_OUTPUT_DIR`` when set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import bench, data, fs, stats

OUTPUT_ENV = "TABFS_OUTPUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

METHOD_ALIASES = {
    "none": "none",
    "univariate": "univariate",
    "lasso": "lasso",
    "first-layer-lasso": "first_layer_lasso",
    "1l-lasso": "first_layer_lasso",
    "adaptive-group-lasso": "adaptive_group_lasso",
    "agl": "adaptive_group_lasso",
    "random-forest": "random_forest",
    "rf": "random_forest",
    "xgboost": "xgboost",
    "xgb": "xgboost",
    "deep-lasso": "deep_lasso",
}
AUGMENT_KINDS = {
    "random": "random",
    "corrupt-gauss": "corrupted",
    "corrupt-laplace": "corrupted-laplace",
    "second-order": "second-order",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _out_path(p: str | Path) -> Path:
    p = Path(p)
    base = os.environ.get(OUTPUT_ENV)
    if base and not p.is_absolute():
        p = Path(base) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _g(v: float) -> str:
    return f"{v:.6g}"


def _method(name: str) -> str:
    key = name.replace("_", "-")
    if key not in METHOD_ALIASES:
        raise UsageError(f"unknown method {name!r}; choose from {', '.join(sorted(METHOD_ALIASES))}")
    return METHOD_ALIASES[key]


def _meta_for(csv_path: str, meta: Optional[str]) -> str:
    return meta or str(Path(csv_path).with_suffix(".json"))


# -- hyperparameter flags -------------------------------------------------------------


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model hyperparameters")
    g.add_argument("--layers", type=int, default=2, help="MLP hidden layers (0 = linear)")
    g.add_argument("--size", type=int, default=64, help="MLP hidden width")
    g.add_argument("--dropout", type=float, default=0.0)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--weight-decay", type=float, default=0.0)
    g.add_argument("--epochs", type=int, default=200, help="maximum MLP epochs")
    g.add_argument("--patience", type=int, default=20)
    g.add_argument("--batch-size", type=int, default=512)
    g.add_argument("--penalty-weight", type=float, default=0.1, help="sparsity weight 1 - alpha")
    g.add_argument("--n-estimators", type=int, default=None, help="trees (forest) or boosting rounds")
    g.add_argument("--max-depth", type=int, default=None)
    g.add_argument("--learning-rate", type=float, default=0.3, help="boosting learning rate")


def _hyperparams(args) -> tuple[dict, dict]:
    hp = {
        "mlp": {
            "n_layers": args.layers,
            "layer_size": args.size,
            "dropout": args.dropout,
            "lr": args.lr,
            "weight_decay": args.weight_decay,
        },
        "gbdt": {"max_depth": args.max_depth or 6, "learning_rate": args.learning_rate},
        "forest": {"n_estimators": args.n_estimators or 100, "max_depth": args.max_depth or 10},
        "penalty": {"weight": args.penalty_weight},
    }
    train = {"max_epochs": args.epochs, "patience": args.patience, "batch_size": args.batch_size}
    if args.n_estimators:
        train["gbdt_n_estimators"] = args.n_estimators
    return hp, train


def _load_prepared(args) -> data.Dataset:
    ds = data.load_csv(args.data, _meta_for(args.data, args.meta))
    return data.prepare(ds, seed=args.seed, setup="none")


# -- commands -------------------------------------------------------------------------


def cmd_synth(args) -> int:
    ds = data.make_synthetic_oracle(args.n, args.informative, args.task, args.seed, noise=args.noise)
    out = _out_path(args.out)
    meta = _out_path(_meta_for(args.out, args.out_meta))
    data.save_csv(ds, out, meta)
    print(f"synth: wrote {ds.n} rows x {ds.m} features to {out}")
    return EXIT_OK


def cmd_augment(args) -> int:
    ds = data.load_csv(args.data, _meta_for(args.data, args.meta))
    aug = data.prepare(ds, seed=args.seed, setup=AUGMENT_KINDS[args.kind], fraction=args.fraction)
    out = _out_path(args.out)
    meta = _out_path(_meta_for(args.out, args.out_meta))
    extra = {} if "split_seed" in aug.info else {"split_seed": args.seed}
    data.save_csv(aug, out, meta, **extra)
    print(f"augment: {ds.m} -> {aug.m} features ({aug.m - ds.m} {args.kind}) written to {out}")
    return EXIT_OK


def cmd_select(args) -> int:
    method = _method(args.method)
    if method == "none":
        raise UsageError("select needs a feature selection method")
    ds = _load_prepared(args)
    hp, train = _hyperparams(args)
    cfg = bench.ExperimentConfig(
        dataset={"kind": "csv", "path": args.data}, fs_method=method, setup="none", train=train
    )
    scores = bench.run_selector(cfg, hp, ds, args.seed)
    out = _out_path(args.out)
    fs.write_scores_csv(scores, out, ds.names, [f.tag for f in ds.features], args.seed)
    top = fs.select_top_k(scores, ds.n_original)
    print(f"select: {method} scored {ds.m} features; top-{len(top)}: {top}")
    if not ds.original_mask.all():
        print(f"roc_auc={_g(stats.roc_auc(scores, ds.original_mask))} precision={_g(stats.precision_at_k(scores, ds.original_mask))}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = _load_prepared(args)
    if args.scores:
        scores, _ = fs.read_scores_csv(args.scores)
        if len(scores) != ds.m:
            raise data.DataError(f"score file has {len(scores)} features, dataset has {ds.m}")
        k = args.k or ds.n_original
        selected = fs.select_top_k(scores, k)
    else:
        selected = list(range(ds.m))
    sub = ds.select_columns(selected)
    hp, train = _hyperparams(args)
    cfg = bench.ExperimentConfig(dataset={"kind": "csv", "path": args.data}, model=args.model, setup="none", train=train)
    predict = bench.fit_downstream(cfg, hp, sub, args.seed)
    result = {
        "model": args.model,
        "seed": args.seed,
        "selected": [int(i) for i in selected],
        "val_metric": stats.metrics(predict(sub.val[0]), sub.val[1], ds.task),
        "test_metric": stats.metrics(predict(sub.test[0]), sub.test[1], ds.task),
    }
    name = "accuracy" if ds.task == "classification" else "neg_rmse"
    print(f"train: {args.model} on {len(selected)} features val_{name}={_g(result['val_metric'])} test_{name}={_g(result['test_metric'])}")
    if args.out:
        _out_path(args.out).write_text(json.dumps(result, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        suite = bench.load_suite(args.suite)
    except (OSError, json.JSONDecodeError) as exc:
        raise data.DataError(f"cannot read suite {args.suite}: {exc}") from None
    if args.seed is not None:
        suite["master_seed"] = args.seed
    configs = bench.expand_suite(suite)
    out_dir = _out_path(Path(args.out or suite.get("output_dir", "bench_out")) / "x").parent
    log = out_dir / "results.jsonl"
    result = bench.run_benchmark(configs, log_path=log, jobs=args.jobs)
    bench.write_timings(out_dir / "timings.jsonl", result.records)
    bench.write_outputs(bench.aggregate(bench.load_records(log)), out_dir)
    failed = sum(1 for r in result.records if not r.ok)
    print(f"bench: {len(configs)} configs, {len(result.records)} runs ({failed} failed); results in {out_dir}")
    return EXIT_OK


def cmd_report(args) -> int:
    records = bench.load_records(args.log)
    if not records:
        raise data.DataError(f"{args.log}: no records")
    result = bench.aggregate(records)
    text = bench.report_markdown(result, mode=args.mode)
    if args.out:
        _out_path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text)
    if args.csv:
        _out_path(args.csv).write_text(bench.tables_csv(result), encoding="utf-8")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tabfs", description="Feature selection benchmark for tabular neural networks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset with known informative features")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--informative", type=int, default=8)
    p.add_argument("--task", choices=("regression", "classification"), default="regression")
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.add_argument("--out-meta")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("augment", help="split, preprocess and append extraneous features")
    p.add_argument("--data", required=True)
    p.add_argument("--meta")
    p.add_argument("--kind", choices=tuple(AUGMENT_KINDS), required=True)
    p.add_argument("--fraction", type=float, default=0.5, help="share of extraneous features in the output")
    p.add_argument("--out", required=True)
    p.add_argument("--out-meta")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("select", help="score features with one selection method")
    p.add_argument("--method", required=True, help="univariate, lasso, first-layer-lasso, agl, rf, xgboost, deep-lasso")
    p.add_argument("--data", required=True)
    p.add_argument("--meta")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_model_flags(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("train", help="train a downstream model on the top-k features of a score file")
    p.add_argument("--data", required=True)
    p.add_argument("--meta")
    p.add_argument("--scores", help="score CSV from `select`; omit to use every feature")
    p.add_argument("--k", type=int, help="features to keep (default: number of original features)")
    p.add_argument("--model", choices=bench.MODELS, default="mlp")
    p.add_argument("--out", help="metrics JSON path")
    p.add_argument("--seed", type=int, default=0)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="run a benchmark suite file")
    p.add_argument("--suite", required=True)
    p.add_argument("--out", help="output directory (default: suite output_dir)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=None, help="override the suite master seed")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="aggregate a result log into markdown tables")
    p.add_argument("--log", required=True)
    p.add_argument("--out")
    p.add_argument("--csv")
    p.add_argument("--mode", choices=("standard", "bridge"), default="standard")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; reports are deterministic")
    p.set_defaults(func=cmd_report)
    return parser


def _fail(kind: str, code: int, exc: BaseException) -> int:
    reason = str(exc).replace("\n", " ")
    sys.stderr.write(json.dumps({"error": kind, "exit": code, "reason": reason}) + "\n")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    except FloatingPointError as exc:
        return _fail("numeric", EXIT_NUMERIC, exc)
    except (data.DataError, bench.CorruptLogError, OSError, ValueError, KeyError) as exc:
        return _fail("data", EXIT_DATA, exc)


if __name__ == "__main__":
    sys.exit(main())
