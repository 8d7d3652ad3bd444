"""Which selectors find the informative features?

Builds a regression problem with 20 informative features, appends 20 pure
noise columns and scores every feature with each selection method.  ROC-AUC
treats "informative" as the positive class, so 1.0 means every informative
feature outranks every noise column.

    python demos/selector_recovery.py [--seed 0] [--setup random|corrupted|second-order]
"""

import argparse
import time

from tabfs import data, fs, stats, trees
from tabfs.nn import REGRESSION, MlpSpec, TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--setup", default="random")
    args = ap.parse_args()

    ds = data.prepare(data.make_synthetic_oracle(2000, 20, REGRESSION, args.seed), args.seed, args.setup, 0.5)
    Xtr, ytr = ds.train
    Xv, yv = ds.val
    mask = ds.original_mask
    spec = MlpSpec(ds.m, 1, 1, 64)
    cfg = TrainConfig(lr=1e-2, seed=args.seed)
    pcfg = fs.PenaltyConfig(alpha=0.9)

    selectors = {
        "univariate": lambda: fs.univariate_scores(Xtr, ytr, REGRESSION),
        "lasso": lambda: fs.lasso_fit(Xtr, ytr, REGRESSION, alpha=0.9),
        "first_layer_lasso": lambda: fs.first_layer_lasso_fit(spec, Xtr, ytr, Xv, yv, REGRESSION, cfg, pcfg).scores,
        "adaptive_group_lasso": lambda: fs.adaptive_group_lasso_fit(spec, Xtr, ytr, Xv, yv, REGRESSION, cfg, pcfg).scores,
        "deep_lasso": lambda: fs.deep_lasso_fit(spec, Xtr, ytr, Xv, yv, REGRESSION, cfg, pcfg).scores,
        "random_forest": lambda: trees.fit_forest(Xtr, ytr, REGRESSION, trees.ForestConfig(n_estimators=100), args.seed)[1],
        "xgboost": lambda: trees.fit_gbdt(Xtr, ytr, REGRESSION, trees.GbdtConfig(n_estimators=200, max_depth=4), args.seed, val=(Xv, yv))[1],
    }

    print(f"{ds.n_original} informative + {ds.m - ds.n_original} {args.setup} features, {ds.n} rows")
    print(f"{'method':<22}{'roc_auc':>9}{'precision':>11}{'noise/signal':>14}{'seconds':>9}")
    for name, run in selectors.items():
        t0 = time.perf_counter()
        s = run()
        v = s.scores
        ratio = v[~mask].mean() / max(v[mask].mean(), 1e-300)
        print(
            f"{name:<22}{stats.roc_auc(s, mask):>9.3f}{stats.precision_at_k(s, mask):>11.3f}"
            f"{ratio:>14.3f}{time.perf_counter() - t0:>9.1f}"
        )


if __name__ == "__main__":
    main()
