"""``tripartite`` command-line experiment runner.

Exit codes: 0 success, 2 configuration or input error, 3 training divergence,
4 gradient-check failure.
"""

import argparse
import json
import logging
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import AblationGrid, AblationVariant, load_config
from .data import Dataset, generate_dataset, read_dump, write_dump
from .errors import ConfigError, DivergenceError, DumpFormatError
from .geometry import metric_report, separability_matrix
from .grads import GRADCHECK_OPS, failures, gradcheck_suite, worst_by_op
from .losses import Family
from .train import (
    run_training,
    uniform_descent,
    write_checkpoint,
    write_csv,
    write_history,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_GRADCHECK = 4

METRIC_COLUMNS = ("class", "compactness", "feat_sep", "clf_sep")
EVAL_COLUMNS = ("stage", "acc_many", "acc_medium", "acc_few", "acc_all")
ABLATION_COLUMNS = ("variant", "seed", "status", "acc_many", "acc_medium", "acc_few", "acc_all",
                    "clf_sep_std")

log = logging.getLogger("tripartite")


class _Out:
    def __init__(self, quiet):
        self.quiet = quiet

    def __call__(self, *lines):
        if not self.quiet:
            for line in lines:
                print(line)


# -- helpers ----------------------------------------------------------------------


def _resolve(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = cfg.with_out_dir(args.out)
    return cfg


def load_dataset_dir(path):
    """Dataset from ``train.dump`` / ``test.dump`` written by ``gen-data``."""
    path = Path(path)
    tr = read_dump(path / "train.dump")
    te = read_dump(path / "test.dump")
    if te.K != tr.K or te.d != tr.d:
        raise ConfigError(f"train/test dumps in {path} disagree on K or d")
    counts = np.bincount(tr.y, minlength=tr.K)
    return Dataset(tr.X, tr.y, te.X, te.y, counts, None)


def _dataset(args, cfg):
    if getattr(args, "data", None):
        ds = load_dataset_dir(args.data)
        if cfg.data.K != ds.K:
            log.info("using K=%d from %s (config says %d)", ds.K, args.data, cfg.data.K)
        return ds
    return generate_dataset(cfg.data)


def write_metric_csv(path, report):
    rows = [(k, report.compactness[k], report.feature_separability[k],
             report.classifier_separability[k]) for k in range(report.K)]
    write_csv(path, METRIC_COLUMNS, rows)


def write_matrix_csv(path, S):
    K = S.shape[0]
    write_csv(path, ("class",) + tuple(str(j) for j in range(K)),
              [(k,) + tuple(S[k]) for k in range(K)])


def _count_summary(counts):
    return (f"classes {counts.size}  total {int(counts.sum())}  "
            f"head {int(counts[0])}  tail {int(counts[-1])}")


# -- commands ---------------------------------------------------------------------


def cmd_gen_data(args, out):
    cfg = _resolve(args)
    ds = generate_dataset(cfg.data)
    d = cfg.out_dir
    write_dump(d / "train.dump", ds.X_train, ds.y_train, ds.K)
    write_dump(d / "test.dump", ds.X_test, ds.y_test, ds.K)
    write_csv(d / "counts.csv", ("class", "count"), list(enumerate(ds.counts.tolist())))
    out(_count_summary(ds.counts))
    out("counts: " + " ".join(str(int(c)) for c in ds.counts))
    out(f"wrote {d / 'train.dump'} and {d / 'test.dump'}")
    return EXIT_OK


def _write_run(d, cfg, ds, result):
    write_history(d / "history.csv", result.history)
    evals = [dict(stage="stage1", **result.stage1_eval.row())]
    if cfg.train.epochs_stage2 > 0:
        evals.append(dict(stage="stage2", **result.final_eval.row()))
    write_csv(d / "eval.csv", EVAL_COLUMNS, evals)
    write_csv(d / "per_class_accuracy.csv", ("class", "stage1", "final"),
              [(k, a, b) for k, (a, b) in enumerate(zip(result.stage1_eval.per_class_accuracy,
                                                         result.final_eval.per_class_accuracy))])
    for epoch, rep in sorted(result.metrics.items()):
        write_metric_csv(d / "metrics" / f"epoch_{epoch:04d}.csv", rep)


def cmd_train(args, out):
    cfg = _resolve(args)
    ds = _dataset(args, cfg)
    d = cfg.out_dir
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    def on_stage1(model):
        write_checkpoint(d / "checkpoint.s1", model, ds)

    try:
        result = run_training(ds, cfg.train, on_stage1=on_stage1)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        print(f"last finite-loss epoch: {exc.last_finite_epoch}", file=sys.stderr)
        return EXIT_DIVERGED
    if cfg.train.epochs_stage2 > 0:
        write_checkpoint(d / "checkpoint.s2", result.model, ds)
    _write_run(d, cfg, ds, result)
    out(f"stage 1: {cfg.train.epochs_stage1} epochs, stage 2: {cfg.train.epochs_stage2} epochs")
    if result.metrics:
        last = max(result.metrics)
        out(f"metrics (epoch {last}): {result.metrics[last].summary_line()}")
    out(result.final_eval.table())
    return EXIT_OK


def _ablation_job(job):
    cfg, variant_name, seed = job
    variant = AblationVariant.parse(variant_name)
    run_cfg = cfg.with_seed(seed).with_loss(variant.loss_config(cfg.loss))
    d = cfg.out_dir / "variants" / variant.name / f"seed_{seed}"
    row = {"variant": variant.name, "seed": seed, "status": "ok", "acc_many": None,
           "acc_medium": None, "acc_few": None, "acc_all": None, "clf_sep_std": None}
    try:
        ds = generate_dataset(run_cfg.data)
        result = run_training(ds, run_cfg.train)
    except DivergenceError as exc:
        row["status"] = "diverged"
        log.warning("%s seed %d diverged: %s", variant.name, seed, exc)
        return row
    except (ConfigError, ValueError, FloatingPointError) as exc:
        row["status"] = "error"
        log.warning("%s seed %d failed: %s", variant.name, seed, exc)
        return row
    _write_run(d, run_cfg, ds, result)
    row.update(result.final_eval.row())
    sep = separability_matrix(result.model.classifier.weights).row_means()
    row["clf_sep_std"] = float(sep.std())
    return row


def _mean_rows(rows, variants):
    out = []
    for v in variants:
        ok = [r for r in rows if r["variant"] == v.name and r["status"] == "ok"]
        row = {"variant": v.name, "seeds_ok": len(ok)}
        for c in ("acc_many", "acc_medium", "acc_few", "acc_all", "clf_sep_std"):
            vals = [r[c] for r in ok if r[c] is not None]
            row[c] = float(np.mean(vals)) if vals else None
        out.append(row)
    return out


def cmd_ablation(args, out):
    cfg = _resolve(args)
    grid = cfg.ablation
    if args.variants:
        grid = AblationGrid(tuple(args.variants.split(",")), grid.seeds)
    if args.seeds:
        grid = AblationGrid(grid.variants, tuple(int(s) for s in args.seeds.split(",")))
    for v in grid.variants:
        v.loss_config(cfg.loss)  # fail fast on lambda = 0 for a requested term
    jobs = [(cfg, v.name, s) for s in grid.seeds for v in grid.variants]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_ablation_job, jobs))
    else:
        rows = [_ablation_job(j) for j in jobs]
    d = cfg.out_dir
    write_csv(d / "ablation.csv", ABLATION_COLUMNS, rows)
    means = _mean_rows(rows, grid.variants)
    mean_cols = ("variant", "seeds_ok", "acc_many", "acc_medium", "acc_few", "acc_all",
                 "clf_sep_std")
    write_csv(d / "ablation_mean.csv", mean_cols, means)
    width = max(len(v.name) for v in grid.variants)
    out(f"{'variant':<{width}s}" + "".join(f"{h:>8s}" for h in ("Many", "Med.", "Few", "All")))
    for m in means:
        cells = ["NA" if m[c] is None else f"{m[c]:.2f}"
                 for c in ("acc_many", "acc_medium", "acc_few", "acc_all")]
        out(f"{m['variant']:<{width}s}" + "".join(f"{c:>8s}" for c in cells))
    failed = [r for r in rows if r["status"] != "ok"]
    for r in failed:
        out(f"{r['variant']} seed {r['seed']}: {r['status']}")
    return EXIT_OK


def cmd_gradcheck(args, out):
    if not args.tol > 0:
        raise ConfigError("--tol must be > 0")
    seeds = [args.seed] if args.seed is not None else list(range(args.num_seeds))
    ops = args.ops.split(",") if args.ops else None
    if ops:
        unknown = [o for o in ops if o not in GRADCHECK_OPS]
        if unknown:
            raise ConfigError(f"unknown gradcheck op(s) {unknown}; known: {list(GRADCHECK_OPS)}")
    reports = gradcheck_suite(seeds, tol=args.tol, step=args.step, ops=ops)
    for rep in worst_by_op(reports).values():
        out(rep.line(args.tol))
    bad = failures(reports, args.tol)
    for rep in bad:
        print(f"FAIL {rep.op} seed={rep.seed} coord={rep.worst_index} "
              f"rel_err={rep.max_rel_err:.3e} analytic={rep.analytic[rep.worst_index]:.17g} "
              f"numeric={rep.numeric[rep.worst_index]:.17g}", file=sys.stderr)
    if bad:
        return EXIT_GRADCHECK
    out(f"all {len(reports)} checks passed (tol {args.tol:g}, {len(seeds)} seed(s))")
    return EXIT_OK


def cmd_metrics(args, out):
    feats = read_dump(args.features)
    clf_src = read_dump(args.classifier) if args.classifier else feats
    if clf_src.classifier is None:
        raise ConfigError(f"{args.classifier or args.features} has no classifier block")
    clf = clf_src.classifier
    if feats.X.shape[0] and feats.d != clf.d:
        raise ConfigError(f"feature dim {feats.d} != classifier dim {clf.d}")
    if feats.K != clf.K:
        raise ConfigError(f"feature dump has K={feats.K}, classifier has K={clf.K}")
    report = metric_report(feats.X, feats.y, clf.weights, clf.K)
    d = Path(args.out) if args.out else Path(".")
    write_metric_csv(d / "metrics.csv", report)
    write_matrix_csv(d / "separability.csv", separability_matrix(clf.weights).s)
    out(report.summary_line())
    return EXIT_OK


def cmd_etf_sim(args, out):
    if args.K < 2 or args.d < 1 or args.steps < 0 or not args.lr > 0 or args.inits < 1:
        raise ConfigError("need K >= 2, d >= 1, steps >= 0, lr > 0, inits >= 1")
    if args.d < args.K - 1:
        warnings.warn(f"d={args.d} < K-1={args.K - 1}: a simplex ETF is not reachable; "
                      "reporting the best deviation found", stacklevel=1)
    seed = 0 if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    tr = uniform_descent(args.K, args.d, args.steps, args.lr, rng, inits=args.inits,
                         family=Family(args.family), include_positive=args.include_positive)
    rows = []
    for i in range(args.inits):
        for t in range(0, args.steps + 1, args.every):
            rows.append((i, t, tr.loss[t, i], tr.max_cos_dev[t, i], tr.max_norm_dev[t, i]))
        if args.steps % args.every:
            t = args.steps
            rows.append((i, t, tr.loss[t, i], tr.max_cos_dev[t, i], tr.max_norm_dev[t, i]))
    d = Path(args.out) if args.out else Path(".")
    write_csv(d / "etf_trajectory.csv", ("init", "step", "loss", "max_cos_dev", "max_norm_dev"),
              rows)
    final = tr.max_cos_dev[-1]
    for i, v in enumerate(final):
        out(f"init {i}: final max |cos + 1/(K-1)| = {v:.3e}")
    out(f"worst final deviation {final.max():.3e} over {args.inits} init(s)")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML experiment config")
    common.add_argument("--seed", type=int, help="seed for data and training (overrides config)")
    common.add_argument("--out", type=Path, help="output directory (overrides config)")
    common.add_argument("--quiet", action="store_true", help="print nothing on success")

    p = argparse.ArgumentParser(prog="tripartite", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="write train/test dumps")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", parents=[common], help="two-stage training run")
    s.add_argument("--data", type=Path, help="directory with train.dump/test.dump (else generate)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("ablation", parents=[common], help="run a grid of loss variants")
    s.add_argument("--variants", help="comma-separated variant names, e.g. sc-bce,sc-bce_ss-bce")
    s.add_argument("--seeds", help="comma-separated seeds (overrides [ablation] seeds)")
    s.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    s.set_defaults(func=cmd_ablation)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--num-seeds", type=int, default=20)
    s.add_argument("--step", type=float, default=1e-6)
    s.add_argument("--ops", help="comma-separated subset of operations")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("metrics", parents=[common], help="per-class geometry metrics of dumps")
    s.add_argument("features", type=Path, help="feature dump (may carry the classifier block)")
    s.add_argument("classifier", type=Path, nargs="?", help="dump with the classifier block")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("etf-sim", parents=[common], help="uniform-loss-only descent")
    s.add_argument("--K", type=int, default=4)
    s.add_argument("--d", type=int, default=8)
    s.add_argument("--steps", type=int, default=5000)
    s.add_argument("--lr", type=float, default=0.1)
    s.add_argument("--inits", type=int, default=1)
    s.add_argument("--every", type=int, default=1, help="log every N steps")
    s.add_argument("--family", choices=[f.value for f in Family], default="bce")
    s.add_argument("--include-positive", action="store_true")
    s.set_defaults(func=cmd_etf_sim)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.quiet:
        warnings.simplefilter("ignore")
    out = _Out(args.quiet)
    try:
        return args.func(args, out)
    except (ConfigError, DumpFormatError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
