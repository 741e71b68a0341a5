"""Command-line pipeline driver.

Subcommands cover the whole flow: synth, split, train-head, calibrate,
fit-thresholds, score, evaluate, sweep, report. Shared flags: --config
(key = value file, overridden by explicit flags), --method, --mode, --p,
--seed, --min-area, --out.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import calib, head as head_mod, metrics, pipeline, scores, splitter, synthgen, thresholds
from .labelspace import UNLABELED


def _base_config(args) -> pipeline.RunConfig:
    cfg = pipeline.load_config(args.config) if getattr(args, "config", None) else pipeline.RunConfig()
    for name in ("method", "mode", "p", "seed", "min_area", "data_dir", "out_dir", "split"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    return cfg


def _add_common(sub, data=True):
    sub.add_argument("--config", help="key = value config file")
    if data:
        sub.add_argument("--data", dest="data_dir", help="dataset directory with a manifest")
    sub.add_argument("--method", choices=scores.METHODS)
    sub.add_argument("--mode", choices=thresholds.MODES)
    sub.add_argument("--p", type=float)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--min-area", dest="min_area", type=int)
    sub.add_argument("--out", dest="out_dir")


def _calibration_pixels(cfg, args):
    x, y = pipeline.flatten_split(cfg.data_dir, "train", cfg)
    if getattr(args, "with_val", False):
        xv, yv = pipeline.flatten_split(cfg.data_dir, "val", cfg)
        x = np.concatenate([x, xv])
        y = np.concatenate([y, yv])
    return x, y


def cmd_synth(args):
    cfg = _base_config(args)
    spec = synthgen.SynthSpec(
        dim=args.dim,
        n_anomalies=args.anomalies,
        n_ood_classes=args.ood_classes,
        separation=args.separation,
        samples_per_class=args.samples,
        seed=cfg.seed,
    )
    ds = synthgen.generate(spec)
    synthgen.save_dataset(ds, cfg.out_dir)
    print(f"wrote {sum(len(t) for t in ds.splits.values())} tiles to {cfg.out_dir}")


def cmd_split(args):
    units = splitter.read_units_csv(args.units)
    result = splitter.stratified_split(units, seed=args.seed or 0)
    os.makedirs(args.out_dir, exist_ok=True)
    splitter.write_assignment_csv(os.path.join(args.out_dir, "assignment.csv"), result)
    splitter.write_trace(os.path.join(args.out_dir, "objective_trace.csv"), result)
    ratios = ", ".join(f"{s}={result.achieved_ratios[s]:.3f}" for s in splitter.SPLIT_NAMES)
    print(f"objective {result.objective:.6f} ({ratios})")


def cmd_train_head(args):
    cfg = _base_config(args)
    x, y = pipeline.flatten_split(cfg.data_dir, "train", cfg)
    xv, yv = pipeline.flatten_split(cfg.data_dir, "val", cfg)
    train_cfg = head_mod.TrainConfig(
        epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch, seed=cfg.seed
    )
    result = head_mod.train(x, y, train_cfg, xv, yv)
    os.makedirs(os.path.dirname(os.path.abspath(args.head_out)) or ".", exist_ok=True)
    head_mod.save_head(args.head_out, result.head)
    best = result.history[result.best_epoch]
    print(f"best epoch {result.best_epoch}: val mIoU {best['val_miou']:.4f}")


def cmd_calibrate(args):
    cfg = _base_config(args)
    x, y = _calibration_pixels(cfg, args)
    keep = y != UNLABELED
    hd = head_mod.load_head(args.head)
    stats = calib.estimate(
        x[keep], y[keep], normalize=(cfg.method == "maha+"), n_classes=hd.n_classes
    )
    calib.save_stats(stats, args.stats_out)
    print(f"calibrated {stats.n_classes} classes on {int(stats.counts.sum())} pixels (lam={stats.lam:.3e})")


def cmd_fit_thresholds(args):
    cfg = _base_config(args)
    hd = head_mod.load_head(args.head)
    x, y = _calibration_pixels(cfg, args)
    keep = y != UNLABELED  # padding pixels must not distort the quantiles
    x, y = x[keep], y[keep]
    ctx = pipeline.ScoringContext(head=hd)
    if cfg.method in ("maha", "maha+"):
        ctx.stats = calib.load_stats(args.stats)
    else:
        ctx = pipeline.fit_scoring_context(cfg.method, hd, x, y, cfg.react_percentile)
    logits, probs = head_mod.infer(hd, x)
    pred = np.argmax(logits, axis=1)
    s = pipeline.score_pixels(
        cfg.method, x, logits, probs, pred,
        stats=ctx.stats, head=hd, clamp=ctx.clamp, profiles=ctx.profiles,
    )
    ts = thresholds.fit(s, pred, cfg.mode, cfg.p, hd.n_classes, population=f"{cfg.data_dir}:train+val")
    thresholds.save_thresholds(args.thresholds_out, ts)
    print(f"fitted {cfg.mode} thresholds at p={cfg.p}")


def _load_context(cfg, args):
    hd = head_mod.load_head(args.head)
    if cfg.method in ("maha", "maha+"):
        ctx = pipeline.ScoringContext(head=hd, stats=calib.load_stats(args.stats))
    else:
        x, y = _calibration_pixels(cfg, args)
        keep = y != UNLABELED
        ctx = pipeline.fit_scoring_context(cfg.method, hd, x[keep], y[keep], cfg.react_percentile)
    return hd, ctx


def cmd_score(args):
    cfg = _base_config(args)
    hd, ctx = _load_context(cfg, args)
    entries = pipeline.load_split(cfg.data_dir, cfg.split or "test")
    scored = pipeline.score_tiles(entries, ctx, cfg.method, cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    for item in scored:
        scores.save_score_map(
            os.path.join(cfg.out_dir, f"{item['tile']}.scores.oods"), item["scores"], cfg.method
        )
    pipeline.write_run_manifest(cfg.out_dir, cfg, {"tiles": len(scored)})
    print(f"scored {len(scored)} tiles with {cfg.method}")


def cmd_evaluate(args):
    cfg = _base_config(args)
    hd, ctx = _load_context(cfg, args)
    ts = thresholds.load_thresholds(args.thresholds)
    result = pipeline.run_inference(cfg, head=hd, ctx=ctx, ts=ts)
    if result.report is not None:
        print(metrics.format_report(result.report), end="")
    else:
        print(f"no labels in split {cfg.split!r}; wrote maps and area report only")


def cmd_sweep(args):
    cfg = _base_config(args)
    hd, ctx = _load_context(cfg, args)
    xc, yc = _calibration_pixels(cfg, args)
    xc = xc[yc != UNLABELED]
    logits_c, probs_c = head_mod.infer(hd, xc)
    pred_c = np.argmax(logits_c, axis=1)
    sc = pipeline.score_pixels(
        cfg.method, xc, logits_c, probs_c, pred_c,
        stats=ctx.stats, head=hd, clamp=ctx.clamp, profiles=ctx.profiles,
    )
    xe, ye = pipeline.flatten_split(cfg.data_dir, cfg.split or "test", cfg)
    logits_e, probs_e = head_mod.infer(hd, xe)
    pred_e = np.argmax(logits_e, axis=1)
    se = pipeline.score_pixels(
        cfg.method, xe, logits_e, probs_e, pred_e,
        stats=ctx.stats, head=hd, clamp=ctx.clamp, profiles=ctx.profiles,
    )
    result = thresholds.sweep(sc, pred_c, se, pred_e, ye, cfg.mode, hd.n_classes)
    os.makedirs(cfg.out_dir, exist_ok=True)
    pipeline.emit_sweep_plot_data(
        result, cfg.method, cfg.mode, os.path.join(cfg.out_dir, "sweep.csv")
    )
    print(f"best p = {result.best_p} (ber {result.rows[result.best_index][3]:.4f})")


def cmd_report(args):
    reports = []
    for path in args.inputs:
        side = {}
        with open(path) as f:
            header = f.readline()
            if header.strip() != "metric,mean,stderr":
                raise ValueError(f"{path} is not a metrics table")
            for line in f:
                name, mean, _ = line.strip().split(",")
                if name == "n_seeds":
                    continue
                side[name] = float(mean)
        reports.append(metrics.MetricReport(**side))
    agg = metrics.aggregate_seeds(reports)
    os.makedirs(args.out_dir, exist_ok=True)
    out_path = os.path.join(args.out_dir, "aggregate.csv")
    with open(out_path, "w") as f:
        f.write(metrics.report_csv(agg))
    fnr, se = agg["fnr_bar"]
    print(f"aggregated {len(reports)} runs: fnr_bar {fnr:.2f} +/- {se:.2f}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oodseg", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    s = subs.add_parser("synth", help="generate a synthetic dataset")
    _add_common(s, data=False)
    s.add_argument("--dim", type=int, default=16)
    s.add_argument("--anomalies", type=int, default=4)
    s.add_argument("--ood-classes", dest="ood_classes", type=int, default=1)
    s.add_argument("--separation", type=float, default=6.0)
    s.add_argument("--samples", type=int, default=1000)
    s.set_defaults(func=cmd_synth)

    s = subs.add_parser("split", help="stratified unit/group split")
    s.add_argument("--units", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", dest="out_dir", required=True)
    s.set_defaults(func=cmd_split)

    s = subs.add_parser("train-head", help="train the linear head")
    _add_common(s)
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--lr", type=float, default=3e-4)
    s.add_argument("--batch", type=int, default=None)
    s.add_argument("--head-out", required=True)
    s.set_defaults(func=cmd_train_head)

    s = subs.add_parser("calibrate", help="fit class-conditional Gaussian statistics")
    _add_common(s)
    s.add_argument("--head", required=True)
    s.add_argument("--with-val", action="store_true", help="include the val split")
    s.add_argument("--stats-out", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = subs.add_parser("fit-thresholds", help="fit score thresholds on train+val")
    _add_common(s)
    s.add_argument("--head", required=True)
    s.add_argument("--stats")
    s.add_argument("--with-val", action="store_true", default=True)
    s.add_argument("--thresholds-out", required=True)
    s.set_defaults(func=cmd_fit_thresholds)

    s = subs.add_parser("score", help="write score maps for a split")
    _add_common(s)
    s.add_argument("--head", required=True)
    s.add_argument("--stats")
    s.add_argument("--split", default="test")
    s.set_defaults(func=cmd_score)

    s = subs.add_parser("evaluate", help="full inference + metrics on a split")
    _add_common(s)
    s.add_argument("--head", required=True)
    s.add_argument("--stats")
    s.add_argument("--thresholds", required=True)
    s.add_argument("--split", default="test")
    s.set_defaults(func=cmd_evaluate)

    s = subs.add_parser("sweep", help="operating-point sweep over the p grid")
    _add_common(s)
    s.add_argument("--head", required=True)
    s.add_argument("--stats")
    s.add_argument("--split", default="test")
    s.set_defaults(func=cmd_sweep)

    s = subs.add_parser("report", help="aggregate metric tables across seeds")
    s.add_argument("--inputs", nargs="+", required=True)
    s.add_argument("--out", dest="out_dir", required=True)
    s.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
