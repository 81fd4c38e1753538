"""Command-line entry point: ``gpmia <command> --config PATH [--seed N] [--out DIR]``.

Exit codes: 0 success, 1 numerical failure, 2 configuration or I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

import yaml

from gpmia import config as cfgmod
from gpmia import experiments, pipeline
from gpmia.errors import ConfigError, GpMiaError, NumericalError

EXIT_OK, EXIT_NUMERIC, EXIT_CONFIG = 0, 1, 2


def _load_config(args):
    if getattr(args, "experiment", None):
        if args.config:
            raise ConfigError("give either a built-in experiment or --config, not both")
        cfg = cfgmod.validate(experiments.builtin(args.experiment))
    else:
        if not args.config:
            raise ConfigError("--config is required")
        cfg = cfgmod.load(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = args.out or cfg.get("out")
    if not out:
        out = f"gpmia-runs/{args.experiment}" if getattr(args, "experiment", None) else "gpmia-out"
    return pipeline.Run(cfg, out, force=getattr(args, "force", False))


def cmd_train_target(args):
    run = _load_config(args)
    _, acc = pipeline.train_target(run)
    print(f"target trained on {len(run.member_data())} member samples; training accuracy {acc:.4f}")
    print(f"wrote {run.path(pipeline.MODEL_FILE)}")


def cmd_extract(args):
    run = _load_config(args)
    counts = pipeline.extract(run)
    for fname, n in counts.items():
        print(f"wrote {n} records to {run.path(fname)}")


def cmd_train_gp(args):
    run = _load_config(args)
    post, lml0 = pipeline.train_gp(run)
    h = post.hyper
    print(f"GP hyperparameters: signal_variance={h.signal_variance:.6g} lengthscale={h.lengthscale:.6g} "
          f"noise_variance={h.noise_variance:.6g}")
    print(f"log evidence {lml0:.6f} -> {post.log_marginal:.6f}")
    print(f"wrote {run.path(pipeline.POSTERIOR_FILE)}")


def cmd_infer(args):
    run = _load_config(args)
    rows = pipeline.infer(run, args.features)
    for r in rows:
        print(f"{r['unit_id']}\t{r['probability']:.6f}\t{r['latent_mean']:.6f}\t{r['latent_variance']:.6f}")
    print(f"wrote {run.path(pipeline.SCORES_FILE)}")


def _print_report(report, set_stats):
    print(f"AUROC {report.auroc:.4f}  AUPR {report.aupr:.4f}")
    for f, t in report.tpr_at_fpr:
        print(f"TPR@{f:g}FPR {t:.4f}")
    (tn, fp), (fn, tp) = report.confusion
    print(f"confusion @ {report.threshold:g}: TN={tn} FP={fp} FN={fn} TP={tp}")
    for g, s in set_stats.items():
        print(f"  {g:<20} n={s['n']:<4d} mean={s['mean']:.4f} std={s['std']:.4f}")


def cmd_eval(args):
    run = _load_config(args)
    report, set_stats = pipeline.evaluate(run, args.scores)
    _print_report(report, set_stats)
    print(f"wrote {run.path(pipeline.REPORT_FILE)}")


def cmd_run(args):
    run = _load_config(args)
    pipeline.run_all(run)
    report = json.loads(run.path(pipeline.REPORT_FILE).read_text(encoding="utf-8"))
    print(json.dumps(report["set_stats"], indent=1))
    print(f"report: {run.path(pipeline.REPORT_FILE)}")


def cmd_repro(args):
    if args.dump_config:
        yaml.safe_dump(experiments.builtin(args.experiment), sys.stdout, sort_keys=False)
        return
    run = _load_config(args)
    pipeline.run_all(run)
    doc = json.loads(run.path(pipeline.REPORT_FILE).read_text(encoding="utf-8"))
    print(f"{args.experiment}: AUROC {doc['auroc']:.4f}  AUPR {doc['aupr']:.4f}")
    for g, s in doc["set_stats"].items():
        print(f"  {g:<20} n={s['n']:<4d} mean membership probability {s['mean']:.4f} (std {s['std']:.4f})")
    print(f"report: {run.path(pipeline.REPORT_FILE)}")


def build_parser():
    p = argparse.ArgumentParser(prog="gpmia", description="Gaussian-process membership inference toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="YAML or JSON experiment config")
        sp.add_argument("--seed", type=int, help="override the config's global seed")
        sp.add_argument("--out", help="output directory (default: config 'out' key)")
        sp.add_argument("--force", action="store_true", help="accept artifacts from a different config")

    sp = sub.add_parser("train-target", help="train the target MLP on member data")
    common(sp)
    sp.set_defaults(func=cmd_train_target)

    sp = sub.add_parser("extract", help="build the feature store for all unit groups")
    common(sp)
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("train-gp", help="fit the GP membership classifier")
    common(sp)
    sp.set_defaults(func=cmd_train_gp)

    sp = sub.add_parser("infer", help="score candidate units")
    common(sp)
    sp.add_argument("--features", help="score this feature-store file instead of the run's candidates")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval", help="compute AUROC / AUPR / TPR@FPR / confusion from scores")
    common(sp)
    sp.add_argument("--scores", help="scores file (default: <out>/scores.jsonl)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("run", help="run all stages, skipping up-to-date artifacts")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("repro", help="run a built-in experiment (exp1, exp2, fraud)")
    sp.add_argument("experiment", choices=sorted(experiments.BUILTIN))
    common(sp, config_required=False)
    sp.add_argument("--dump-config", action="store_true", help="print the built-in config and exit")
    sp.set_defaults(func=cmd_repro)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except NumericalError as exc:
        print(f"gpmia: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (GpMiaError, OSError) as exc:
        print(f"gpmia: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
