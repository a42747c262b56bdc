"""Command line entry point.

Subcommands::

    run      train and evaluate one multi-stage experiment
    ablate   same, with components dropped (no --drop: the whole single-drop grid)
    drift    train on one stage and measure drift on another (--pair A,B)
    report   rebuild metrics.csv and plots from a finished run directory
    xcomp    recompute the cross-composition grid of a finished run

Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..exceptions import CheckpointError, ConfigurationError, NumericalAbort
from .config import COMPONENTS, ExperimentConfig, config_from_dict, load_config

log = logging.getLogger("promptdil")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
NO_PRESERVATION = ("distill", "pseudo")


def _csv_list(text, cast=str):
    return [cast(t.strip()) for t in text.split(",") if t.strip()]


def build_parser():
    parser = argparse.ArgumentParser(prog="promptdil", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", type=Path, help="TOML or JSON experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", type=Path, required=out_required)
        p.add_argument("--drop", type=lambda s: _csv_list(s), default=None,
                       help=f"comma-separated components to ablate: {', '.join(COMPONENTS)}")
        p.add_argument("--stages", type=int)
        p.add_argument("--severity", type=lambda s: _csv_list(s, float),
                       help="comma-separated per-stage severities (one value: all stages after the first)")

    run = sub.add_parser("run", help="run one experiment")
    common(run)
    run.add_argument("--no-plots", action="store_true")
    ablate = sub.add_parser("ablate", help="run with components removed")
    common(ablate)
    ablate.add_argument("--no-plots", action="store_true")
    drift = sub.add_parser("drift", help="measure drift between two stages")
    common(drift, out_required=False)
    drift.add_argument("--pair", type=lambda s: _csv_list(s, int), default=[1, 2],
                       help="train on stage A, measure on stage B (1-based), e.g. 1,2")
    report = sub.add_parser("report", help="re-emit metrics and plots for a run directory")
    report.add_argument("--out-dir", type=Path, required=True)
    xcomp = sub.add_parser("xcomp", help="cross-composition grid for a run directory")
    xcomp.add_argument("--out-dir", type=Path, required=True)
    return parser


def resolve_config(args):
    config = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.drop is not None:
        changes["drop"] = sorted(set(config.drop) | set(args.drop))
    if args.stages is not None:
        changes["stages"] = args.stages
    if args.severity is not None:
        changes["severity"] = args.severity
    if changes:
        data = config.to_dict()
        data.update(changes)
        config = config_from_dict(data)
    return config


def cmd_run(args):
    from .experiment import run_experiment
    from .report import write_run

    config = resolve_config(args)
    result = run_experiment(config)
    write_run(result, args.out_dir, plots=not args.no_plots)
    print(json.dumps({"avg_acc": result.avg_acc, "avg_f": result.avg_f, "out_dir": str(args.out_dir)}))
    return EXIT_OK


def cmd_ablate(args):
    if args.drop:
        return cmd_run(args)
    from .experiment import run_experiment
    from .report import write_json, write_run

    base = resolve_config(args)
    variants = {"full": []}
    variants.update({f"drop-{c}": [c] for c in COMPONENTS})
    variants["no-preservation"] = list(NO_PRESERVATION)
    table = {}
    for name, drop in variants.items():
        config = base.replace(drop=sorted(set(base.drop) | set(drop)))
        config.validate()
        result = run_experiment(config)
        write_run(result, args.out_dir / name, plots=not args.no_plots)
        table[name] = {"drop": config.drop, "avg_acc": result.avg_acc, "avg_f": result.avg_f}
        log.info("%s: AvgACC %.4f AvgF %.4f", name, result.avg_acc, result.avg_f)
    write_json(args.out_dir / "ablation.json", table)
    print(json.dumps(table, sort_keys=True))
    return EXIT_OK


def cmd_drift(args):
    from ..drift import expansion_size, should_expand
    from .estimator import PromptDILClassifier
    from .stream import generate_stream

    config = resolve_config(args)
    if len(args.pair) != 2:
        raise ConfigurationError("--pair takes two stage numbers, e.g. 1,2")
    a, b = args.pair
    if not (1 <= a <= config.stages and 1 <= b <= config.stages):
        raise ConfigurationError(f"--pair stages must lie in [1, {config.stages}]")
    stream = generate_stream(config)
    est = PromptDILClassifier(**config.estimator_params())
    train = stream[a - 1]
    est.partial_fit(train.train.X, train.train.y, classes=np.arange(config.classes),
                    X_val=train.val.X, y_val=train.val.y)
    report = est.measure_drift(stream[b - 1].train.X)
    active = len(est.network_.pool.active)
    expand = should_expand(report.mean_drift, config.theta)
    out = {
        "pair": [a, b],
        "mean_drift": report.mean_drift,
        "per_layer": report.scores.mean(axis=1).tolist(),
        "expand": expand,
        "expansion": expansion_size(active, report.mean_drift, config.d_max, config.e_min, config.e_max)
        if expand else 0,
    }
    if args.out_dir:
        from .report import write_json

        args.out_dir.mkdir(parents=True, exist_ok=True)
        write_json(args.out_dir / "drift.json", {**out, "scores": report.scores.tolist()})
    print(json.dumps(out))
    return EXIT_OK


def _load_run(out_dir):
    from .checkpoint import load_checkpoint
    from .report import read_json

    config = config_from_dict(read_json(out_dir / "config.json"))
    est = load_checkpoint(out_dir / "checkpoint.json", config.hash())
    return config, est


def cmd_report(args):
    from .report import read_json, write_metrics_csv, write_plots

    out = args.out_dir
    config, est = _load_run(out)
    trace = read_json(out / "trace.json")
    write_metrics_csv(out / "metrics.csv", est.history_)
    paths = write_plots(out, est.history_, trace["usage"], config.tau_s)
    print(json.dumps({"metrics": str(out / "metrics.csv"), "plots": [str(p) for p in paths]}))
    return EXIT_OK


def cmd_xcomp(args):
    from .crosscomp import cross_composition
    from .report import write_json
    from .stream import generate_stream

    config, est = _load_run(args.out_dir)
    stream = generate_stream(config)
    grid = cross_composition(est, [(s.test.X, s.test.y) for s in stream.stages[: est.n_stages_]])
    write_json(args.out_dir / "xcomp.json", grid.to_dict())
    print(json.dumps({"mean_accuracy": grid.mean_accuracy.tolist(), **grid.asymmetry()}))
    return EXIT_OK


COMMANDS = {"run": cmd_run, "ablate": cmd_ablate, "drift": cmd_drift, "report": cmd_report, "xcomp": cmd_xcomp}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"promptdil: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"promptdil: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, FileNotFoundError) as exc:
        print(f"promptdil: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
