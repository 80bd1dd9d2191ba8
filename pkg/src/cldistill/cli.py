"""Command-line entry point.

Verbs: run, grid, ablate, eval, plotdata, synth.
Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from .data import make_blobs, save_dataset_csv
from .errors import CldistillError, ConfigError
from .evaluate import evaluate_split
from .harness import (
    ExperimentConfig,
    RunRecord,
    build_dataset,
    build_sequence,
    emit_plot_data,
    format_lambda_grid,
    format_summary_table,
    mask_label,
    run_component_ablation,
    run_experiment,
    run_lambda_grid,
    summarize,
)
from .models import load_checkpoint


def _add_common(parser):
    parser.add_argument("--config", required=True, help="experiment YAML")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config's seed list")
    parser.add_argument("--out", default=None, help="override output dir")
    parser.add_argument("--deterministic", action="store_true",
                        help="single-threaded bitwise-reproducible mode")
    parser.add_argument("--overwrite", action="store_true",
                        help="redo completed runs instead of skipping")


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.from_yaml(args.config)
    if args.seed is not None:
        config = replace(config, seeds=(args.seed,))
    if args.out is not None:
        config = replace(config, out_dir=args.out)
    if args.deterministic:
        config = replace(config, train=replace(config.train,
                                               deterministic=True))
    return config


def cmd_run(args) -> int:
    config = _load_config(args)
    records = run_experiment(config, overwrite=args.overwrite)
    summary = {config.name: summarize(records, k=min(config.eval_ks))}
    print(format_summary_table(summary, k=min(config.eval_ks)), end="")
    base = os.path.join(config.out_dir, config.name)
    emit_plot_data({config.name: records},
                   os.path.join(base, "curves.tsv"), k=min(config.eval_ks))
    return 0


def cmd_grid(args) -> int:
    config = _load_config(args)
    values = [float(v) for v in args.lambdas.split(",")]
    grid = run_lambda_grid(config, values, overwrite=args.overwrite)
    table = format_lambda_grid(grid, k=min(config.eval_ks))
    print(table, end="")
    base = os.path.join(config.out_dir, config.name)
    os.makedirs(base, exist_ok=True)
    with open(os.path.join(base, "lambda_grid.txt"), "w") as fh:
        fh.write(table)
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args)
    masks = [set(m.split("+")) for m in args.masks.split(";")]
    results = run_component_ablation(config, masks, overwrite=args.overwrite)
    k = min(config.eval_ks)
    summary = {label: summarize(records, k)
               for label, records in results.items()}
    print(format_summary_table(summary, k), end="")
    base = os.path.join(config.out_dir, config.name)
    os.makedirs(base, exist_ok=True)
    emit_plot_data(results, os.path.join(base, "ablation_curves.tsv"), k=k)
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    config = _load_config(args)
    dataset = build_dataset(config.dataset)
    seq = build_sequence(dataset, config, config.seeds[0])
    for i, task in enumerate(seq.tasks):
        recalls = evaluate_split(model, task.test, config.eval_ks)
        for k in sorted(recalls):
            print(f"task {i + 1} Recall@{k}: {recalls[k]:.4f}")
    return 0


def cmd_plotdata(args) -> int:
    records = {}
    for path in args.records:
        record = RunRecord.load(path)
        records.setdefault(record.label, []).append(record)
    emit_plot_data(records, args.out, k=args.k)
    print(args.out)
    return 0


def cmd_synth(args) -> int:
    dataset = make_blobs(
        num_classes=args.classes, dim=args.dim, per_class=args.per_class,
        spread=args.spread, seed=args.seed, name=args.name,
    )
    save_dataset_csv(dataset, args.out)
    print(os.path.join(args.out, "manifest.txt"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cldistill",
        description="Continual representation learning experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment config")
    _add_common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("grid", help="sweep the stability loss weights")
    _add_common(p)
    p.add_argument("--lambdas", default="0.1,1,10",
                   help="comma-separated grid values")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("ablate", help="loss-component ablation")
    _add_common(p)
    p.add_argument("--masks", default="ce;ce+triplet;ce+csd;ce+triplet+kd+csd",
                   help="semicolon-separated component masks")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plotdata", help="emit curve data + figure from records")
    p.add_argument("--records", nargs="+", required=True,
                   help="record.json files")
    p.add_argument("--out", required=True, help="output .tsv path")
    p.add_argument("--k", type=int, default=1)
    p.set_defaults(func=cmd_plotdata)

    p = sub.add_parser("synth", help="generate a synthetic blob dataset")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--spread", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="blobs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except CldistillError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
