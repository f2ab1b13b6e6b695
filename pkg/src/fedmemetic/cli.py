"""Command-line entry point: ``python -m fedmemetic <subcommand>``.

Subcommands::

    gen-data   write a synthetic dataset as class directories of PGM/PPM files
    run-mao    data preparation plus the memetic architecture search
    run-fed    the full pipeline (the search runs too when the config has one)
    evaluate   score a checkpoint on a dataset directory
    ablate     with vs without deep block under identical data and seeds

Exit status is 0 on success, 2 for an invalid config or arguments and 1 when
a pipeline stage fails; errors go to stderr prefixed with the stage name.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import metrics
from .checkpoint import CheckpointError, load_checkpoint
from .data import DatasetError, SplitSpec, generate_synthetic_dataset, load_dataset, save_dataset, split_dataset
from .experiment import (
    ConfigError,
    ExperimentConfig,
    StageError,
    evaluate_model,
    load_config,
    per_class_csv,
    run_ablation,
    run_experiment,
    run_search_only,
)
from .pnm import ImageFormatError

__all__ = ["build_parser", "main"]


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set {item!r}: expected key.path=value")
        try:
            overrides[key] = json.loads(value)
        except json.JSONDecodeError:
            overrides[key] = value          # bare strings need no quotes
    return cfg.with_overrides(overrides) if overrides else cfg


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; omitted sections take their defaults")
    p.add_argument("--set", action="append", metavar="PATH=VALUE",
                   help="override one field, e.g. --set federated.rounds=5 (repeatable)")
    p.add_argument("--out", help="output directory (default: the config's output_dir)")


def cmd_gen_data(args) -> int:
    ds = generate_synthetic_dataset(args.classes, args.per_class, args.height, args.width,
                                    args.seed, args.channels, args.noise)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} images in {ds.n_classes} classes to {args.out}")
    return 0


def cmd_run_mao(args) -> int:
    cfg = _config(args)
    if cfg.search is None:
        cfg = cfg.with_overrides({"search": {}})
    res = run_search_only(cfg, args.out)
    print(json.dumps({"best_fitness": res.best.fitness, "chromosome": res.best.chromosome.as_dict()},
                     sort_keys=True))
    return 0


def cmd_run_fed(args) -> int:
    res = run_experiment(_config(args), args.out, search=not args.no_search)
    print(metrics.rows_to_csv([res.report.summary_row(res.spec.backbone_id)]), end="")
    print(f"artifacts in {res.out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    stage = "load"
    try:
        model = load_checkpoint(args.checkpoint)
        h, w, _ = model.spec.input_shape
        ds = load_dataset(args.data, h, w)
        if args.split != "all":
            parts = dict(zip(("train", "val", "test"),
                             split_dataset(ds, SplitSpec(tuple(args.fractions), args.split_seed))))
            ds = parts[args.split]
        if ds.n_classes != model.spec.class_count:
            raise DatasetError(f"dataset has {ds.n_classes} classes, checkpoint expects {model.spec.class_count}")
        stage = "evaluate"
        report = evaluate_model(model, ds)
    except (CheckpointError, DatasetError, ImageFormatError, ValueError, OSError) as exc:
        raise StageError(stage, exc) from exc
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(report.to_json())
        (out / "metrics.csv").write_text(metrics.rows_to_csv([report.summary_row(model.spec.backbone_id)]))
        (out / "per_class.csv").write_text(per_class_csv(report))
    print(report.to_json(), end="")
    return 0


def cmd_ablate(args) -> int:
    rep = run_ablation(_config(args), args.out)
    print(rep.comparison_csv(), end="")
    print(f"accuracy gain with deep block: {rep.accuracy_gain:+.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedmemetic",
                                     description="Federated training with memetic architecture search.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", type=int, default=150)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--channels", type=int, choices=(1, 3), default=1)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("run-mao", help="architecture search only")
    _add_config_args(p)
    p.set_defaults(func=cmd_run_mao)

    p = sub.add_parser("run-fed", help="full pipeline: data, optional search, federated training, evaluation")
    _add_config_args(p)
    p.add_argument("--no-search", action="store_true", help="skip the search even if configured")
    p.set_defaults(func=cmd_run_fed)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="root/<class>/*.pgm|*.ppm")
    p.add_argument("--split", choices=("all", "train", "val", "test"), default="all",
                   help="score only this split of the directory (default: every image)")
    p.add_argument("--split-seed", type=int, default=42)
    p.add_argument("--fractions", type=float, nargs=3, default=(0.7, 0.1, 0.2))
    p.add_argument("--out", help="also write metrics files here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="with vs without deep block")
    _add_config_args(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"fedmemetic: config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"fedmemetic: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, ImageFormatError, OSError) as exc:
        print(f"fedmemetic: stage {args.command!r} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
