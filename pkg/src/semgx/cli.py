"""Command-line harness for the gesture recognition experiments.

Subcommands: synth, ingest, validate, train, ablate-dt2v, ablate-variants,
adapt, profile, export. Every run command takes one JSON experiment config
(unknown keys are hard errors) and writes self-describing artifacts under
the output root, which the SEMGX_OUTPUT_ROOT environment variable can
override.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerics
error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .dataset import SyntheticSpec, generate_synthetic, ingest_csv_dataset, load_dataset
from .encoder import load_checkpoint
from .errors import ConfigError, NumericsError, SemgxError
from .evaluation import LATENCY_BUDGET_MS, profile_latency
from .experiment import (
    export_run,
    load_experiment_config,
    run_adaptation,
    run_dt2v_sweep,
    run_training,
    run_variant_ablation,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERICS = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors share the config exit code
        raise ConfigError(message)


def _load_config_with_fold_flags(args) -> "object":
    config = load_experiment_config(args.config)
    if getattr(args, "all_folds", False) and getattr(args, "fold", None) is not None:
        raise ConfigError("--fold and --all-folds are mutually exclusive")
    if getattr(args, "all_folds", False):
        config = dataclasses.replace(config, folds="all")
    elif getattr(args, "fold", None) is not None:
        config = dataclasses.replace(config, folds=tuple(args.fold))
    config.validate()
    return config


def _print_fold_metrics(run_dir: Path) -> None:
    for path in sorted(run_dir.glob("fold*/metrics.json")):
        doc = json.loads(path.read_text())
        line = f"fold {doc['fold_index']} (held-out subject {doc['held_out_subject']}):"
        for stage in ("stage1", "stage2"):
            if doc.get(stage):
                line += f" {stage} macro F1 {doc[stage]['macro_f1']:.4f}"
        print(line)


def cmd_synth(args) -> int:
    if args.spec is None:
        spec = SyntheticSpec()
    else:
        spec = SyntheticSpec.from_json(json.loads(Path(args.spec).read_text()))
    if args.seed is not None:
        spec = dataclasses.replace(spec, master_seed=args.seed)
    manifest = generate_synthetic(spec, args.out)
    print(f"wrote {manifest.n_trials} trials to {args.out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    manifest = ingest_csv_dataset(args.listing, args.out, sample_rate_hz=args.rate)
    print(f"ingested {manifest.n_trials} trials into {args.out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    config = load_experiment_config(args.config)
    manifest_path = Path(config.dataset.root) / "manifest.json"
    if manifest_path.is_file():
        manifest = load_dataset(manifest_path, validate="headers")
        print(f"config ok; dataset at {config.dataset.root} has {manifest.n_trials} trials")
    elif config.dataset.synthetic is not None:
        print(f"config ok; synthetic dataset will be generated at {config.dataset.root}")
    else:
        raise ConfigError(
            f"dataset root {config.dataset.root} has no manifest and no synthetic spec"
        )
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config_with_fold_flags(args)
    run_dir = run_training(config, stage1_only=args.stage1_only)
    _print_fold_metrics(run_dir)
    print(f"run complete: {run_dir}")
    return EXIT_OK


def cmd_ablate_dt2v(args) -> int:
    config = _load_config_with_fold_flags(args)
    run_dir = run_dt2v_sweep(config, args.dims)
    doc = json.loads((run_dir / "sweep.json").read_text())
    for row in doc["rows"]:
        print(
            f"d_t2v {row['d_t2v']:3d} (spatial {row['d_spatial']:3d}): "
            f"macro F1 {row['macro_f1_mean']:.4f} +/- {row['macro_f1_se']:.4f}"
        )
    print(f"sweep complete: {run_dir}")
    return EXIT_OK


def cmd_ablate_variants(args) -> int:
    config = load_experiment_config(args.config)
    run_dir = run_variant_ablation(config)
    doc = json.loads((run_dir / "variants.json").read_text())
    for row in doc["rows"]:
        print(
            f"{row['variant']:12s} params {row['params']:7d} "
            f"stage1 {row['stage1_macro_f1_mean']:.4f} +/- {row['stage1_macro_f1_se']:.4f} "
            f"stage2 {row['stage2_macro_f1_mean']:.4f} +/- {row['stage2_macro_f1_se']:.4f}"
        )
    for name, result in doc["wilcoxon"].items():
        if result["p"] is None:
            print(f"{name}: {result['note']}")
        else:
            print(f"{name}: W={result['w']:.1f} p={result['p']:.6f}")
    print(f"ablation complete: {run_dir}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    config = _load_config_with_fold_flags(args)
    run_dir = run_adaptation(config, args.pretrained, adapt_epochs=args.adapt_epochs)
    doc = json.loads((run_dir / "adapt_summary.json").read_text())
    for row in doc["fold_rows"]:
        print(
            f"fold {row['fold_index']} (subject {row['held_out_subject']}): "
            f"improvement {row['improvement']:+.4f}"
        )
    print(
        f"macro F1 {doc['pre_macro_f1_mean']:.4f} -> {doc['post_macro_f1_mean']:.4f} "
        f"({doc['improvement_mean']:+.4f})"
    )
    print(f"adaptation complete: {run_dir}")
    return EXIT_OK


def cmd_profile(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise SemgxError(f"checkpoint not found: {ckpt}")
    params, config, meta = load_checkpoint(ckpt)
    stats = profile_latency(params, config, n_runs=args.runs)
    within = stats["mean_ms"] < LATENCY_BUDGET_MS
    doc = {
        **stats,
        "budget_ms": LATENCY_BUDGET_MS,
        "within_budget": within,
        "checkpoint": str(ckpt),
        "config": config.to_json(),
    }
    out = Path(args.out) if args.out else ckpt.with_suffix(".latency.json")
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(
        f"single-window forward: mean {stats['mean_ms']:.2f} ms, "
        f"p50 {stats['p50_ms']:.2f} ms, p95 {stats['p95_ms']:.2f} ms over {args.runs} runs"
    )
    verdict = "within" if within else "OVER"
    print(f"{verdict} the {LATENCY_BUDGET_MS:.0f} ms budget "
          f"(reference measurement: {stats['reference_mean_ms']} ms)")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_export(args) -> int:
    written = export_run(args.run_dir)
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def _dims(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"--dims wants comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="semgx", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", default=None, help="JSON spec file (defaults to the stock corpus)")
    p.add_argument("--out", required=True, help="output directory (must be empty or absent)")
    p.add_argument("--seed", type=int, default=None, help="override the master seed in --spec")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="convert a CSV listing into the binary layout")
    p.add_argument("--listing", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rate", type=int, default=None, help="sample rate override (Hz)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("validate", help="check an experiment config and its dataset")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("train", help="two-stage training on the selected folds")
    p.add_argument("--config", required=True)
    p.add_argument("--fold", type=int, action="append", help="fold index (repeatable)")
    p.add_argument("--all-folds", action="store_true")
    p.add_argument("--stage1-only", action="store_true", help="stop after stage 1")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate-dt2v", help="temporal embedding width sweep (concat fusion)")
    p.add_argument("--config", required=True)
    p.add_argument("--dims", type=_dims, required=True, help="comma-separated widths")
    p.add_argument("--fold", type=int, action="append")
    p.add_argument("--all-folds", action="store_true")
    p.set_defaults(func=cmd_ablate_dt2v)

    p = sub.add_parser("ablate-variants", help="three-variant comparison with paired stats")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_ablate_variants)

    p = sub.add_parser("adapt", help="fine-tune pretrained folds on held-out subjects")
    p.add_argument("--config", required=True)
    p.add_argument("--pretrained", required=True, help="run directory with stage2 checkpoints")
    p.add_argument("--adapt-epochs", type=int, default=None)
    p.add_argument("--fold", type=int, action="append")
    p.add_argument("--all-folds", action="store_true")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("profile", help="single-window latency of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--runs", type=int, default=50)
    p.add_argument("--out", default=None, help="JSON report path")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("export", help="flatten a run directory into plot-ready CSVs")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_export)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericsError as exc:
        print(f"numerics error: {exc}", file=sys.stderr)
        return EXIT_NUMERICS
    except SemgxError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
