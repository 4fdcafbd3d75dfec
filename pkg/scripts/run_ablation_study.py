"""Compare temporal-embedding variants and sweep the temporal width.

Runs the three encoder variants (learned time embedding, fixed sinusoidal
positions, no positions) across all folds with paired seeds, reports the
signed-rank comparison, then optionally sweeps the temporal embedding
width at a fixed token budget. Expects an existing dataset root.
"""
from __future__ import annotations

import dataclasses
import json
from argparse import ArgumentParser
from pathlib import Path

from semgx.encoder import ModelConfig
from semgx.experiment import (
    DatasetSource,
    ExperimentConfig,
    run_dt2v_sweep,
    run_variant_ablation,
)
from semgx.training import Stage1Config, Stage2Config, TrainConfig


def get_args():
    parser = ArgumentParser(description=__doc__)
    parser.add_argument("data", type=Path, help="dataset root with a manifest.json")
    parser.add_argument("--out", type=Path, default=Path("runs"))
    parser.add_argument("--run-id", default="ablation")
    parser.add_argument("--stage1-epochs", type=int, default=50)
    parser.add_argument("--stage2-epochs", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument(
        "--sweep-dims", default=None,
        help="comma-separated temporal widths to sweep after the ablation, e.g. 32,64,96",
    )
    return parser.parse_args()


def main(args):
    base = ExperimentConfig(
        run_id=args.run_id,
        dataset=DatasetSource(root=str(args.data)),
        model=ModelConfig(),
        train=TrainConfig(
            stage1=Stage1Config(epochs_max=args.stage1_epochs),
            stage2=Stage2Config(epochs_max=args.stage2_epochs),
            seed=args.seed,
        ),
        output_dir=str(args.out),
        folds="all",
        seed=args.seed,
    )
    run_dir = run_variant_ablation(base)
    doc = json.loads((run_dir / "variants.json").read_text())
    for row in doc["rows"]:
        print(f"{row['variant']:<12} params {row['params']:>7}  "
              f"macro F1 {row['stage2_macro_f1_mean']:.4f} "
              f"+/- {row['stage2_macro_f1_se']:.4f}")
    for name, comp in doc["wilcoxon"].items():
        if comp["p"] is None:
            print(f"{name}: {comp['note']}")
        else:
            print(f"{name}: W={comp['w']:.1f} p={comp['p']:.6f}")
    print(f"ablation artifacts: {run_dir}")

    if args.sweep_dims is not None:
        dims = [int(tok) for tok in args.sweep_dims.split(",")]
        sweep_config = dataclasses.replace(base, run_id=f"{args.run_id}-sweep")
        sweep_dir = run_dt2v_sweep(sweep_config, dims)
        sweep = json.loads((sweep_dir / "sweep.json").read_text())
        for row in sweep["rows"]:
            print(f"d_t2v {row['d_t2v']:>3}  macro F1 {row['macro_f1_mean']:.4f} "
                  f"+/- {row['macro_f1_se']:.4f}")
        print(f"sweep artifacts: {sweep_dir}")


if __name__ == "__main__":
    main(get_args())
