"""Train the gesture model on every leave-one-subject-out fold.

Generates the stock synthetic corpus on first use (or points at an
existing dataset root via --data) and runs the two-stage curriculum on
each fold, printing per-fold held-out macro F1 and the cross-fold mean.
Checkpoints, logs, metrics, and CSV exports land under --out/<run-id>.
"""
from __future__ import annotations

import json
from argparse import ArgumentParser
from pathlib import Path

from semgx.dataset import SyntheticSpec
from semgx.encoder import ModelConfig
from semgx.experiment import DatasetSource, ExperimentConfig, run_training
from semgx.training import Stage1Config, Stage2Config, TrainConfig


def get_args():
    parser = ArgumentParser(description=__doc__)
    parser.add_argument("--run-id", default="loso")
    parser.add_argument("--out", type=Path, default=Path("runs"))
    parser.add_argument(
        "--data", type=Path, default=None,
        help="dataset root with a manifest.json; omit to generate the stock synthetic corpus",
    )
    parser.add_argument(
        "--folds", default="all",
        help='"all" or comma-separated 0-based fold indices, e.g. "0,3"',
    )
    parser.add_argument("--stage1-epochs", type=int, default=50)
    parser.add_argument("--stage2-epochs", type=int, default=20)
    parser.add_argument("--stage1-only", action="store_true",
                        help="skip the low-rate second stage")
    parser.add_argument("--seed", type=int, default=0)
    return parser.parse_args()


def main(args):
    if args.data is not None:
        dataset = DatasetSource(root=str(args.data))
    else:
        dataset = DatasetSource(root=str(args.out / "stock-corpus"),
                                synthetic=SyntheticSpec())
    if args.folds == "all":
        folds = "all"
    else:
        folds = tuple(int(tok) for tok in args.folds.split(","))
    config = ExperimentConfig(
        run_id=args.run_id,
        dataset=dataset,
        model=ModelConfig(),
        train=TrainConfig(
            stage1=Stage1Config(epochs_max=args.stage1_epochs),
            stage2=Stage2Config(epochs_max=args.stage2_epochs),
            seed=args.seed,
        ),
        output_dir=str(args.out),
        folds=folds,
        seed=args.seed,
    )
    run_dir = run_training(config, stage1_only=args.stage1_only)

    stage_key = "stage1" if args.stage1_only else "stage2"
    for metrics_path in sorted(run_dir.glob("fold*/metrics.json")):
        doc = json.loads(metrics_path.read_text())
        report = doc[stage_key]
        print(f"fold {doc['fold_index']}  subject {doc['held_out_subject']} "
              f"held out  macro F1 {report['macro_f1']:.4f}")
    agg_path = run_dir / "aggregate.json"
    if agg_path.exists():
        agg = json.loads(agg_path.read_text())
        print(f"mean macro F1 {agg['macro_mean']:.4f} "
              f"(se {agg['macro_se']:.4f}, n={len(agg['fold_macro'])})")
    print(f"artifacts: {run_dir}")


if __name__ == "__main__":
    main(get_args())
