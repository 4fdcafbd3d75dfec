"""Fine-tune pretrained fold checkpoints on each held-out subject.

Takes a training run directory produced by run_loso_training.py and a
dataset root (typically a distribution-shifted variant of the training
corpus), calibrates on the held-out subject's first trials, and prints
pre/post macro F1 per fold.
"""
from __future__ import annotations

import json
from argparse import ArgumentParser
from pathlib import Path

from semgx.encoder import ModelConfig
from semgx.experiment import DatasetSource, ExperimentConfig, run_adaptation
from semgx.training import TrainConfig


def get_args():
    parser = ArgumentParser(description=__doc__)
    parser.add_argument("pretrained", type=Path, help="run directory with fold*/stage2.ckpt")
    parser.add_argument("data", type=Path, help="dataset root to adapt on")
    parser.add_argument("--out", type=Path, default=Path("runs"))
    parser.add_argument("--run-id", default="adapt")
    parser.add_argument("--adapt-epochs", type=int, default=None,
                        help="override the checkpoint's adaptation epoch budget")
    parser.add_argument("--seed", type=int, default=0)
    return parser.parse_args()


def main(args):
    config = ExperimentConfig(
        run_id=args.run_id,
        dataset=DatasetSource(root=str(args.data)),
        model=ModelConfig(),
        train=TrainConfig(),
        output_dir=str(args.out),
        folds="all",
        seed=args.seed,
    )
    run_dir = run_adaptation(config, args.pretrained, adapt_epochs=args.adapt_epochs)
    summary = json.loads((run_dir / "adapt_summary.json").read_text())
    for row in summary["fold_rows"]:
        fold_doc = json.loads((run_dir / f"fold{row['fold_index']}" / "adapt.json").read_text())
        print(f"fold {row['fold_index']}  subject {row['held_out_subject']}  "
              f"pre {fold_doc['pre']['macro_f1']:.4f}  "
              f"post {fold_doc['post']['macro_f1']:.4f}  "
              f"improvement {row['improvement']:+.4f}")
    print(f"mean pre {summary['pre_macro_f1_mean']:.4f}  "
          f"mean post {summary['post_macro_f1_mean']:.4f}  "
          f"mean improvement {summary['improvement_mean']:+.4f}")
    print(f"artifacts: {run_dir}")


if __name__ == "__main__":
    main(get_args())
