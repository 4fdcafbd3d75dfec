"""Experiment orchestration: run directories, sweeps, ablations, export.

A run is described by one JSON document (see `ExperimentConfig.from_json`)
and lands in `{output_root}/{run_id}/`, with one `fold{k}/` directory per
leave-one-subject-out fold. Every artifact embeds the effective config and
the derived seeds, so any fold can be reproduced in isolation.

Randomness discipline: the experiment seed fans out through named streams
per fold ("init", "train"), and those derived seeds are shared across the
arms of a sweep or ablation. Two model variants trained on fold k therefore
see bit-identical window sets, augmentation draws, and shared initial
tensors; whatever differs in the outcome is attributable to the
architecture, not the dice. The synthetic dataset's own seed lives in its
spec document, so regenerating a corpus never depends on which experiment
is about to consume it.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import DatasetManifest, SyntheticSpec, generate_synthetic, load_dataset
from .encoder import (
    FusionMode,
    ModelConfig,
    Variant,
    build_variant,
    load_checkpoint,
    save_checkpoint,
)
from .errors import ConfigError, EvalError, DegenerateError, ManifestError
from .evaluation import (
    REFERENCE_ADAPTATION,
    aggregate_folds,
    count_params,
    evaluate,
    interference_probe,
    wilcoxon_signed_rank,
)
from .seeding import derive_rng
from .training import TrainConfig, fine_tune_adapt, train_stage
from .windowing import Role, materialize_split, plan_folds

OUTPUT_ROOT_ENV = "SEMGX_OUTPUT_ROOT"

VARIANT_ROWS = (
    ("nope", Variant.NOPE, FusionMode.NONE),
    ("standard_pe", Variant.STANDARD_PE, FusionMode.SINUSOIDAL_ADD),
    ("time2vec", Variant.TIME2VEC, FusionMode.NORM_ADD),
)


@dataclass(frozen=True)
class DatasetSource:
    """Where trials come from: an existing manifest, or a spec to realize.

    `root` always points at the dataset directory. When `synthetic` is set
    and the directory has no manifest yet, the corpus is generated there
    first; an existing manifest is simply loaded (generation is
    byte-deterministic, so the two paths agree).
    """

    root: str
    synthetic: SyntheticSpec | None = None

    def to_json(self) -> dict:
        doc: dict = {"root": self.root}
        if self.synthetic is not None:
            doc["synthetic"] = self.synthetic.to_json()
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "DatasetSource":
        unknown = set(doc) - {"root", "synthetic"}
        if unknown:
            raise ConfigError(f"unknown dataset source keys: {sorted(unknown)}")
        if "root" not in doc:
            raise ConfigError("dataset source needs a root directory")
        synthetic = None
        if "synthetic" in doc:
            synthetic = SyntheticSpec.from_json(doc["synthetic"])
        return cls(root=str(doc["root"]), synthetic=synthetic)

    def resolve(self, validate: str = "headers") -> DatasetManifest:
        manifest_path = Path(self.root) / "manifest.json"
        if manifest_path.is_file():
            return load_dataset(manifest_path, validate=validate)
        if self.synthetic is None:
            raise ManifestError(
                f"no manifest at {manifest_path} and no synthetic spec to generate one"
            )
        return generate_synthetic(self.synthetic, self.root)


@dataclass(frozen=True)
class ExperimentConfig:
    run_id: str
    dataset: DatasetSource
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    output_dir: str = "runs"
    folds: tuple[int, ...] | str = "all"  # fold indices, or "all"
    seed: int = 0
    export_formats: tuple[str, ...] = ("csv",)

    def validate(self) -> None:
        if not self.run_id or "/" in self.run_id or self.run_id.startswith("."):
            raise ConfigError(f"run_id must be a plain directory name, got {self.run_id!r}")
        if isinstance(self.folds, str):
            if self.folds != "all":
                raise ConfigError(f'folds must be "all" or a list of indices, got {self.folds!r}')
        else:
            if len(self.folds) == 0:
                raise ConfigError("folds list must not be empty")
            if any(k < 0 for k in self.folds):
                raise ConfigError("fold indices are 0-based and non-negative")
            if len(set(self.folds)) != len(self.folds):
                raise ConfigError("fold indices must be unique")
        bad = set(self.export_formats) - {"csv", "json"}
        if bad:
            raise ConfigError(f"unsupported export formats: {sorted(bad)}")
        self.model.validate()
        self.train.validate()

    def to_json(self) -> dict:
        return {
            "run_id": self.run_id,
            "dataset": self.dataset.to_json(),
            "model": self.model.to_json(),
            "train": self.train.to_json(),
            "output_dir": self.output_dir,
            "folds": "all" if self.folds == "all" else list(self.folds),
            "seed": self.seed,
            "export_formats": list(self.export_formats),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ExperimentConfig":
        known = {
            "run_id", "dataset", "model", "train",
            "output_dir", "folds", "seed", "export_formats",
        }
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        for required in ("run_id", "dataset"):
            if required not in doc:
                raise ConfigError(f"experiment config is missing {required!r}")
        folds = doc.get("folds", "all")
        if not isinstance(folds, str):
            folds = tuple(int(k) for k in folds)
        config = cls(
            run_id=str(doc["run_id"]),
            dataset=DatasetSource.from_json(doc["dataset"]),
            model=ModelConfig.from_json(doc.get("model", {})),
            train=TrainConfig.from_json(doc.get("train", {})),
            output_dir=str(doc.get("output_dir", "runs")),
            folds=folds,
            seed=int(doc.get("seed", 0)),
            export_formats=tuple(doc.get("export_formats", ["csv"])),
        )
        config.validate()
        return config


def load_experiment_config(path: Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config must be a JSON object: {path}")
    return ExperimentConfig.from_json(doc)


def output_root(config: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, config.output_dir))


def _derived_seed(master: int, *labels) -> int:
    return int(derive_rng(master, *labels).integers(0, 2**63))


def _fold_indices(config: ExperimentConfig, n_folds: int) -> list[int]:
    if config.folds == "all":
        return list(range(n_folds))
    bad = [k for k in config.folds if k >= n_folds]
    if bad:
        raise ConfigError(f"fold indices {bad} out of range; dataset has {n_folds} folds")
    return list(config.folds)


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _new_run_dir(config: ExperimentConfig) -> Path:
    run_dir = output_root(config) / config.run_id
    if run_dir.exists():
        raise ConfigError(
            f"run_id {config.run_id!r} already used under {run_dir.parent} "
            "(pick a fresh run_id; runs are never overwritten)"
        )
    run_dir.mkdir(parents=True)
    return run_dir


# ---------------------------------------------------------------------------
# Single-fold training
# ---------------------------------------------------------------------------

def _train_one_fold(
    manifest: DatasetManifest,
    fold,
    fold_index: int,
    model: ModelConfig,
    train: TrainConfig,
    master_seed: int,
    fold_dir: Path,
    stage1_only: bool,
    run_id: str,
    config_echo: dict,
) -> dict:
    seed_init = _derived_seed(master_seed, "init", fold_index)
    seed_train = _derived_seed(master_seed, "train", fold_index)
    tc = dataclasses.replace(train, seed=seed_train)
    window = model.window_samples
    stride = window // 2
    test_windows = materialize_split(manifest, fold, Role.MS_TEST, window, stride)
    meta = {
        "run_id": run_id,
        "fold_index": fold_index,
        "held_out_subject": fold.held_out_subject,
        "trained_on_subjects": list(fold.source_subjects),
    }

    t0 = time.perf_counter()
    params = build_variant(model, seed=seed_init)
    p1, log1 = train_stage(1, manifest, fold, params, model, tc)
    t1 = time.perf_counter()
    report1 = evaluate(p1, model, test_windows, fold_index=fold_index)
    save_checkpoint(fold_dir / "stage1.ckpt", p1, model, seed=seed_init,
                    meta={**meta, "stage": 1})

    report2 = None
    log2 = None
    t2 = t1
    if not stage1_only:
        p2, log2 = train_stage(2, manifest, fold, p1, model, tc)
        t2 = time.perf_counter()
        report2 = evaluate(p2, model, test_windows, fold_index=fold_index)
        save_checkpoint(fold_dir / "stage2.ckpt", p2, model, seed=seed_init,
                        meta={**meta, "stage": 2})
        if model.fusion in (FusionMode.ADD, FusionMode.NORM_ADD):
            probe = interference_probe(p2, model, test_windows)
            _write_json(fold_dir / "interference.json", {
                **probe.to_json(),
                "fold_index": fold_index,
                "config": config_echo,
                "seeds": {"init": seed_init, "train": seed_train},
            })

    with open(fold_dir / "train_log.jsonl", "w") as fh:
        fh.write(log1.to_jsonl())
        if log2 is not None:
            fh.write(log2.to_jsonl())

    doc = {
        "run_id": run_id,
        "fold_index": fold_index,
        "held_out_subject": fold.held_out_subject,
        "config": config_echo,
        "seeds": {"init": seed_init, "train": seed_train},
        "stage1": report1.to_json(),
        "stage2": None if report2 is None else report2.to_json(),
        "timing": {
            "stage1_s": t1 - t0,
            "stage2_s": None if stage1_only else t2 - t1,
            "total_s": time.perf_counter() - t0,
        },
    }
    _write_json(fold_dir / "metrics.json", doc)
    return doc


def run_training(config: ExperimentConfig, stage1_only: bool = False) -> Path:
    """Train the configured model on the selected folds; returns the run dir."""
    config.validate()
    manifest = config.dataset.resolve()
    folds = plan_folds(manifest)
    indices = _fold_indices(config, len(folds))
    run_dir = _new_run_dir(config)
    echo = config.to_json()
    _write_json(run_dir / "config.json", echo)

    fold_docs = []
    for k in indices:
        doc = _train_one_fold(
            manifest, folds[k], k, config.model, config.train, config.seed,
            run_dir / f"fold{k}", stage1_only, config.run_id, echo,
        )
        fold_docs.append(doc)

    if len(fold_docs) >= 2:
        stage_key = "stage1" if stage1_only else "stage2"
        reports = [_report_from_json(d[stage_key]) for d in fold_docs]
        agg = aggregate_folds(reports)
        _write_json(run_dir / "aggregate.json", {
            "run_id": config.run_id,
            "stage": stage_key,
            "config": echo,
            **agg.to_json(),
        })
    if "csv" in config.export_formats:
        export_run(run_dir)
    return run_dir


def _report_from_json(doc: dict):
    # Re-hydrate just enough of a report for aggregation.
    from .evaluation import MetricsReport

    return MetricsReport(
        confusion=np.asarray(doc["confusion"], dtype=np.int64),
        per_class_f1=np.asarray(doc["per_class_f1"], dtype=np.float64),
        macro_f1=float(doc["macro_f1"]),
        n_windows=int(doc["n_windows"]),
        fold_index=doc.get("fold_index"),
        variant=doc["variant"],
        fusion=doc["fusion"],
        undefined_classes=tuple(doc.get("undefined_classes", ())),
    )


# ---------------------------------------------------------------------------
# Embedding-width sweep
# ---------------------------------------------------------------------------

def run_dt2v_sweep(config: ExperimentConfig, dims: list[int]) -> Path:
    """Train one model per temporal width, spatial width taking the rest."""
    config.validate()
    if config.model.fusion is not FusionMode.CONCAT:
        raise ConfigError(
            f"the width sweep splits a fixed token budget, which needs concat "
            f"fusion; config says {config.model.fusion.value}"
        )
    if not dims:
        raise ConfigError("the sweep needs at least one width")
    if len(set(dims)) != len(dims):
        raise ConfigError("sweep widths must be unique")
    for d in dims:
        if not (0 < d < config.model.d_model):
            raise ConfigError(
                f"temporal width must lie strictly inside (0, {config.model.d_model}); got {d}"
            )

    manifest = config.dataset.resolve()
    folds = plan_folds(manifest)
    indices = _fold_indices(config, len(folds))
    run_dir = _new_run_dir(config)
    echo = config.to_json()
    _write_json(run_dir / "config.json", echo)

    rows = []
    for d in sorted(dims):
        model_d = dataclasses.replace(config.model, d_t2v=d)
        fold_docs = []
        for k in indices:
            doc = _train_one_fold(
                manifest, folds[k], k, model_d, config.train, config.seed,
                run_dir / f"dt2v_{d:03d}" / f"fold{k}", False, config.run_id,
                {**echo, "model": model_d.to_json()},
            )
            fold_docs.append(doc)
        macros = [d_["stage2"]["macro_f1"] for d_ in fold_docs]
        if len(macros) >= 2:
            agg = aggregate_folds([_report_from_json(d_["stage2"]) for d_ in fold_docs])
            mean, se = agg.macro_mean, agg.macro_se
        else:
            mean, se = float(macros[0]), 0.0
        rows.append({
            "d_t2v": d,
            "d_spatial": model_d.d_spatial,
            "macro_f1_mean": mean,
            "macro_f1_se": se,
            "fold_macro_f1": macros,
        })

    _write_json(run_dir / "sweep.json", {
        "run_id": config.run_id,
        "config": echo,
        "rows": rows,
    })
    if "csv" in config.export_formats:
        export_run(run_dir)
    return run_dir


# ---------------------------------------------------------------------------
# Variant ablation
# ---------------------------------------------------------------------------

def run_variant_ablation(config: ExperimentConfig) -> Path:
    """Train the three encoder variants with shared per-fold seeds and splits.

    Requires all-folds mode: the paired signed-rank comparison needs one
    score per fold per variant.
    """
    config.validate()
    if config.folds != "all":
        raise ConfigError(
            "the variant comparison is paired across all folds; set folds to \"all\""
        )
    manifest = config.dataset.resolve()
    folds = plan_folds(manifest)
    indices = _fold_indices(config, len(folds))
    run_dir = _new_run_dir(config)
    echo = config.to_json()
    _write_json(run_dir / "config.json", echo)

    table: dict[str, dict] = {}
    for label, variant, fusion in VARIANT_ROWS:
        model_v = dataclasses.replace(config.model, variant=variant, fusion=fusion)
        model_v.validate()
        fold_docs = []
        for k in indices:
            doc = _train_one_fold(
                manifest, folds[k], k, model_v, config.train, config.seed,
                run_dir / label / f"fold{k}", False, config.run_id,
                {**echo, "model": model_v.to_json()},
            )
            fold_docs.append(doc)
        row: dict = {
            "variant": label,
            "params": count_params(build_variant(model_v, seed=0))["total"],
            "fold_macro_f1_stage1": [d["stage1"]["macro_f1"] for d in fold_docs],
            "fold_macro_f1_stage2": [d["stage2"]["macro_f1"] for d in fold_docs],
        }
        for stage in ("stage1", "stage2"):
            reports = [_report_from_json(d[stage]) for d in fold_docs]
            if len(reports) >= 2:
                agg = aggregate_folds(reports)
                row[f"{stage}_macro_f1_mean"] = agg.macro_mean
                row[f"{stage}_macro_f1_se"] = agg.macro_se
            else:
                row[f"{stage}_macro_f1_mean"] = reports[0].macro_f1
                row[f"{stage}_macro_f1_se"] = 0.0
        table[label] = row

    comparisons = {}
    reference = np.asarray(table["time2vec"]["fold_macro_f1_stage2"], dtype=np.float64)
    for other in ("standard_pe", "nope"):
        scores = np.asarray(table[other]["fold_macro_f1_stage2"], dtype=np.float64)
        try:
            w, p = wilcoxon_signed_rank(reference, scores)
            comparisons[f"time2vec_vs_{other}"] = {"w": w, "p": p}
        except (DegenerateError, EvalError) as exc:
            comparisons[f"time2vec_vs_{other}"] = {"w": None, "p": None, "note": str(exc)}

    _write_json(run_dir / "variants.json", {
        "run_id": config.run_id,
        "config": echo,
        "rows": [table[label] for label, _, _ in VARIANT_ROWS],
        "wilcoxon": comparisons,
    })
    if "csv" in config.export_formats:
        export_run(run_dir)
    return run_dir


# ---------------------------------------------------------------------------
# Adaptation study
# ---------------------------------------------------------------------------

def run_adaptation(
    config: ExperimentConfig,
    pretrained_run_dir: Path,
    adapt_epochs: int | None = None,
) -> Path:
    """Fine-tune pretrained fold checkpoints on each held-out subject."""
    config.validate()
    pretrained_run_dir = Path(pretrained_run_dir)
    manifest = config.dataset.resolve()
    folds = plan_folds(manifest)
    indices = _fold_indices(config, len(folds))
    run_dir = _new_run_dir(config)
    echo = config.to_json()
    _write_json(run_dir / "config.json", echo)

    train = config.train
    if adapt_epochs is not None:
        train = dataclasses.replace(
            train, adapt=dataclasses.replace(train.adapt, epochs_max=adapt_epochs)
        )

    fold_rows = []
    for k in indices:
        ckpt_path = pretrained_run_dir / f"fold{k}" / "stage2.ckpt"
        if not ckpt_path.is_file():
            raise ManifestError(f"no stage-2 checkpoint for fold {k}: {ckpt_path}")
        params, ckpt_config, meta = load_checkpoint(ckpt_path)
        if ckpt_config != config.model:
            raise ConfigError(
                f"checkpoint {ckpt_path} was built for a different model config"
            )
        trained_on = [int(s) for s in meta.get("trained_on_subjects", [])]
        if not trained_on:
            raise ManifestError(
                f"checkpoint {ckpt_path} does not record its training subjects"
            )
        seed_adapt = _derived_seed(config.seed, "adapt", k)
        tc = dataclasses.replace(train, seed=seed_adapt)
        result = fine_tune_adapt(
            manifest, folds[k], params, config.model, tc, trained_on
        )
        save_checkpoint(
            run_dir / f"fold{k}" / "adapted.ckpt", result.params, config.model,
            seed=meta.get("seed"),
            meta={
                "run_id": config.run_id, "fold_index": k, "stage": "adapted",
                "held_out_subject": folds[k].held_out_subject,
                "trained_on_subjects": trained_on,
            },
        )
        with open(run_dir / f"fold{k}" / "train_log.jsonl", "w") as fh:
            fh.write(result.log.to_jsonl())
        row = {
            "fold_index": k,
            "held_out_subject": folds[k].held_out_subject,
            "pre": result.pre_report.to_json(),
            "post": result.post_report.to_json(),
            "improvement": result.post_report.macro_f1 - result.pre_report.macro_f1,
            "config": echo,
            "seeds": {"adapt": seed_adapt},
            "reference": dict(REFERENCE_ADAPTATION),
        }
        _write_json(run_dir / f"fold{k}" / "adapt.json", row)
        fold_rows.append(row)

    pre = [r["pre"]["macro_f1"] for r in fold_rows]
    post = [r["post"]["macro_f1"] for r in fold_rows]
    _write_json(run_dir / "adapt_summary.json", {
        "run_id": config.run_id,
        "config": echo,
        "pre_macro_f1_mean": float(np.mean(pre)),
        "post_macro_f1_mean": float(np.mean(post)),
        "improvement_mean": float(np.mean(post) - np.mean(pre)),
        "fold_rows": [
            {k: r[k] for k in ("fold_index", "held_out_subject", "improvement")}
            for r in fold_rows
        ],
        "reference": dict(REFERENCE_ADAPTATION),
    })
    if "csv" in config.export_formats:
        export_run(run_dir)
    return run_dir


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def export_run(run_dir: Path) -> list[Path]:
    """Flatten a run directory's JSON artifacts into plot-ready CSVs.

    Emits whichever of sweep.csv, variants.csv, interference_hist.csv,
    adapt.csv, and folds.csv have source material; deterministic content,
    so re-export reproduces identical bytes.
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ManifestError(f"run directory not found: {run_dir}")
    written: list[Path] = []

    sweeps = sorted(run_dir.rglob("sweep.json"))
    if sweeps:
        rows = []
        for path in sweeps:
            doc = json.loads(path.read_text())
            for row in doc["rows"]:
                rows.append([row["d_t2v"], row["macro_f1_mean"], row["macro_f1_se"]])
        rows.sort(key=lambda r: r[0])
        out = run_dir / "sweep.csv"
        _write_csv(out, ["d_t2v", "macro_f1_mean", "macro_f1_se"], rows)
        written.append(out)

    variants = sorted(run_dir.rglob("variants.json"))
    if variants:
        rows = []
        for path in variants:
            doc = json.loads(path.read_text())
            for row in doc["rows"]:
                rows.append([
                    row["variant"], row["params"],
                    row["stage1_macro_f1_mean"], row["stage1_macro_f1_se"],
                    row["stage2_macro_f1_mean"], row["stage2_macro_f1_se"],
                ])
        out = run_dir / "variants.csv"
        _write_csv(
            out,
            ["variant", "params", "stage1_macro_f1_mean", "stage1_macro_f1_se",
             "stage2_macro_f1_mean", "stage2_macro_f1_se"],
            rows,
        )
        written.append(out)

    probes = sorted(run_dir.rglob("interference.json"))
    if probes:
        rows = []
        for path in probes:
            doc = json.loads(path.read_text())
            edges = doc["bin_edges"]
            for lo, hi, s_count, t_count in zip(
                edges[:-1], edges[1:], doc["spatial_counts"], doc["temporal_counts"]
            ):
                rows.append([lo, hi, s_count, t_count, doc["fusion_mode"]])
        out = run_dir / "interference_hist.csv"
        _write_csv(
            out, ["bin_lo", "bin_hi", "spatial_count", "temporal_count", "fusion_mode"], rows
        )
        written.append(out)

    adapts = sorted(run_dir.rglob("adapt.json"))
    if adapts:
        rows = []
        for path in adapts:
            doc = json.loads(path.read_text())
            rows.append([
                doc["fold_index"], doc["held_out_subject"],
                doc["pre"]["macro_f1"], doc["post"]["macro_f1"], doc["improvement"],
            ])
        out = run_dir / "adapt.csv"
        _write_csv(
            out,
            ["fold_index", "held_out_subject", "pre_macro_f1", "post_macro_f1", "improvement"],
            rows,
        )
        written.append(out)

    metrics = sorted(run_dir.rglob("metrics.json"))
    if metrics:
        rows = []
        for path in metrics:
            doc = json.loads(path.read_text())
            for stage in ("stage1", "stage2"):
                if doc.get(stage):
                    rows.append([
                        doc["run_id"], doc["fold_index"], doc["held_out_subject"],
                        stage, doc[stage]["variant"], doc[stage]["fusion"],
                        doc[stage]["macro_f1"],
                    ])
        out = run_dir / "folds.csv"
        _write_csv(
            out,
            ["run_id", "fold_index", "held_out_subject", "stage", "variant", "fusion",
             "macro_f1"],
            rows,
        )
        written.append(out)

    if not written:
        raise ManifestError(f"nothing to export: no result artifacts under {run_dir}")
    return written
