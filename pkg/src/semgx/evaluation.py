"""Metrics, fold aggregation, the exact signed-rank test, and model probes.

Per-class F1 is 2TP/(2TP+FP+FN) from a rows=truth confusion matrix; macro F1
is the unweighted class mean. A class absent from both truth and predictions
scores 0 and raises a report flag rather than being skipped. Fold aggregation
reports mean and standard error (sample std, ddof=1, over sqrt(n_folds)).

The Wilcoxon signed-rank test is exact: zero differences are dropped,
midranks break ties, W = min(positive rank sum, negative rank sum), and the
two-sided p-value enumerates all 2^m sign assignments, counting those whose
statistic is at or below the observed one. No normal approximation — the
fold counts here (n = 8) sit squarely in the exact regime.

The interference probe records the per-position L2 norms of the two branches
as they enter an additive fusion point, which is the quantity that separates
raw addition (one branch can drown the other) from per-branch normalized
addition (norms pinned near sqrt(d_model)).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .encoder import ModelConfig, ModelParams, model_forward
from .errors import ConfigError, DegenerateError, EvalError
from .windowing import Window
from .embedding import FusionMode

# Externally reported reference measurements, recorded in reports for
# comparison only; nothing asserts against them.
REFERENCE_BRANCH_NORM_MEANS = {
    "add": {"spatial": 32.1, "temporal": 7.9},
    "norm_add": {"spatial": 3.04, "temporal": 0.73},
}
REFERENCE_LATENCY_MS = 21.5
REFERENCE_ADAPTATION = {
    "pre_macro_f1": 0.210, "pre_se": 0.0298,
    "post_macro_f1": 0.969, "post_se": 0.0052,
}

# Real-time control budget: a prediction must land within one window stride.
LATENCY_BUDGET_MS = 125.0


@dataclass
class MetricsReport:
    confusion: np.ndarray  # (n_classes, n_classes), rows = truth
    per_class_f1: np.ndarray  # (n_classes,)
    macro_f1: float
    n_windows: int
    fold_index: int | None = None
    variant: str | None = None
    fusion: str | None = None
    undefined_classes: tuple[int, ...] = ()  # no truth and no predictions

    def to_json(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "per_class_f1": [float(v) for v in self.per_class_f1],
            "macro_f1": float(self.macro_f1),
            "n_windows": self.n_windows,
            "fold_index": self.fold_index,
            "variant": self.variant,
            "fusion": self.fusion,
            "undefined_classes": list(self.undefined_classes),
        }


@dataclass
class FoldAggregate:
    per_class_mean: np.ndarray
    per_class_se: np.ndarray
    macro_mean: float
    macro_se: float
    fold_macro: list[float]
    fold_per_class: np.ndarray  # (n_folds, n_classes)

    def to_json(self) -> dict:
        return {
            "per_class_mean": [float(v) for v in self.per_class_mean],
            "per_class_se": [float(v) for v in self.per_class_se],
            "macro_mean": float(self.macro_mean),
            "macro_se": float(self.macro_se),
            "fold_macro": [float(v) for v in self.fold_macro],
        }


@dataclass
class InterferenceReport:
    fusion_mode: str
    spatial_norms: np.ndarray  # one sample per token per probe window
    temporal_norms: np.ndarray
    spatial_mean: float
    temporal_mean: float
    ratio: float  # spatial_mean / temporal_mean
    bin_edges: np.ndarray  # shared by both histograms
    spatial_counts: np.ndarray
    temporal_counts: np.ndarray
    reference_means: dict = field(default_factory=lambda: dict(REFERENCE_BRANCH_NORM_MEANS))

    def to_json(self) -> dict:
        return {
            "fusion_mode": self.fusion_mode,
            "spatial_mean": float(self.spatial_mean),
            "temporal_mean": float(self.temporal_mean),
            "ratio": float(self.ratio),
            "bin_edges": [float(v) for v in self.bin_edges],
            "spatial_counts": [int(v) for v in self.spatial_counts],
            "temporal_counts": [int(v) for v in self.temporal_counts],
            "reference_means": self.reference_means,
        }


# ---------------------------------------------------------------------------
# F1 metrics
# ---------------------------------------------------------------------------

def confusion_matrix(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def f1_from_confusion(cm: np.ndarray) -> tuple[np.ndarray, tuple[int, ...]]:
    """Per-class F1 plus the classes where F1 is 0 by the no-support convention."""
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    undefined = tuple(int(i) for i in np.flatnonzero(denom == 0))
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return f1, undefined


def predict_windows(
    windows: list[Window],
    params: ModelParams,
    config: ModelConfig,
    batch_size: int = 64,
) -> np.ndarray:
    """Argmax-of-logits predictions for a window list, batched eval forward."""
    dtype = params.stem.conv1_w.dtype
    preds = np.empty(len(windows), dtype=np.int64)
    for start in range(0, len(windows), batch_size):
        chunk = windows[start : start + batch_size]
        x = np.stack([w.samples for w in chunk]).astype(dtype)
        logits = model_forward(x, params, config, mode="eval")
        preds[start : start + len(chunk)] = np.argmax(logits, axis=1)
    return preds


def evaluate(
    params: ModelParams,
    config: ModelConfig,
    windows: list[Window],
    fold_index: int | None = None,
    batch_size: int = 64,
) -> MetricsReport:
    """Score a window set: confusion matrix, per-class F1, macro F1."""
    if not windows:
        raise EvalError("cannot evaluate an empty window set")
    y_true = np.array([w.label for w in windows], dtype=np.int64)
    y_pred = predict_windows(windows, params, config, batch_size=batch_size)
    cm = confusion_matrix(y_true, y_pred, config.n_classes)
    f1, undefined = f1_from_confusion(cm)
    return MetricsReport(
        confusion=cm,
        per_class_f1=f1,
        macro_f1=float(f1.mean()),
        n_windows=len(windows),
        fold_index=fold_index,
        variant=config.variant.value,
        fusion=config.fusion.value,
        undefined_classes=undefined,
    )


def macro_f1_of_predictions(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> float:
    f1, _ = f1_from_confusion(confusion_matrix(y_true, y_pred, n_classes))
    return float(f1.mean())


def aggregate_folds(reports: list[MetricsReport]) -> FoldAggregate:
    """Mean and standard error (ddof=1 over sqrt(n)) across fold reports."""
    if len(reports) < 2:
        raise EvalError(f"fold aggregation needs >= 2 reports, got {len(reports)}")
    per_class = np.stack([r.per_class_f1 for r in reports])  # (n_folds, n_classes)
    macros = np.array([r.macro_f1 for r in reports], dtype=np.float64)
    n = len(reports)
    return FoldAggregate(
        per_class_mean=per_class.mean(axis=0),
        per_class_se=per_class.std(axis=0, ddof=1) / np.sqrt(n),
        macro_mean=float(macros.mean()),
        macro_se=float(macros.std(ddof=1) / np.sqrt(n)),
        fold_macro=[float(v) for v in macros],
        fold_per_class=per_class,
    )


# ---------------------------------------------------------------------------
# Exact Wilcoxon signed-rank
# ---------------------------------------------------------------------------

def _midranks(values: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) with ties sharing their mean rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def wilcoxon_signed_rank(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Exact paired signed-rank test; returns (W, two-sided p).

    W is the smaller of the positive/negative rank sums. The p-value counts,
    over every sign assignment of the nonzero |differences|, the assignments
    whose statistic is at or below the observed W.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise EvalError(f"paired samples must be equal-length vectors, got {a.shape}, {b.shape}")
    n = len(a)
    if not (2 <= n <= 20):
        raise EvalError(f"exact enumeration supports 2 <= n <= 20 pairs, got {n}")
    diffs = a - b
    diffs = diffs[diffs != 0.0]
    m = len(diffs)
    if m == 0:
        raise DegenerateError("all paired differences are zero")

    ranks = _midranks(np.abs(diffs))
    w_pos = float(ranks[diffs > 0].sum())
    w_neg = float(ranks[diffs < 0].sum())
    w_obs = min(w_pos, w_neg)

    total = ranks.sum()
    count = 0
    n_assign = 1 << m
    chunk = 1 << 16
    bits = np.arange(m, dtype=np.int64)
    for start in range(0, n_assign, chunk):
        idx = np.arange(start, min(start + chunk, n_assign), dtype=np.int64)
        signs = (idx[:, None] >> bits) & 1  # 1 = that rank counted as positive
        pos_sums = signs @ ranks
        w_all = np.minimum(pos_sums, total - pos_sums)
        count += int(np.sum(w_all <= w_obs + 1e-12))
    return w_obs, count / n_assign


# ---------------------------------------------------------------------------
# Model probes
# ---------------------------------------------------------------------------

def interference_probe(
    params: ModelParams,
    config: ModelConfig,
    probe_windows: list[Window],
    n_bins: int = 30,
    batch_size: int = 64,
) -> InterferenceReport:
    """Branch-norm distributions at the additive fusion point."""
    if config.fusion not in (FusionMode.ADD, FusionMode.NORM_ADD):
        raise ConfigError(
            f"interference probe needs an additive fusion point; "
            f"mode is {config.fusion.value}"
        )
    if not probe_windows:
        raise EvalError("interference probe needs at least one window")
    dtype = params.stem.conv1_w.dtype
    spatial_parts = []
    temporal_parts = []
    for start in range(0, len(probe_windows), batch_size):
        chunk = probe_windows[start : start + batch_size]
        x = np.stack([w.samples for w in chunk]).astype(dtype)
        _, diag = model_forward(x, params, config, mode="eval", collect_diagnostics=True)
        spatial_parts.append(diag["spatial_norms"].ravel())
        # The temporal branch is shared across the batch: count it once per
        # token per window so both samples cover the same population.
        temporal_parts.append(np.tile(diag["temporal_norms"].ravel(), len(chunk)))
    spatial = np.concatenate(spatial_parts)
    temporal = np.concatenate(temporal_parts)

    hi = max(float(spatial.max()), float(temporal.max()))
    edges = np.linspace(0.0, hi if hi > 0 else 1.0, n_bins + 1)
    s_counts, _ = np.histogram(spatial, bins=edges)
    t_counts, _ = np.histogram(temporal, bins=edges)
    s_mean = float(spatial.mean())
    t_mean = float(temporal.mean())
    return InterferenceReport(
        fusion_mode=config.fusion.value,
        spatial_norms=spatial,
        temporal_norms=temporal,
        spatial_mean=s_mean,
        temporal_mean=t_mean,
        ratio=s_mean / t_mean if t_mean > 0 else float("inf"),
        bin_edges=edges,
        spatial_counts=s_counts,
        temporal_counts=t_counts,
    )


def count_params(params: ModelParams) -> dict:
    """Exact learnable-scalar count: total, per tensor, per module group."""
    by_tensor = {name: int(arr.size) for name, arr in params.named_arrays().items()}
    by_module: dict[str, int] = {}
    for name, size in by_tensor.items():
        head = name.split(".")[0]
        group = f"enc.{name.split('.')[1]}" if head == "enc" else head
        by_module[group] = by_module.get(group, 0) + size
    return {
        "total": sum(by_tensor.values()),
        "by_module": by_module,
        "by_tensor": by_tensor,
    }


def profile_latency(
    params: ModelParams,
    config: ModelConfig,
    n_runs: int = 50,
    warmup: int = 10,
    seed: int = 0,
) -> dict:
    """Single-window eval-forward wall times (monotonic clock), in ms."""
    rng = np.random.default_rng(seed)
    window = rng.normal(
        size=(config.window_samples, config.n_channels)
    ).astype(params.stem.conv1_w.dtype)
    for _ in range(warmup):
        model_forward(window, params, config, mode="eval")
    times = np.empty(n_runs, dtype=np.float64)
    for i in range(n_runs):
        t0 = time.perf_counter()
        model_forward(window, params, config, mode="eval")
        times[i] = time.perf_counter() - t0
    times_ms = times * 1e3
    return {
        "mean_ms": float(times_ms.mean()),
        "p50_ms": float(np.percentile(times_ms, 50)),
        "p95_ms": float(np.percentile(times_ms, 95)),
        "n_runs": n_runs,
        "warmup": warmup,
        "reference_mean_ms": REFERENCE_LATENCY_MS,
    }
