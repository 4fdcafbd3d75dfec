"""Loss, hand-rolled Adam, the two-stage curriculum, and rapid adaptation.

Stage 1 fits the model on the augmented (doubled) multi-subject training
windows at a high learning rate; stage 2 continues from the stage-1 best
checkpoint on the raw windows at a reduced rate, with fresh optimizer
moments. Both stages early-stop on validation macro F1 and return the
best-validation parameters, not the last ones. Adaptation to a held-out
subject fine-tunes on that subject's first trial per gesture, validates on
the second, and is fenced by a provenance check so a checkpoint that ever
saw the held-out subject is rejected.

Everything is deterministic given (seed, config, dataset): batch shuffles,
dropout masks, and branch gates all come from named streams keyed by stage,
epoch, and step. Gradients are exact reverse-mode derivatives of the mean
batch cross-entropy; `finite_difference_check` verifies every parameter
tensor against central differences in double precision.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from .augment import AugmentConfig, doubled_training_set
from .encoder import ModelConfig, ModelParams, _model_bwd, _model_fwd
from .errors import ConfigError, FoldPlanError, LeakageError, NumericsError
from .evaluation import MetricsReport, evaluate, macro_f1_of_predictions, predict_windows
from .seeding import derive_rng
from .windowing import FoldPlan, Role, Window, assert_fold_disjoint, materialize_split


@dataclass(frozen=True)
class Stage1Config:
    learning_rate: float = 1e-3
    epochs_max: int = 50
    batch_size: int = 64
    patience: int = 5
    augment: AugmentConfig = AugmentConfig()


@dataclass(frozen=True)
class Stage2Config:
    learning_rate: float = 1e-4
    epochs_max: int = 20
    patience: int = 5


@dataclass(frozen=True)
class AdaptConfig:
    # Calibration sees one trial per gesture, and under a hard setup shift
    # (swapped or re-gained channels) the input mapping has to move a long
    # way in very few steps; a warm-up-scale rate converges in a handful of
    # epochs where a stage-2-scale rate stalls far below ceiling.
    learning_rate: float = 1e-3
    epochs_max: int = 30
    patience: int = 5
    head_only: bool = False  # freeze everything but the MLP head


@dataclass(frozen=True)
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    stage1: Stage1Config = Stage1Config()
    stage2: Stage2Config = Stage2Config()
    adapt: AdaptConfig = AdaptConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    seed: int = 0

    def validate(self) -> None:
        for name, lr in (
            ("stage1", self.stage1.learning_rate),
            ("stage2", self.stage2.learning_rate),
            ("adapt", self.adapt.learning_rate),
        ):
            if lr <= 0:
                raise ConfigError(f"{name} learning rate must be > 0, got {lr}")
        if self.stage2.learning_rate >= self.stage1.learning_rate:
            raise ConfigError(
                f"stage2 learning rate {self.stage2.learning_rate} must be below "
                f"stage1's {self.stage1.learning_rate}"
            )
        for name, stage in (("stage1", self.stage1), ("stage2", self.stage2), ("adapt", self.adapt)):
            if stage.patience < 1:
                raise ConfigError(f"{name} patience must be >= 1")
            if stage.epochs_max < 0:
                raise ConfigError(f"{name} epochs_max must be >= 0")
        if self.stage1.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (0 <= self.optimizer.beta1 < 1 and 0 <= self.optimizer.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.optimizer.epsilon <= 0:
            raise ConfigError("Adam epsilon must be > 0")
        self.stage1.augment.validate()

    def to_json(self) -> dict:
        def plain(obj):
            out = {}
            for f in fields(obj):
                v = getattr(obj, f.name)
                out[f.name] = plain(v) if hasattr(v, "__dataclass_fields__") else (
                    list(v) if isinstance(v, tuple) else v
                )
            return out

        return plain(self)

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        def build(klass, sub: dict):
            known = {f.name: f for f in fields(klass)}
            unknown = set(sub) - set(known)
            if unknown:
                raise ConfigError(
                    f"unknown {klass.__name__} keys: {sorted(unknown)}"
                )
            kwargs = {}
            for name, value in sub.items():
                f = known[name]
                if hasattr(f.type, "__dataclass_fields__") or f.name in (
                    "stage1", "stage2", "adapt", "optimizer", "augment",
                ):
                    sub_cls = {
                        "stage1": Stage1Config, "stage2": Stage2Config,
                        "adapt": AdaptConfig, "optimizer": OptimizerConfig,
                        "augment": AugmentConfig,
                    }[name]
                    kwargs[name] = build(sub_cls, value)
                elif isinstance(value, list):
                    kwargs[name] = tuple(value)
                else:
                    kwargs[name] = value
            return klass(**kwargs)

        config = build(cls, doc)
        config.validate()
        return config


@dataclass
class TrainLog:
    stage: str
    records: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_f1: float | None = None
    wall_s: float = 0.0

    def to_jsonl(self) -> str:
        import json

        return "".join(json.dumps(rec) + "\n" for rec in self.records)


# ---------------------------------------------------------------------------
# Loss and gradients
# ---------------------------------------------------------------------------

def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cce_loss(logits: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Categorical cross-entropy against a soft target distribution.

    Accepts a single logit vector or a batch; the batch loss is the mean and
    the returned gradient is d(mean loss)/d(logits).
    """
    logits = np.asarray(logits)
    target = np.asarray(target)
    single = logits.ndim == 1
    lb = logits[None] if single else logits
    tb = target[None] if single else target
    logp = _log_softmax(lb)
    loss = float(-(tb * logp).sum(axis=-1).mean())
    dlogits = (np.exp(logp) - tb) / lb.shape[0]
    return loss, dlogits[0] if single else dlogits


def _gradients_on_arrays(
    x: np.ndarray,
    targets: np.ndarray,
    params: ModelParams,
    config: ModelConfig,
    rng: np.random.Generator | None,
    train: bool,
) -> tuple[float, dict[str, np.ndarray]]:
    logits, caches, _ = _model_fwd(x, params, config, train, rng)
    loss, dlogits = cce_loss(logits, targets.astype(logits.dtype))
    grads = _model_bwd(dlogits.astype(logits.dtype), caches)
    if not np.isfinite(loss):
        raise NumericsError("non-finite training loss")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for tensor {name}")
    return loss, grads


def compute_gradients(
    batch: list[Window],
    params: ModelParams,
    config: ModelConfig,
    rng: np.random.Generator | None = None,
    train: bool = True,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean-batch CCE loss and exact gradients for every learnable tensor."""
    dtype = params.stem.conv1_w.dtype
    x = np.stack([w.samples for w in batch]).astype(dtype)
    targets = np.stack([w.target for w in batch])
    return _gradients_on_arrays(x, targets, params, config, rng, train)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def init(cls, params: ModelParams) -> "AdamState":
        arrays = params.named_arrays()
        return cls(
            m={k: np.zeros_like(a) for k, a in arrays.items()},
            v={k: np.zeros_like(a) for k, a in arrays.items()},
        )


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[ModelParams, AdamState]:
    """One Adam update with bias correction.

    Only tensors present in `grads` are updated (moments included), which is
    what implements head-only fine-tuning; everything else passes through.
    """
    b1, b2 = betas
    state.t += 1
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    arrays = params.named_arrays()
    updated = dict(arrays)
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = (lr * (m / bc1)) / (np.sqrt(v / bc2) + eps)
        updated[name] = arrays[name] - step.astype(arrays[name].dtype)
    return ModelParams.from_named(updated), state


# ---------------------------------------------------------------------------
# Fitting loops
# ---------------------------------------------------------------------------

def _windows_to_arrays(windows: list[Window], dtype) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([w.samples for w in windows]).astype(dtype)
    y = np.stack([w.target for w in windows]).astype(np.float64)
    return x, y


def _val_macro_f1(
    val_windows: list[Window], params: ModelParams, config: ModelConfig, batch_size: int
) -> float:
    y_true = np.array([w.label for w in val_windows], dtype=np.int64)
    y_pred = predict_windows(val_windows, params, config, batch_size=batch_size)
    return macro_f1_of_predictions(y_true, y_pred, config.n_classes)


def _fit(
    train_set: list[Window],
    val_windows: list[Window],
    params: ModelParams,
    config: ModelConfig,
    train_config: TrainConfig,
    lr: float,
    epochs_max: int,
    patience: int,
    stage_tag: str,
    head_only: bool = False,
) -> tuple[ModelParams, TrainLog]:
    t_start = time.perf_counter()
    log = TrainLog(stage=stage_tag)
    if epochs_max == 0:
        log.wall_s = time.perf_counter() - t_start
        return params, log

    batch_size = train_config.stage1.batch_size
    betas = (train_config.optimizer.beta1, train_config.optimizer.beta2)
    eps = train_config.optimizer.epsilon
    dtype = params.stem.conv1_w.dtype
    x_all, y_all = _windows_to_arrays(train_set, dtype)
    n = len(train_set)

    params = params.copy()
    state = AdamState.init(params)
    best_params = params.copy()
    best_f1 = -np.inf
    best_epoch = None
    epochs_since_best = 0

    for epoch in range(epochs_max):
        t_epoch = time.perf_counter()
        perm = derive_rng(train_config.seed, "shuffle", stage_tag, epoch).permutation(n)
        loss_sum = 0.0
        for step, start in enumerate(range(0, n, batch_size)):
            idx = perm[start : start + batch_size]
            rng_step = derive_rng(train_config.seed, "stoch", stage_tag, epoch, step)
            loss, grads = _gradients_on_arrays(
                x_all[idx], y_all[idx], params, config, rng_step, train=True
            )
            if head_only:
                grads = {k: g for k, g in grads.items() if k.startswith("head.")}
            params, state = adam_step(params, grads, state, lr, betas=betas, eps=eps)
            loss_sum += loss * len(idx)
        train_loss = loss_sum / n

        val_f1 = _val_macro_f1(val_windows, params, config, batch_size)
        log.records.append(
            {
                "stage": stage_tag,
                "epoch": epoch,
                "train_loss": train_loss,
                "val_macro_f1": val_f1,
                "learning_rate": lr,
                "wall_s": time.perf_counter() - t_epoch,
            }
        )
        if val_f1 > best_f1:
            best_f1 = val_f1
            best_epoch = epoch
            best_params = params.copy()
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= patience:
                break

    log.best_epoch = best_epoch
    log.best_val_f1 = None if best_epoch is None else float(best_f1)
    log.wall_s = time.perf_counter() - t_start
    return best_params, log


def train_stage(
    stage: int,
    manifest,
    fold: FoldPlan,
    params: ModelParams,
    config: ModelConfig,
    train_config: TrainConfig,
) -> tuple[ModelParams, TrainLog]:
    """Run one curriculum stage on the fold's multi-subject split.

    Stage 1 trains on the doubled (original + augmented) window set; stage 2
    continues on the raw windows only. Early stopping watches the validation
    trial's macro F1 and the best-validation parameters are returned.
    """
    if stage not in (1, 2):
        raise ConfigError(f"stage must be 1 or 2, got {stage}")
    train_config.validate()
    config.validate()
    assert_fold_disjoint(fold)

    window = config.window_samples
    stride = window // 2
    train_windows = materialize_split(manifest, fold, Role.MS_TRAIN, window, stride)
    val_windows = materialize_split(manifest, fold, Role.MS_VAL, window, stride)
    if not train_windows or not val_windows:
        raise FoldPlanError("fold has an empty training or validation split")
    for w in train_windows:
        if w.subject_id == fold.held_out_subject:
            raise LeakageError(
                f"held-out subject {fold.held_out_subject} found in training windows"
            )

    if stage == 1:
        augment_seed = derive_rng(
            train_config.seed, "augment-seed", fold.held_out_subject
        ).integers(0, 2**63)
        train_set = doubled_training_set(
            train_windows, train_config.stage1.augment, int(augment_seed)
        )
        lr = train_config.stage1.learning_rate
        epochs_max = train_config.stage1.epochs_max
        patience = train_config.stage1.patience
    else:
        train_set = train_windows
        lr = train_config.stage2.learning_rate
        epochs_max = train_config.stage2.epochs_max
        patience = train_config.stage2.patience

    return _fit(
        train_set, val_windows, params, config, train_config,
        lr, epochs_max, patience, stage_tag=f"stage{stage}",
    )


@dataclass
class AdaptResult:
    params: ModelParams
    pre_report: MetricsReport
    post_report: MetricsReport
    log: TrainLog


def fine_tune_adapt(
    manifest,
    fold: FoldPlan,
    pretrained_params: ModelParams,
    config: ModelConfig,
    train_config: TrainConfig,
    trained_on_subjects: list[int],
) -> AdaptResult:
    """Direct-transfer report, calibration fine-tune, post-adaptation report.

    `trained_on_subjects` is the provenance of the pretrained checkpoint; the
    held-out subject appearing there is a leakage violation.
    """
    train_config.validate()
    if fold.held_out_subject in trained_on_subjects:
        raise LeakageError(
            f"checkpoint was trained on subject {fold.held_out_subject}, "
            "which is this fold's held-out subject"
        )
    window = config.window_samples
    stride = window // 2
    calib = materialize_split(manifest, fold, Role.ADAPT_CALIB, window, stride)
    val = materialize_split(manifest, fold, Role.ADAPT_VAL, window, stride)
    test = materialize_split(manifest, fold, Role.ADAPT_TEST, window, stride)

    pre_report = evaluate(
        pretrained_params, config, test, fold_index=fold.held_out_subject
    )
    adapted, log = _fit(
        calib, val, pretrained_params, config, train_config,
        lr=train_config.adapt.learning_rate,
        epochs_max=train_config.adapt.epochs_max,
        patience=train_config.adapt.patience,
        stage_tag="adapt",
        head_only=train_config.adapt.head_only,
    )
    post_report = evaluate(adapted, config, test, fold_index=fold.held_out_subject)
    return AdaptResult(params=adapted, pre_report=pre_report, post_report=post_report, log=log)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

def finite_difference_check(
    params: ModelParams,
    config: ModelConfig,
    x: np.ndarray,
    targets: np.ndarray,
    delta: float = 1e-5,
    progress: Callable[[str, float], None] | None = None,
) -> dict[str, float]:
    """Max relative error between analytic and central-difference gradients.

    Runs in double precision over every scalar of every tensor. Relative
    error uses max(|analytic|, |numeric|, 1e-5) in the denominator: some
    gradients are structurally zero (a shared key bias cancels inside the
    row softmax), and against those the central difference returns pure
    rounding noise of order |loss| * eps / delta, a few 1e-11. The floor
    turns such pairs into an absolute comparison at 1e-9 instead of
    amplifying that noise.
    """
    if config.dropout_p != 0.0 or config.droppath_p != 0.0:
        raise ConfigError("finite differences need stochastic rates pinned to 0")
    p64 = params.astype(np.float64)
    x64 = np.asarray(x, dtype=np.float64)
    t64 = np.asarray(targets, dtype=np.float64)

    _, grads = _gradients_on_arrays(x64, t64, p64, config, rng=None, train=False)

    def loss_at(pp: ModelParams) -> float:
        logits, _, _ = _model_fwd(x64, pp, config, train=False, rng=None)
        loss, _ = cce_loss(logits, t64)
        return loss

    arrays = p64.named_arrays()
    worst: dict[str, float] = {}
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        max_rel = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + delta
            up = loss_at(p64)
            flat[i] = orig - delta
            down = loss_at(p64)
            flat[i] = orig
            numeric = (up - down) / (2.0 * delta)
            analytic = grads[name].reshape(-1)[i]
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-5)
            max_rel = max(max_rel, rel)
        worst[name] = max_rel
        if progress is not None:
            progress(name, max_rel)
    return worst
