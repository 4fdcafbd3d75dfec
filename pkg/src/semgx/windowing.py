"""Sliding-window segmentation and leave-one-subject-out fold planning.

Trials are cut into fixed-length windows (default 1000 samples = 250 ms at
4 kHz) with 50% overlap (default stride 500); a trailing remainder shorter
than the window is dropped. A 20000-sample trial therefore yields 39 windows.

Each cross-validation fold holds out one subject entirely. The remaining
subjects form the multi-subject split (trials 1-4 train, trial 5 validation,
trial 6 test); the held-out subject forms the adaptation split (trial 1
calibration, trial 2 validation, trials 3-6 test). Splits are expressed at
trial granularity so overlapping windows can never straddle a split
boundary, and the six roles are pairwise disjoint by construction — a
property `assert_fold_disjoint` re-checks at runtime before training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .dataset import DatasetManifest, N_CLASSES, Trial
from .errors import FoldPlanError, InsufficientSamples, LeakageError

WINDOW_SAMPLES = 1000
WINDOW_STRIDE = 500

MS_TRAIN_TRIALS = (1, 2, 3, 4)
MS_VAL_TRIAL = 5
MS_TEST_TRIAL = 6
ADAPT_CALIB_TRIAL = 1
ADAPT_VAL_TRIAL = 2
ADAPT_TEST_TRIALS = (3, 4, 5, 6)


class Role(str, Enum):
    MS_TRAIN = "ms_train"
    MS_VAL = "ms_val"
    MS_TEST = "ms_test"
    ADAPT_CALIB = "adapt_calib"
    ADAPT_VAL = "adapt_val"
    ADAPT_TEST = "adapt_test"


@dataclass
class Window:
    """One model input: fixed-length samples plus a target distribution.

    `target` is a length-10 probability vector — one-hot for raw windows,
    possibly mixed for augmented ones. Provenance records where the samples
    came from (the dominant source, for mixed windows).
    """

    samples: np.ndarray  # (W, 2) float32
    target: np.ndarray  # (10,) float64, sums to 1
    subject_id: int
    gesture: int
    trial_index: int
    offset: int
    is_augmented: bool = False

    @property
    def label(self) -> int:
        return int(np.argmax(self.target))

    def provenance(self) -> tuple[int, int, int, int]:
        return (self.subject_id, self.gesture, self.trial_index, self.offset)


def one_hot(gesture: int) -> np.ndarray:
    vec = np.zeros(N_CLASSES, dtype=np.float64)
    vec[gesture] = 1.0
    return vec


def segment_trial(
    trial: Trial, window: int = WINDOW_SAMPLES, stride: int = WINDOW_STRIDE
) -> list[Window]:
    """Cut one trial into overlapping windows; remainder samples are dropped."""
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    s_total = trial.samples.shape[0]
    if s_total < window:
        raise InsufficientSamples(
            f"trial {(trial.subject_id, trial.gesture, trial.trial_index)}: "
            f"{s_total} samples < window {window}"
        )
    target = one_hot(trial.gesture)
    out = []
    for start in range(0, s_total - window + 1, stride):
        out.append(
            Window(
                samples=trial.samples[start : start + window],
                target=target.copy(),
                subject_id=trial.subject_id,
                gesture=trial.gesture,
                trial_index=trial.trial_index,
                offset=start,
            )
        )
    return out


def n_windows(s_total: int, window: int = WINDOW_SAMPLES, stride: int = WINDOW_STRIDE) -> int:
    if s_total < window:
        return 0
    return (s_total - window) // stride + 1


TrialKey = tuple[int, int, int]  # (subject, gesture, trial)


@dataclass
class FoldPlan:
    """Trial-level role assignment for one held-out subject."""

    held_out_subject: int
    source_subjects: tuple[int, ...]
    trials: dict[Role, tuple[TrialKey, ...]]

    def to_json(self) -> dict:
        return {
            "held_out_subject": self.held_out_subject,
            "source_subjects": list(self.source_subjects),
            "trials": {role.value: [list(k) for k in keys] for role, keys in self.trials.items()},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "FoldPlan":
        return cls(
            held_out_subject=int(doc["held_out_subject"]),
            source_subjects=tuple(int(s) for s in doc["source_subjects"]),
            trials={
                Role(name): tuple(tuple(int(v) for v in key) for key in keys)
                for name, keys in doc["trials"].items()
            },
        )


def plan_folds(manifest: DatasetManifest) -> list[FoldPlan]:
    """One fold per subject, that subject held out.

    Raises FoldPlanError when the dataset cannot support the protocol
    (fewer than two subjects, or a declared trial slot is absent).
    """
    subjects = sorted(manifest.subjects)
    if len(subjects) < 2:
        raise FoldPlanError(
            f"need at least 2 subjects for leave-one-subject-out, got {len(subjects)}"
        )
    if manifest.trials_per_gesture < 6:
        raise FoldPlanError(
            f"protocol assigns trials 1-6; dataset has only "
            f"{manifest.trials_per_gesture} trials per gesture"
        )
    for subject in subjects:
        for g in range(N_CLASSES):
            for t in range(1, 7):
                if (subject, g, t) not in manifest.handles:
                    raise FoldPlanError(f"missing trial ({subject}, {g}, {t})")

    folds = []
    for held_out in subjects:
        sources = tuple(s for s in subjects if s != held_out)
        trials: dict[Role, tuple[TrialKey, ...]] = {
            Role.MS_TRAIN: tuple(
                (s, g, t) for s in sources for g in range(N_CLASSES) for t in MS_TRAIN_TRIALS
            ),
            Role.MS_VAL: tuple(
                (s, g, MS_VAL_TRIAL) for s in sources for g in range(N_CLASSES)
            ),
            Role.MS_TEST: tuple(
                (s, g, MS_TEST_TRIAL) for s in sources for g in range(N_CLASSES)
            ),
            Role.ADAPT_CALIB: tuple(
                (held_out, g, ADAPT_CALIB_TRIAL) for g in range(N_CLASSES)
            ),
            Role.ADAPT_VAL: tuple(
                (held_out, g, ADAPT_VAL_TRIAL) for g in range(N_CLASSES)
            ),
            Role.ADAPT_TEST: tuple(
                (held_out, g, t) for g in range(N_CLASSES) for t in ADAPT_TEST_TRIALS
            ),
        }
        folds.append(
            FoldPlan(held_out_subject=held_out, source_subjects=sources, trials=trials)
        )
    return folds


def assert_fold_disjoint(fold: FoldPlan) -> None:
    """Re-check the leakage invariants; raises LeakageError on violation."""
    roles = list(fold.trials)
    for i, a in enumerate(roles):
        set_a = set(fold.trials[a])
        for b in roles[i + 1 :]:
            shared = set_a & set(fold.trials[b])
            if shared:
                raise LeakageError(
                    f"roles {a.value} and {b.value} share trials {sorted(shared)}"
                )
    for role in (Role.MS_TRAIN, Role.MS_VAL, Role.MS_TEST):
        bad = [k for k in fold.trials[role] if k[0] == fold.held_out_subject]
        if bad:
            raise LeakageError(
                f"{role.value} contains held-out subject {fold.held_out_subject}: {bad}"
            )
    for role in (Role.ADAPT_CALIB, Role.ADAPT_VAL, Role.ADAPT_TEST):
        bad = [k for k in fold.trials[role] if k[0] != fold.held_out_subject]
        if bad:
            raise LeakageError(f"{role.value} contains source-subject trials: {bad}")


def materialize_split(
    manifest: DatasetManifest,
    fold: FoldPlan,
    role: Role,
    window: int = WINDOW_SAMPLES,
    stride: int = WINDOW_STRIDE,
) -> list[Window]:
    """Load and segment every trial the fold assigns to `role`.

    Output order is canonical: trials in the plan's order, windows by
    ascending offset, so downstream seeded shuffles are reproducible.
    """
    windows: list[Window] = []
    for subject, gesture, trial_index in fold.trials[role]:
        trial = manifest.trial(subject, gesture, trial_index)
        windows.extend(segment_trial(trial, window=window, stride=stride))
    return windows


def write_fold_plans(folds: list[FoldPlan], path: Path) -> None:
    doc = {"folds": [fold.to_json() for fold in folds]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_fold_plans(path: Path) -> list[FoldPlan]:
    doc = json.loads(Path(path).read_text())
    return [FoldPlan.from_json(f) for f in doc["folds"]]
