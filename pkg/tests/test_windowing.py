"""Segmentation counts, fold-plan structure, and leakage invariants."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from semgx.dataset import SyntheticSpec, generate_synthetic, synthesize_trial
from semgx.errors import FoldPlanError, InsufficientSamples, LeakageError
from semgx.windowing import (
    FoldPlan,
    Role,
    assert_fold_disjoint,
    materialize_split,
    n_windows,
    plan_folds,
    read_fold_plans,
    segment_trial,
    write_fold_plans,
)

MICRO = SyntheticSpec(n_subjects=3, sample_rate_hz=500, master_seed=11)


@pytest.fixture(scope="module")
def micro_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    return generate_synthetic(MICRO, out / "micro")


class TestSegmentation:
    def test_full_rate_trial_yields_39_windows(self):
        trial = synthesize_trial(SyntheticSpec(n_subjects=1), 1, 0, 1)
        assert trial.samples.shape == (20000, 2)
        windows = segment_trial(trial)
        assert len(windows) == 39
        assert windows[0].offset == 0
        assert windows[-1].offset == 19000
        assert all(w.samples.shape == (1000, 2) for w in windows)

    def test_windows_are_views_of_trial(self):
        trial = synthesize_trial(MICRO, 1, 2, 1)
        windows = segment_trial(trial, window=1000, stride=500)
        assert np.array_equal(windows[1].samples, trial.samples[500:1500])
        assert windows[0].label == 2
        assert windows[0].target[2] == 1.0 and windows[0].target.sum() == 1.0

    def test_trailing_remainder_dropped(self):
        trial = synthesize_trial(MICRO, 1, 0, 1)  # 2500 samples
        windows = segment_trial(trial, window=1000, stride=500)
        assert [w.offset for w in windows] == [0, 500, 1000, 1500]

    def test_short_trial_rejected(self):
        trial = synthesize_trial(MICRO, 1, 0, 1)
        with pytest.raises(InsufficientSamples):
            segment_trial(trial, window=4000, stride=500)

    @given(
        s_total=st.integers(1, 5000),
        window=st.integers(1, 1200),
        stride=st.integers(1, 700),
    )
    def test_count_matches_brute_enumeration(self, s_total, window, stride):
        brute = sum(
            1 for start in range(0, s_total + 1, stride) if start + window <= s_total
        )
        assert n_windows(s_total, window, stride) == brute


class TestFoldPlanning:
    def test_one_fold_per_subject(self, micro_dataset):
        folds = plan_folds(micro_dataset)
        assert [f.held_out_subject for f in folds] == [1, 2, 3]
        assert folds[0].source_subjects == (2, 3)

    def test_role_trial_counts(self, micro_dataset):
        fold = plan_folds(micro_dataset)[0]
        assert len(fold.trials[Role.MS_TRAIN]) == 2 * 10 * 4
        assert len(fold.trials[Role.MS_VAL]) == 2 * 10
        assert len(fold.trials[Role.MS_TEST]) == 2 * 10
        assert len(fold.trials[Role.ADAPT_CALIB]) == 10
        assert len(fold.trials[Role.ADAPT_VAL]) == 10
        assert len(fold.trials[Role.ADAPT_TEST]) == 10 * 4

    def test_eight_subject_window_budget(self, micro_dataset):
        # With 8 subjects at 4 kHz each trial holds 39 windows, so the
        # multi-subject training role carries 7*10*4*39 windows.
        fold = FoldPlan(
            held_out_subject=1,
            source_subjects=tuple(range(2, 9)),
            trials={},
        )
        n_train_trials = 7 * 10 * 4
        assert n_train_trials * n_windows(20000) == 10920
        assert 10 * n_windows(20000) == 390  # calibration trial windows

    def test_disjointness_holds(self, micro_dataset):
        for fold in plan_folds(micro_dataset):
            assert_fold_disjoint(fold)

    def test_leakage_detected(self, micro_dataset):
        fold = plan_folds(micro_dataset)[0]
        corrupted = FoldPlan(
            held_out_subject=fold.held_out_subject,
            source_subjects=fold.source_subjects,
            trials={
                **fold.trials,
                Role.MS_TRAIN: fold.trials[Role.MS_TRAIN] + fold.trials[Role.MS_VAL][:1],
            },
        )
        with pytest.raises(LeakageError):
            assert_fold_disjoint(corrupted)
        hijacked = FoldPlan(
            held_out_subject=fold.held_out_subject,
            source_subjects=fold.source_subjects,
            trials={
                **fold.trials,
                Role.MS_TRAIN: ((fold.held_out_subject, 0, 3),),
            },
        )
        with pytest.raises(LeakageError):
            assert_fold_disjoint(hijacked)

    def test_single_subject_rejected(self, tmp_path):
        solo = generate_synthetic(
            SyntheticSpec(n_subjects=1, sample_rate_hz=500, master_seed=5),
            tmp_path / "solo",
        )
        with pytest.raises(FoldPlanError, match="2 subjects"):
            plan_folds(solo)

    def test_missing_trial_rejected(self, micro_dataset):
        import copy

        broken = copy.copy(micro_dataset)
        broken.handles = dict(micro_dataset.handles)
        del broken.handles[(2, 3, 4)]
        with pytest.raises(FoldPlanError, match=r"\(2, 3, 4\)"):
            plan_folds(broken)

    def test_plan_json_round_trip(self, micro_dataset, tmp_path):
        folds = plan_folds(micro_dataset)
        path = tmp_path / "folds.json"
        write_fold_plans(folds, path)
        back = read_fold_plans(path)
        assert back[1].held_out_subject == folds[1].held_out_subject
        assert back[1].trials == folds[1].trials


class TestMaterialization:
    def test_materialized_windows_tagged(self, micro_dataset):
        fold = plan_folds(micro_dataset)[0]
        windows = materialize_split(micro_dataset, fold, Role.ADAPT_CALIB)
        # 10 gestures * 1 trial * 4 windows per 2500-sample trial
        assert len(windows) == 40
        assert all(w.subject_id == fold.held_out_subject for w in windows)
        assert all(w.trial_index == 1 for w in windows)
        assert all(not w.is_augmented for w in windows)

    def test_split_windows_disjoint_by_provenance(self, micro_dataset):
        fold = plan_folds(micro_dataset)[0]
        seen: set[tuple[int, int, int, int]] = set()
        for role in Role:
            for w in materialize_split(micro_dataset, fold, role):
                key = w.provenance()
                assert key not in seen
                seen.add(key)
