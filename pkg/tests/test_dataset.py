"""Dataset layer: binary format, manifest validation, synthetic generator."""

import json

import numpy as np
import pytest

from semgx.dataset import (
    GESTURE_LABELS,
    SyntheticSpec,
    Trial,
    generate_synthetic,
    load_dataset,
    read_trial,
    read_trial_csv,
    rms_centroid_accuracy,
    synthesize_trial,
    write_trial,
)
from semgx.errors import ManifestError, OutputDirError, TrialFormatError

MICRO = SyntheticSpec(n_subjects=2, sample_rate_hz=500, master_seed=77)


@pytest.fixture(scope="module")
def micro_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    return generate_synthetic(MICRO, out / "micro")


def _mk_trial(rate=500, s=None, c=2, subject=1, gesture=0, trial_index=1):
    rng = np.random.default_rng(0)
    s = 5 * rate if s is None else s
    return Trial(
        samples=rng.normal(size=(s, c)).astype(np.float32),
        subject_id=subject,
        gesture=gesture,
        trial_index=trial_index,
        sample_rate_hz=rate,
    )


class TestTrialFormat:
    def test_round_trip_exact(self, tmp_path):
        trial = _mk_trial()
        path = tmp_path / "t.semg"
        write_trial(trial, path)
        back = read_trial(path, 1, 0, 1)
        assert np.array_equal(back.samples, trial.samples)
        assert back.sample_rate_hz == 500

    def test_header_is_32_bytes(self, tmp_path):
        path = tmp_path / "t.semg"
        write_trial(_mk_trial(), path)
        raw = path.read_bytes()
        assert raw[:4] == b"SEMG"
        assert len(raw) == 32 + 4 * 2500 * 2

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "t.semg"
        write_trial(_mk_trial(), path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(TrialFormatError, match="magic"):
            read_trial(path, 1, 0, 1)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "t.semg"
        write_trial(_mk_trial(), path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(TrialFormatError, match="payload"):
            read_trial(path, 1, 0, 1)

    def test_nan_samples_rejected(self, tmp_path):
        trial = _mk_trial()
        trial.samples[100, 1] = np.nan
        path = tmp_path / "t.semg"
        write_trial(trial, path)
        with pytest.raises(TrialFormatError, match=r"\(1, 0, 1\)"):
            read_trial(path, 1, 0, 1)

    def test_csv_import(self, tmp_path):
        rng = np.random.default_rng(3)
        data = rng.normal(size=(2500, 2)).astype(np.float32)
        path = tmp_path / "t.csv"
        np.savetxt(path, data, delimiter=",", fmt="%.9g")
        trial = read_trial_csv(path, 2, 5, 3, 500)
        assert trial.samples.shape == (2500, 2)
        assert np.allclose(trial.samples, data, atol=1e-6)

    def test_csv_wrong_columns(self, tmp_path):
        path = tmp_path / "t.csv"
        np.savetxt(path, np.zeros((2500, 3)), delimiter=",")
        with pytest.raises(TrialFormatError, match="columns"):
            read_trial_csv(path, 1, 0, 1, 500)


class TestSynthetic:
    def test_trial_count_and_labels(self, micro_dataset):
        assert micro_dataset.n_trials == 2 * 10 * 6
        assert micro_dataset.gestures == GESTURE_LABELS
        assert micro_dataset.subjects == [1, 2]

    def test_regeneration_byte_identical(self, micro_dataset, tmp_path):
        again = generate_synthetic(MICRO, tmp_path / "again")
        for key, handle in micro_dataset.handles.items():
            assert handle.path.read_bytes() == again.handles[key].path.read_bytes()

    def test_generation_order_independent(self):
        a = synthesize_trial(MICRO, 2, 9, 6).samples
        b = synthesize_trial(MICRO, 2, 9, 6).samples
        assert np.array_equal(a, b)

    def test_different_seed_differs(self):
        other = SyntheticSpec(n_subjects=2, sample_rate_hz=500, master_seed=78)
        a = synthesize_trial(MICRO, 1, 0, 1).samples
        b = synthesize_trial(other, 1, 0, 1).samples
        assert not np.array_equal(a, b)

    def test_refuses_nonempty_dir(self, tmp_path):
        out = tmp_path / "busy"
        out.mkdir()
        (out / "stale.txt").write_text("x")
        with pytest.raises(OutputDirError):
            generate_synthetic(MICRO, out)

    def test_shift_knobs_touch_only_shifted_subjects(self):
        shifted = MICRO.with_shift((2,))
        same = synthesize_trial(MICRO, 1, 3, 2).samples
        same2 = synthesize_trial(shifted, 1, 3, 2).samples
        assert np.array_equal(same, same2)
        moved = synthesize_trial(MICRO, 2, 3, 2).samples
        moved2 = synthesize_trial(shifted, 2, 3, 2).samples
        assert not np.array_equal(moved, moved2)

    def test_rms_centroid_oracle(self, micro_dataset):
        assert rms_centroid_accuracy(micro_dataset) > 0.80

    def test_signature_distinctness_enforced(self):
        levels = MICRO.envelope_levels.copy()
        levels[1] = levels[0]
        freqs = MICRO.carrier_freqs_hz.copy()
        freqs[1] = freqs[0]
        bad = SyntheticSpec(carrier_freqs_hz=freqs, envelope_levels=levels)
        with pytest.raises(ValueError, match="distinct"):
            bad.validate()

    def test_spec_json_round_trip(self):
        doc = json.loads(json.dumps(MICRO.to_json()))
        back = SyntheticSpec.from_json(doc)
        assert back.master_seed == MICRO.master_seed
        assert np.array_equal(back.carrier_freqs_hz, MICRO.carrier_freqs_hz)


class TestManifestLoading:
    def test_load_round_trip(self, micro_dataset):
        loaded = load_dataset(micro_dataset.root / "manifest.json")
        assert loaded.n_trials == micro_dataset.n_trials
        assert loaded.sample_rate_hz == 500
        trial = loaded.trial(1, 0, 1)
        assert trial.samples.shape == (2500, 2)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ManifestError, match="not found"):
            load_dataset(tmp_path / "nope.json")

    def test_missing_trial_file_named(self, micro_dataset, tmp_path):
        import shutil

        clone = tmp_path / "clone"
        shutil.copytree(micro_dataset.root, clone)
        (clone / "trials" / "s02_g4_t3.semg").unlink()
        with pytest.raises(ManifestError, match=r"\(2, 4, 3\)"):
            load_dataset(clone / "manifest.json")

    def test_corrupt_trial_named(self, micro_dataset, tmp_path):
        import shutil

        clone = tmp_path / "clone2"
        shutil.copytree(micro_dataset.root, clone)
        victim = clone / "trials" / "s01_g2_t5.semg"
        raw = bytearray(victim.read_bytes())
        raw[32:36] = np.float32(np.nan).tobytes()
        victim.write_bytes(bytes(raw))
        with pytest.raises(TrialFormatError, match=r"\(1, 2, 5\)"):
            load_dataset(clone / "manifest.json")

    def test_wrong_gesture_order_rejected(self, micro_dataset, tmp_path):
        import shutil

        clone = tmp_path / "clone3"
        shutil.copytree(micro_dataset.root, clone)
        doc = json.loads((clone / "manifest.json").read_text())
        doc["gestures"] = list(reversed(doc["gestures"]))
        (clone / "manifest.json").write_text(json.dumps(doc))
        with pytest.raises(ManifestError, match="order"):
            load_dataset(clone / "manifest.json")
