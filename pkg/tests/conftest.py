"""Session fixtures: a two-subject micro corpus and a small model to match."""

from __future__ import annotations

import sys

import pytest

from semgx.dataset import SyntheticSpec, generate_synthetic
from semgx.encoder import ModelConfig
from semgx.windowing import plan_folds


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None) if mod else None
    if lines:
        terminalreporter.section("acceptance gate")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def micro_manifest(tmp_path_factory):
    spec = SyntheticSpec(n_subjects=2, sample_rate_hz=500, master_seed=77)
    root = tmp_path_factory.mktemp("micro-corpus")
    return generate_synthetic(spec, str(root))


@pytest.fixture(scope="session")
def micro_fold(micro_manifest):
    # Hold out subject 2; subject 1 is the only source subject.
    folds = plan_folds(micro_manifest)
    return next(f for f in folds if f.held_out_subject == 2)


@pytest.fixture(scope="session")
def micro_model_config():
    return ModelConfig(
        d_model=32, n_layers=1, n_heads=2, d_ff=64, d_t2v=32, d_head=32,
        window_samples=500, stem_width1=8, stem_width2=16,
    )
