"""Closed-form checks for the conv stem, index embeddings, and fusion."""

from __future__ import annotations

import numpy as np
import pytest

from semgx.embedding import (
    FusionMode,
    NormAddParams,
    StemParams,
    Time2VecParams,
    _fuse_fwd,
    fuse,
    layer_norm,
    sinusoidal_pe,
    stem_forward,
    time2vec_forward,
)
from semgx.encoder import ModelConfig, build_variant
from semgx.errors import ConfigError, NumericsError


# ---------------------------------------------------------------------------
# Layer norm
# ---------------------------------------------------------------------------

def test_layer_norm_closed_form():
    # [1, 2, 3]: mean 2, population var 2/3 -> [-sqrt(3/2), 0, sqrt(3/2)]
    out = layer_norm(np.array([1.0, 2.0, 3.0]), eps=0.0)
    expected = np.array([-np.sqrt(1.5), 0.0, np.sqrt(1.5)])
    assert np.allclose(out, expected, atol=1e-12)


def test_layer_norm_statistics():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, 64)) * 3.0 + 1.5
    out = layer_norm(x)
    assert np.allclose(out.mean(axis=-1), 0.0, atol=1e-7)
    assert np.allclose(out.var(axis=-1), 1.0, atol=1e-3)


def test_layer_norm_affine():
    x = np.array([1.0, 2.0, 3.0])
    plain = layer_norm(x, eps=0.0)
    scaled = layer_norm(x, gamma=2.0, beta=1.0, eps=0.0)
    assert np.allclose(scaled, 2.0 * plain + 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# Fixed sinusoidal encodings
# ---------------------------------------------------------------------------

def test_sinusoidal_pe_values():
    pe = sinusoidal_pe(4, 2)
    assert pe.shape == (4, 2)
    assert np.allclose(pe[0], [0.0, 1.0], atol=1e-12)
    assert abs(pe[1, 0] - np.sin(1.0)) < 1e-12
    assert abs(pe[1, 1] - np.cos(1.0)) < 1e-12


def test_sinusoidal_pe_bounded_and_distinct():
    pe = sinusoidal_pe(250, 128)
    assert pe.shape == (250, 128)
    assert np.abs(pe).max() <= 1.0 + 1e-12
    assert len(np.unique(pe, axis=0)) == 250


def test_sinusoidal_pe_rejects_odd_width():
    with pytest.raises(ConfigError):
        sinusoidal_pe(10, 65)


# ---------------------------------------------------------------------------
# Learnable time embedding
# ---------------------------------------------------------------------------

def test_time2vec_linear_component():
    d = 8
    omega = np.full(d, 0.3)
    omega[0] = 0.5
    phi = np.full(d, 1.1)
    phi[0] = 0.25
    tau = np.arange(10)
    z = time2vec_forward(tau, Time2VecParams(omega=omega, phi=phi))
    assert np.allclose(z[:, 0], 0.5 * tau + 0.25, atol=1e-12)


def test_time2vec_sinusoidal_components():
    rng = np.random.default_rng(3)
    omega = rng.uniform(0.01, np.pi, size=16)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=16)
    tau = np.arange(50, dtype=np.float64)
    z = time2vec_forward(tau, Time2VecParams(omega=omega, phi=phi))
    expected = np.sin(tau[:, None] * omega[None, :] + phi[None, :])
    assert np.abs(z[:, 1:] - expected[:, 1:]).max() < 1e-12


def test_time2vec_half_period_zero_crossing():
    # A frequency of 2*pi/250 puts index 125 half a period in: sin(pi) ~ 0.
    omega = np.array([1.0, 2.0 * np.pi / 250.0])
    phi = np.zeros(2)
    z = time2vec_forward(np.array([125]), Time2VecParams(omega=omega, phi=phi))
    assert abs(z[0, 1]) < 1e-12


def test_time2vec_quarter_phase_gives_cosine():
    rng = np.random.default_rng(9)
    omega = rng.uniform(0.01, np.pi, size=12)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=12)
    tau = np.arange(30, dtype=np.float64)
    shifted = time2vec_forward(tau, Time2VecParams(omega=omega, phi=phi + np.pi / 2.0))
    expected = np.cos(tau[:, None] * omega[None, :] + phi[None, :])
    assert np.abs(shifted[:, 1:] - expected[:, 1:]).max() < 1e-12


def test_time2vec_rejects_mismatched_vectors():
    with pytest.raises(ConfigError):
        time2vec_forward(np.arange(4), Time2VecParams(omega=np.ones(3), phi=np.ones(4)))


# ---------------------------------------------------------------------------
# Conv stem
# ---------------------------------------------------------------------------

def test_stem_downsamples_four_to_one():
    cfg = ModelConfig()
    params = build_variant(cfg, seed=0)
    rng = np.random.default_rng(1)
    z = stem_forward(rng.standard_normal((1000, 2)).astype(np.float32), params.stem)
    assert z.shape == (250, cfg.d_spatial)


def test_stem_handles_other_lengths():
    cfg = ModelConfig(window_samples=500)
    params = build_variant(cfg, seed=0)
    rng = np.random.default_rng(2)
    z = stem_forward(rng.standard_normal((500, 2)).astype(np.float32), params.stem)
    assert z.shape == (125, cfg.d_spatial)


def test_stem_zero_input_zero_biases_gives_zero():
    stem = StemParams(
        conv1_w=np.ones((7, 2, 4)),
        conv1_b=np.zeros(4),
        conv2_w=np.ones((3, 4, 8)),
        conv2_b=np.zeros(8),
        proj_w=np.ones((8, 16)),
        proj_b=np.zeros(16),
    )
    z = stem_forward(np.zeros((64, 2)), stem)
    assert np.array_equal(z, np.zeros((16, 16)))


def test_stem_rejects_nonfinite_input():
    cfg = ModelConfig(window_samples=64)
    params = build_variant(cfg, seed=0)
    x = np.zeros((64, 2), dtype=np.float32)
    x[10, 0] = np.nan
    with pytest.raises(NumericsError):
        stem_forward(x, params.stem)


# ---------------------------------------------------------------------------
# Fusion
# ---------------------------------------------------------------------------

def test_fuse_concat_layout():
    rng = np.random.default_rng(4)
    zs = rng.standard_normal((3, 5, 4))
    zt = rng.standard_normal((5, 6))
    out = fuse(zs, zt, FusionMode.CONCAT)
    assert out.shape == (3, 5, 10)
    assert np.array_equal(out[..., :4], zs)
    for b in range(3):
        assert np.array_equal(out[b, :, 4:], zt)


def test_fuse_add_is_exact_sum():
    rng = np.random.default_rng(5)
    zs = rng.standard_normal((2, 6, 8))
    zt = rng.standard_normal((6, 8))
    out = fuse(zs, zt, "add")
    assert np.array_equal(out, zs + zt[None])


def test_fuse_dimension_mismatches_rejected():
    zs = np.zeros((1, 4, 8))
    zt = np.zeros((4, 8))
    with pytest.raises(ConfigError):
        fuse(zs, zt, FusionMode.CONCAT, d_model=8)  # 8 + 8 != 8
    with pytest.raises(ConfigError):
        fuse(zs, np.zeros((4, 6)), FusionMode.ADD)  # widths differ
    with pytest.raises(ConfigError):
        fuse(zs, zt, FusionMode.NONE)  # passthrough takes no second branch


def test_fuse_norm_add_requires_affines():
    zs = np.zeros((1, 4, 8))
    zt = np.ones((4, 8))
    with pytest.raises(ConfigError):
        fuse(zs, zt, FusionMode.NORM_ADD, norm_add=None)


def test_fuse_norm_add_unit_sphere_norms():
    # With identity affines each normalized branch lands on a sphere of
    # radius sqrt(d_model), up to the epsilon inside the normalizer.
    d = 128
    rng = np.random.default_rng(6)
    zs = rng.standard_normal((2, 7, d))
    zt = rng.standard_normal((7, d))
    affines = NormAddParams(
        gamma_spatial=np.ones(d), beta_spatial=np.zeros(d),
        gamma_time=np.ones(d), beta_time=np.zeros(d),
    )
    _, _, diag = _fuse_fwd(zs, zt, FusionMode.NORM_ADD, affines, 1e-5, d, collect_norms=True)
    spatial_norms, temporal_norms = diag
    assert np.abs(spatial_norms - np.sqrt(d)).max() < 1e-3
    assert np.abs(temporal_norms - np.sqrt(d)).max() < 1e-3


def test_fuse_norm_add_is_sum_of_normalized_branches():
    d = 16
    rng = np.random.default_rng(7)
    zs = rng.standard_normal((2, 5, d))
    zt = rng.standard_normal((5, d))
    gamma_s = rng.uniform(0.5, 1.5, size=d)
    beta_s = rng.standard_normal(d)
    gamma_t = rng.uniform(0.5, 1.5, size=d)
    beta_t = rng.standard_normal(d)
    affines = NormAddParams(
        gamma_spatial=gamma_s, beta_spatial=beta_s,
        gamma_time=gamma_t, beta_time=beta_t,
    )
    out = fuse(zs, zt, FusionMode.NORM_ADD, norm_add=affines)
    expected = layer_norm(zs, gamma_s, beta_s) + layer_norm(zt, gamma_t, beta_t)[None]
    assert np.allclose(out, expected, atol=1e-10)


def test_fuse_single_sequence_matches_batch():
    rng = np.random.default_rng(8)
    zs = rng.standard_normal((5, 4))
    zt = rng.standard_normal((5, 4))
    single = fuse(zs, zt, FusionMode.ADD)
    batched = fuse(zs[None], zt, FusionMode.ADD)
    assert np.array_equal(single, batched[0])
