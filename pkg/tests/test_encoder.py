"""Attention oracles, residual wiring, permutation behavior, checkpoints."""

from __future__ import annotations

import numpy as np
import pytest

from semgx.encoder import (
    ModelConfig,
    build_variant,
    encoder_layer_forward,
    load_checkpoint,
    mhsa_forward,
    model_forward,
    param_shapes,
    save_checkpoint,
    scaled_dot_product_attention,
)
from semgx.errors import ConfigError
from semgx.seeding import derive_rng

TINY = dict(
    d_model=16, n_layers=1, n_heads=2, d_ff=32, d_t2v=16, d_head=8,
    window_samples=32, stem_width1=4, stem_width2=8,
    stem_kernel1=7, stem_kernel2=3, dropout_p=0.0, droppath_p=0.0,
)


def tiny_config(**overrides) -> ModelConfig:
    return ModelConfig(**{**TINY, **overrides})


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------

def test_attention_two_position_oracle():
    # Query-key dots of (ln 2, 0) soften to weights (2/3, 1/3); against
    # values (3, 0) the output is exactly 2.
    q = np.array([[np.log(2.0)]])
    k = np.array([[1.0], [0.0]])
    v = np.array([[3.0], [0.0]])
    out = scaled_dot_product_attention(q, k, v)
    assert out.shape == (1, 1)
    assert abs(out[0, 0] - 2.0) < 1e-12


def test_attention_single_position_returns_value():
    rng = np.random.default_rng(0)
    q = rng.standard_normal((1, 4))
    k = rng.standard_normal((1, 4))
    v = rng.standard_normal((1, 4))
    assert np.allclose(scaled_dot_product_attention(q, k, v), v, atol=1e-12)


def test_attention_uniform_over_identical_keys():
    rng = np.random.default_rng(1)
    q = rng.standard_normal((3, 4))
    k = np.tile(rng.standard_normal((1, 4)), (5, 1))
    v = rng.standard_normal((5, 4))
    out = scaled_dot_product_attention(q, k, v)
    assert np.allclose(out, np.tile(v.mean(axis=0), (3, 1)), atol=1e-12)


def test_attention_preserves_constant_values():
    # Convex weights applied to a constant value column reproduce it.
    rng = np.random.default_rng(2)
    q = rng.standard_normal((4, 3))
    k = rng.standard_normal((6, 3))
    v = np.full((6, 2), 0.75)
    out = scaled_dot_product_attention(q, k, v)
    assert np.allclose(out, 0.75, atol=1e-12)


def test_attention_rejects_mismatched_shapes():
    with pytest.raises(ConfigError):
        scaled_dot_product_attention(np.zeros((2, 3)), np.zeros((4, 5)), np.zeros((4, 5)))
    with pytest.raises(ConfigError):
        scaled_dot_product_attention(np.zeros((2, 3)), np.zeros((4, 3)), np.zeros((5, 3)))


def test_single_head_mhsa_matches_plain_attention():
    cfg = tiny_config(n_heads=1)
    layer = build_variant(cfg, seed=4).astype(np.float64).layers[0]
    rng = np.random.default_rng(5)
    h = rng.standard_normal((6, cfg.d_model))
    q = h @ layer.wq + layer.bq
    k = h @ layer.wk + layer.bk
    v = h @ layer.wv + layer.bv
    expected = scaled_dot_product_attention(q, k, v) @ layer.wo + layer.bo
    assert np.allclose(mhsa_forward(h, layer, n_heads=1), expected, atol=1e-12)


def test_attention_parameter_count():
    cfg = ModelConfig()
    shapes = param_shapes(cfg)
    attn_sizes = [
        int(np.prod(shape))
        for name, shape in shapes.items()
        if name.startswith("enc.0.attn.")
    ]
    d = cfg.d_model
    assert sum(attn_sizes) == 4 * d * d + 4 * d


# ---------------------------------------------------------------------------
# Encoder layers and the full model
# ---------------------------------------------------------------------------

def test_layer_is_identity_when_both_branches_dropped():
    cfg = tiny_config(droppath_p=0.1)
    layer = build_variant(cfg, seed=6).layers[0]
    rng = np.random.default_rng(7)
    h = rng.standard_normal((3, 8, cfg.d_model)).astype(np.float32)
    out = encoder_layer_forward(
        h, layer, cfg, mode="train", rng=derive_rng(0, "gates"), droppath_p=1.0
    )
    assert np.array_equal(out, h)


def test_model_eval_is_deterministic():
    cfg = tiny_config()
    params = build_variant(cfg, seed=8)
    rng = np.random.default_rng(9)
    x = rng.standard_normal((4, cfg.window_samples, 2)).astype(np.float32)
    a = model_forward(x, params, cfg)
    b = model_forward(x, params, cfg)
    assert np.array_equal(a, b)


def test_model_train_mode_requires_rng_for_stochastic_rates():
    cfg = tiny_config(dropout_p=0.1, droppath_p=0.1)
    params = build_variant(cfg, seed=10)
    x = np.zeros((1, cfg.window_samples, 2), dtype=np.float32)
    with pytest.raises(ConfigError):
        model_forward(x, params, cfg, mode="train")


def test_train_equals_eval_when_rates_are_zero():
    cfg = tiny_config()
    params = build_variant(cfg, seed=11)
    rng = np.random.default_rng(12)
    x = rng.standard_normal((2, cfg.window_samples, 2)).astype(np.float32)
    assert np.array_equal(
        model_forward(x, params, cfg, mode="train", rng=derive_rng(0, "unused")),
        model_forward(x, params, cfg),
    )


def test_single_window_matches_batch_row():
    cfg = tiny_config()
    params = build_variant(cfg, seed=13)
    rng = np.random.default_rng(14)
    x = rng.standard_normal((3, cfg.window_samples, 2)).astype(np.float32)
    batch = model_forward(x, params, cfg)
    assert np.allclose(model_forward(x[1], params, cfg), batch[1], atol=1e-6)


def test_permutation_dichotomy():
    # Reordering stem tokens must be invisible to the order-free variant
    # (mean pooling over an unordered set) but visible to the time-embedded
    # one, whose temporal branch is keyed to token index.
    rng = np.random.default_rng(42)
    x = rng.standard_normal((2, 32, 2))
    perm = np.array([3, 7, 1, 5, 0, 6, 2, 4])

    cfg_free = tiny_config(variant="nope", fusion="none")
    params_free = build_variant(cfg_free, seed=5).astype(np.float64)
    base = model_forward(x, params_free, cfg_free)
    permuted = model_forward(x, params_free, cfg_free, token_permutation=perm)
    assert np.abs(permuted - base).max() <= 1e-5

    cfg_t2v = tiny_config(variant="time2vec", fusion="norm_add")
    params_t2v = build_variant(cfg_t2v, seed=5).astype(np.float64)
    base = model_forward(x, params_t2v, cfg_t2v)
    permuted = model_forward(x, params_t2v, cfg_t2v, token_permutation=perm)
    assert np.abs(permuted - base).max() > 1e-3


def test_identity_permutation_is_noop():
    cfg = tiny_config(variant="time2vec", fusion="norm_add")
    params = build_variant(cfg, seed=15)
    rng = np.random.default_rng(16)
    x = rng.standard_normal((2, 32, 2)).astype(np.float32)
    ident = np.arange(cfg.seq_len)
    assert np.array_equal(
        model_forward(x, params, cfg, token_permutation=ident),
        model_forward(x, params, cfg),
    )


# ---------------------------------------------------------------------------
# Initialization invariants
# ---------------------------------------------------------------------------

def test_shared_tensors_identical_across_variants():
    # Per-tensor named init streams: removing the temporal branch must not
    # reshuffle the tensors both variants share, or ablations would compare
    # different networks.
    a = build_variant(tiny_config(variant="time2vec", fusion="norm_add"), seed=21)
    b = build_variant(tiny_config(variant="nope", fusion="none"), seed=21)
    named_a = a.named_arrays()
    named_b = b.named_arrays()
    for name in named_b:
        assert np.array_equal(named_a[name], named_b[name]), name


def test_time2vec_init_pins_linear_frequency():
    cfg = tiny_config(variant="time2vec", fusion="norm_add")
    params = build_variant(cfg, seed=22)
    omega = params.t2v.omega
    assert omega[0] == pytest.approx(1.0 / cfg.seq_len)
    assert np.all(omega[1:] >= 1.0 / cfg.seq_len - 1e-9)
    assert np.all(omega[1:] <= np.pi + 1e-9)
    assert np.all(params.t2v.phi >= 0.0) and np.all(params.t2v.phi < 2.0 * np.pi)


def test_param_count_difference_between_variants():
    def total(cfg):
        return sum(int(np.prod(s)) for s in param_shapes(cfg).values())

    with_time = total(ModelConfig())
    without = total(ModelConfig(variant="nope", fusion="none"))
    # Two time-embedding vectors plus four branch-norm affines.
    assert with_time - without == 2 * 128 + 4 * 128


# ---------------------------------------------------------------------------
# Config validation
# ---------------------------------------------------------------------------

def test_config_rejects_indivisible_heads():
    with pytest.raises(ConfigError):
        tiny_config(n_heads=3).validate()


def test_config_rejects_variant_fusion_mismatch():
    with pytest.raises(ConfigError):
        tiny_config(variant="time2vec", fusion="sinusoidal_add").validate()
    with pytest.raises(ConfigError):
        tiny_config(variant="nope", fusion="add").validate()


def test_config_rejects_concat_without_room():
    with pytest.raises(ConfigError):
        tiny_config(variant="time2vec", fusion="concat", d_t2v=16).validate()


def test_config_json_roundtrip():
    cfg = tiny_config(variant="time2vec", fusion="concat", d_t2v=8)
    assert ModelConfig.from_json(cfg.to_json()) == cfg


def test_config_rejects_unknown_keys():
    doc = ModelConfig().to_json()
    doc["momentum"] = 0.9
    with pytest.raises(ConfigError):
        ModelConfig.from_json(doc)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    cfg = tiny_config()
    params = build_variant(cfg, seed=30)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params, cfg, seed=30, meta={"trained_on_subjects": [1, 2]})
    loaded, loaded_cfg, meta = load_checkpoint(path)
    assert loaded_cfg == cfg
    assert meta["trained_on_subjects"] == [1, 2]
    assert meta["seed"] == 30
    for name, arr in params.named_arrays().items():
        assert np.array_equal(loaded.named_arrays()[name], arr), name


def test_checkpoint_rejects_truncation(tmp_path):
    cfg = tiny_config()
    params = build_variant(cfg, seed=31)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params, cfg)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - 40])
    with pytest.raises(ConfigError):
        load_checkpoint(path)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"\x07" * 256)
    with pytest.raises(ConfigError):
        load_checkpoint(path)
