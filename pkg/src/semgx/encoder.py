"""Pre-LN transformer encoder, classification head, and model assembly.

Architecture per window: convolutional stem -> temporal embedding per the
configured variant -> fusion -> a stack of pre-LN encoder layers (multi-head
self-attention and a LeakyReLU feed-forward block, each wrapped as
``x + gate * dropout(sublayer(LN(x)))``) -> final layer norm -> mean pooling
over the 250 tokens -> two-layer MLP head -> 10 logits.

`gate` is the stochastic-depth branch gate: during training each residual
branch is kept with probability 1-p and scaled by 1/(1-p) when kept, dropped
to exactly zero otherwise; evaluation always runs both branches unscaled.
Dropout applies to each sub-layer output before the residual add.

The backward pass is hand-written reverse-mode accumulation over this fixed
graph (`_model_fwd` / `_model_bwd`); gradients come back as a dict keyed by
the same canonical tensor names `ModelParams.named_arrays` exposes, which are
also the names used by the Adam state and the checkpoint tensor directory.

Checkpoint format: 8-byte little-endian header length, a JSON header
(config, seed, metadata, tensor directory with shapes and byte offsets),
then all tensors concatenated as little-endian float32. Loading validates
every shape against the stored config.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .embedding import (
    FusionMode,
    NormAddParams,
    StemParams,
    Time2VecParams,
    VARIANT_FUSIONS,
    Variant,
    _fuse_bwd,
    _fuse_fwd,
    _stem_bwd,
    _stem_fwd,
    _time2vec_bwd,
    _time2vec_fwd,
    sinusoidal_pe,
)
from .errors import ConfigError, NumericsError
from .ops import (
    dropout_mask,
    droppath_gates,
    layer_norm_bwd,
    layer_norm_fwd,
    leaky_relu_bwd,
    leaky_relu_fwd,
    linear_bwd,
    linear_fwd,
    softmax_last_bwd,
)
from .seeding import derive_rng

STEM_DOWNSAMPLE = 4  # two stride-2 convolutions


@dataclass(frozen=True)
class ModelConfig:
    variant: Variant = Variant.TIME2VEC
    fusion: FusionMode = FusionMode.NORM_ADD
    d_model: int = 128
    n_layers: int = 3
    n_heads: int = 4
    d_ff: int = 256
    d_t2v: int = 128
    d_head: int = 64
    leaky_alpha: float = 0.01
    dropout_p: float = 0.1
    droppath_p: float = 0.1
    n_classes: int = 10
    window_samples: int = 1000
    n_channels: int = 2
    stem_width1: int = 32
    stem_width2: int = 64
    stem_kernel1: int = 61
    stem_kernel2: int = 7
    ln_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "fusion", FusionMode(self.fusion))

    @property
    def seq_len(self) -> int:
        return self.window_samples // STEM_DOWNSAMPLE

    @property
    def d_spatial(self) -> int:
        if self.fusion is FusionMode.CONCAT:
            return self.d_model - self.d_t2v
        return self.d_model

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        for name in ("dropout_p", "droppath_p"):
            rate = getattr(self, name)
            if not (0.0 <= rate < 1.0):
                raise ConfigError(f"{name}={rate} outside [0, 1)")
        if not (0.0 < self.leaky_alpha < 1.0):
            raise ConfigError(f"leaky_alpha={self.leaky_alpha} outside (0, 1)")
        if self.fusion not in VARIANT_FUSIONS[self.variant]:
            allowed = sorted(m.value for m in VARIANT_FUSIONS[self.variant])
            raise ConfigError(
                f"variant {self.variant.value} does not support fusion "
                f"{self.fusion.value}; allowed: {allowed}"
            )
        if self.variant is Variant.TIME2VEC:
            if self.fusion is FusionMode.CONCAT:
                if not (1 <= self.d_t2v < self.d_model):
                    raise ConfigError(
                        f"concat fusion needs 1 <= d_t2v < d_model, got d_t2v={self.d_t2v}"
                    )
            elif self.d_t2v != self.d_model:
                raise ConfigError(
                    f"{self.fusion.value} fusion needs d_t2v = d_model, "
                    f"got {self.d_t2v} != {self.d_model}"
                )
        if self.variant is Variant.STANDARD_PE and self.d_model % 2 != 0:
            raise ConfigError("standard_pe variant needs even d_model")
        if self.window_samples % STEM_DOWNSAMPLE != 0:
            raise ConfigError(
                f"window_samples={self.window_samples} must be divisible by {STEM_DOWNSAMPLE}"
            )
        if min(self.n_layers, self.d_ff, self.d_head, self.n_channels) < 1:
            raise ConfigError("n_layers, d_ff, d_head, n_channels must be >= 1")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.ln_eps <= 0:
            raise ConfigError("ln_eps must be > 0")

    def to_json(self) -> dict:
        doc = {f.name: getattr(self, f.name) for f in fields(self)}
        doc["variant"] = self.variant.value
        doc["fusion"] = self.fusion.value
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        config = cls(**doc)
        config.validate()
        return config


@dataclass
class EncoderLayerParams:
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray


_LAYER_FIELDS = (
    ("ln1_gamma", "ln1.gamma"), ("ln1_beta", "ln1.beta"),
    ("wq", "attn.wq"), ("bq", "attn.bq"),
    ("wk", "attn.wk"), ("bk", "attn.bk"),
    ("wv", "attn.wv"), ("bv", "attn.bv"),
    ("wo", "attn.wo"), ("bo", "attn.bo"),
    ("ln2_gamma", "ln2.gamma"), ("ln2_beta", "ln2.beta"),
    ("ffn_w1", "ffn.w1"), ("ffn_b1", "ffn.b1"),
    ("ffn_w2", "ffn.w2"), ("ffn_b2", "ffn.b2"),
)

_STEM_FIELDS = (
    ("conv1_w", "conv1.w"), ("conv1_b", "conv1.b"),
    ("conv2_w", "conv2.w"), ("conv2_b", "conv2.b"),
    ("proj_w", "proj.w"), ("proj_b", "proj.b"),
)

_NORM_ADD_FIELDS = (
    ("gamma_spatial", "spatial.gamma"), ("beta_spatial", "spatial.beta"),
    ("gamma_time", "time.gamma"), ("beta_time", "time.beta"),
)


@dataclass
class ModelParams:
    """Every learnable array, addressable by canonical dotted names."""

    stem: StemParams
    t2v: Time2VecParams | None
    norm_add: NormAddParams | None
    layers: list[EncoderLayerParams]
    final_ln_gamma: np.ndarray
    final_ln_beta: np.ndarray
    head_w1: np.ndarray
    head_b1: np.ndarray
    head_w2: np.ndarray
    head_b2: np.ndarray

    def named_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for attr, leaf in _STEM_FIELDS:
            out[f"stem.{leaf}"] = getattr(self.stem, attr)
        if self.t2v is not None:
            out["t2v.omega"] = self.t2v.omega
            out["t2v.phi"] = self.t2v.phi
        if self.norm_add is not None:
            for attr, leaf in _NORM_ADD_FIELDS:
                out[f"fuse.{leaf}"] = getattr(self.norm_add, attr)
        for i, layer in enumerate(self.layers):
            for attr, leaf in _LAYER_FIELDS:
                out[f"enc.{i}.{leaf}"] = getattr(layer, attr)
        out["final_ln.gamma"] = self.final_ln_gamma
        out["final_ln.beta"] = self.final_ln_beta
        out["head.w1"] = self.head_w1
        out["head.b1"] = self.head_b1
        out["head.w2"] = self.head_w2
        out["head.b2"] = self.head_b2
        return out

    @classmethod
    def from_named(cls, arrays: dict[str, np.ndarray]) -> "ModelParams":
        stem = StemParams(**{attr: arrays[f"stem.{leaf}"] for attr, leaf in _STEM_FIELDS})
        t2v = None
        if "t2v.omega" in arrays:
            t2v = Time2VecParams(omega=arrays["t2v.omega"], phi=arrays["t2v.phi"])
        norm_add = None
        if "fuse.spatial.gamma" in arrays:
            norm_add = NormAddParams(
                **{attr: arrays[f"fuse.{leaf}"] for attr, leaf in _NORM_ADD_FIELDS}
            )
        n_layers = 0
        while f"enc.{n_layers}.ln1.gamma" in arrays:
            n_layers += 1
        layers = [
            EncoderLayerParams(
                **{attr: arrays[f"enc.{i}.{leaf}"] for attr, leaf in _LAYER_FIELDS}
            )
            for i in range(n_layers)
        ]
        return cls(
            stem=stem,
            t2v=t2v,
            norm_add=norm_add,
            layers=layers,
            final_ln_gamma=arrays["final_ln.gamma"],
            final_ln_beta=arrays["final_ln.beta"],
            head_w1=arrays["head.w1"],
            head_b1=arrays["head.b1"],
            head_w2=arrays["head.w2"],
            head_b2=arrays["head.b2"],
        )

    def astype(self, dtype) -> "ModelParams":
        return ModelParams.from_named(
            {name: arr.astype(dtype) for name, arr in self.named_arrays().items()}
        )

    def copy(self) -> "ModelParams":
        return ModelParams.from_named(
            {name: arr.copy() for name, arr in self.named_arrays().items()}
        )


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor directory for a config: name -> shape."""
    c = config
    shapes: dict[str, tuple[int, ...]] = {
        "stem.conv1.w": (c.stem_kernel1, c.n_channels, c.stem_width1),
        "stem.conv1.b": (c.stem_width1,),
        "stem.conv2.w": (c.stem_kernel2, c.stem_width1, c.stem_width2),
        "stem.conv2.b": (c.stem_width2,),
        "stem.proj.w": (c.stem_width2, c.d_spatial),
        "stem.proj.b": (c.d_spatial,),
    }
    if c.variant is Variant.TIME2VEC:
        shapes["t2v.omega"] = (c.d_t2v,)
        shapes["t2v.phi"] = (c.d_t2v,)
    if c.fusion is FusionMode.NORM_ADD:
        for _, leaf in _NORM_ADD_FIELDS:
            shapes[f"fuse.{leaf}"] = (c.d_model,)
    for i in range(c.n_layers):
        d = c.d_model
        shapes.update(
            {
                f"enc.{i}.ln1.gamma": (d,), f"enc.{i}.ln1.beta": (d,),
                f"enc.{i}.attn.wq": (d, d), f"enc.{i}.attn.bq": (d,),
                f"enc.{i}.attn.wk": (d, d), f"enc.{i}.attn.bk": (d,),
                f"enc.{i}.attn.wv": (d, d), f"enc.{i}.attn.bv": (d,),
                f"enc.{i}.attn.wo": (d, d), f"enc.{i}.attn.bo": (d,),
                f"enc.{i}.ln2.gamma": (d,), f"enc.{i}.ln2.beta": (d,),
                f"enc.{i}.ffn.w1": (d, c.d_ff), f"enc.{i}.ffn.b1": (c.d_ff,),
                f"enc.{i}.ffn.w2": (c.d_ff, d), f"enc.{i}.ffn.b2": (d,),
            }
        )
    shapes["final_ln.gamma"] = (c.d_model,)
    shapes["final_ln.beta"] = (c.d_model,)
    shapes["head.w1"] = (c.d_model, c.d_head)
    shapes["head.b1"] = (c.d_head,)
    shapes["head.w2"] = (c.d_head, c.n_classes)
    shapes["head.b2"] = (c.n_classes,)
    return shapes


def _init_tensor(
    name: str, shape: tuple[int, ...], rng: np.random.Generator, config: ModelConfig
) -> np.ndarray:
    if name == "t2v.omega":
        # Log-uniform frequencies spanning periods from ~2 tokens to the full
        # sequence; the linear channel's slope covers [0, 1] over the window.
        low = 1.0 / config.seq_len
        omega = np.exp(rng.uniform(np.log(low), np.log(np.pi), size=shape))
        omega[0] = low
        return omega.astype(np.float32)
    if name == "t2v.phi":
        return rng.uniform(0.0, 2.0 * np.pi, size=shape).astype(np.float32)
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "gamma":
        return np.ones(shape, dtype=np.float32)
    if leaf == "beta" or leaf.startswith("b"):
        return np.zeros(shape, dtype=np.float32)
    fan_in = shape[0] if len(shape) == 2 else shape[0] * shape[1]
    limit = np.sqrt(1.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def build_variant(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Initialize a model for the configured variant/fusion wiring.

    Every tensor draws from its own named stream, so adding or removing
    tensors (across variants) never shifts another tensor's values.
    """
    config.validate()
    arrays = {
        name: _init_tensor(name, shape, derive_rng(seed, "init", name), config)
        for name, shape in param_shapes(config).items()
    }
    return ModelParams.from_named(arrays)


# ---------------------------------------------------------------------------
# Attention and feed-forward
# ---------------------------------------------------------------------------

def _stable_softmax_checked(scores: np.ndarray, what: str) -> np.ndarray:
    m = np.max(scores, axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise NumericsError(f"non-finite {what}")
    e = np.exp(scores - m)
    return e / e.sum(axis=-1, keepdims=True)


def scaled_dot_product_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Single-head attention: softmax(q kT / sqrt(d_k)) v for (T, d_k) inputs."""
    if q.ndim != 2 or q.shape[1] < 1:
        raise ConfigError(f"expected (T, d_k) query, got shape {q.shape}")
    if k.shape[1] != q.shape[1] or v.shape[0] != k.shape[0]:
        raise ConfigError(
            f"mismatched attention shapes q={q.shape} k={k.shape} v={v.shape}"
        )
    scores = (q @ k.T) / np.sqrt(q.shape[1])
    return _stable_softmax_checked(scores, "attention scores") @ v


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, l, d = x.shape
    return x.reshape(b, l, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, l, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, h * dk)


def _mhsa_fwd(hn: np.ndarray, layer: EncoderLayerParams, n_heads: int):
    """hn: (B, L, d) already normalized; returns attention output + cache."""
    q, cq = linear_fwd(hn, layer.wq, layer.bq)
    k, ck = linear_fwd(hn, layer.wk, layer.bk)
    v, cv = linear_fwd(hn, layer.wv, layer.bv)
    qh, kh, vh = (_split_heads(t, n_heads) for t in (q, k, v))
    scale = qh.dtype.type(1.0 / np.sqrt(qh.shape[-1]))
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    attn = _stable_softmax_checked(scores, "attention scores")
    ctx = _merge_heads(attn @ vh)
    out, co = linear_fwd(ctx, layer.wo, layer.bo)
    return out, (cq, ck, cv, qh, kh, vh, attn, co, scale, n_heads)


def _mhsa_bwd(dout: np.ndarray, cache):
    cq, ck, cv, qh, kh, vh, attn, co, scale, n_heads = cache
    dctx, dwo, dbo = linear_bwd(dout, co)
    dctx_h = _split_heads(dctx, n_heads)
    dattn = dctx_h @ vh.transpose(0, 1, 3, 2)
    dvh = attn.transpose(0, 1, 3, 2) @ dctx_h
    dscores = softmax_last_bwd(dattn, attn) * scale
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 1, 3, 2) @ qh
    dq, dk_, dv = (_merge_heads(t) for t in (dqh, dkh, dvh))
    dhn_q, dwq, dbq = linear_bwd(dq, cq)
    dhn_k, dwk, dbk = linear_bwd(dk_, ck)
    dhn_v, dwv, dbv = linear_bwd(dv, cv)
    grads = {
        "attn.wq": dwq, "attn.bq": dbq, "attn.wk": dwk, "attn.bk": dbk,
        "attn.wv": dwv, "attn.bv": dbv, "attn.wo": dwo, "attn.bo": dbo,
    }
    return dhn_q + dhn_k + dhn_v, grads


def mhsa_forward(h: np.ndarray, layer: EncoderLayerParams, n_heads: int) -> np.ndarray:
    """Multi-head self-attention over a single (L, d_model) sequence."""
    d_model = h.shape[-1]
    if d_model % n_heads != 0:
        raise ConfigError(f"d_model={d_model} not divisible by n_heads={n_heads}")
    out, _ = _mhsa_fwd(h[None], layer, n_heads)
    return out[0]


def _ffn_fwd(hn: np.ndarray, layer: EncoderLayerParams, alpha: float):
    u, c1 = linear_fwd(hn, layer.ffn_w1, layer.ffn_b1)
    a, ca = leaky_relu_fwd(u, alpha)
    out, c2 = linear_fwd(a, layer.ffn_w2, layer.ffn_b2)
    return out, (c1, ca, c2)


def _ffn_bwd(dout: np.ndarray, cache):
    c1, ca, c2 = cache
    da, dw2, db2 = linear_bwd(dout, c2)
    du = leaky_relu_bwd(da, ca)
    dhn, dw1, db1 = linear_bwd(du, c1)
    return dhn, {"ffn.w1": dw1, "ffn.b1": db1, "ffn.w2": dw2, "ffn.b2": db2}


def ffn_forward(x: np.ndarray, layer: EncoderLayerParams, alpha: float = 0.01) -> np.ndarray:
    """Position-wise feed-forward block: LeakyReLU(x W1 + b1) W2 + b2."""
    out, _ = _ffn_fwd(x, layer, alpha)
    return out


# ---------------------------------------------------------------------------
# Encoder layers
# ---------------------------------------------------------------------------

def _encoder_layer_fwd(
    h: np.ndarray,
    layer: EncoderLayerParams,
    config: ModelConfig,
    train: bool,
    rng: np.random.Generator | None,
    droppath_p: float | None = None,
):
    """One pre-LN block. Stochastic draws (when training) happen in a fixed
    order: attention dropout mask, attention branch gate, FFN dropout mask,
    FFN branch gate."""
    p_drop = config.droppath_p if droppath_p is None else droppath_p
    dtype = h.dtype

    hn1, c_ln1 = layer_norm_fwd(h, layer.ln1_gamma, layer.ln1_beta, config.ln_eps)
    attn, c_attn = _mhsa_fwd(hn1, layer, config.n_heads)
    mask1 = gate1 = None
    if train:
        mask1 = dropout_mask(attn.shape, config.dropout_p, rng, dtype)
        gate1 = droppath_gates(h.shape[0], p_drop, rng, dtype)
    branch1 = attn
    if mask1 is not None:
        branch1 = branch1 * mask1
    if gate1 is not None:
        branch1 = branch1 * gate1
    h_mid = h + branch1

    hn2, c_ln2 = layer_norm_fwd(h_mid, layer.ln2_gamma, layer.ln2_beta, config.ln_eps)
    ffn, c_ffn = _ffn_fwd(hn2, layer, config.leaky_alpha)
    mask2 = gate2 = None
    if train:
        mask2 = dropout_mask(ffn.shape, config.dropout_p, rng, dtype)
        gate2 = droppath_gates(h.shape[0], p_drop, rng, dtype)
    branch2 = ffn
    if mask2 is not None:
        branch2 = branch2 * mask2
    if gate2 is not None:
        branch2 = branch2 * gate2
    out = h_mid + branch2

    cache = (c_ln1, c_attn, mask1, gate1, c_ln2, c_ffn, mask2, gate2)
    return out, cache


def _encoder_layer_bwd(dout: np.ndarray, cache):
    c_ln1, c_attn, mask1, gate1, c_ln2, c_ffn, mask2, gate2 = cache

    dbranch2 = dout
    if gate2 is not None:
        dbranch2 = dbranch2 * gate2
    if mask2 is not None:
        dbranch2 = dbranch2 * mask2
    dhn2, g_ffn = _ffn_bwd(dbranch2, c_ffn)
    dln2, dg2, db2 = layer_norm_bwd(dhn2, c_ln2)
    dh_mid = dout + dln2

    dbranch1 = dh_mid
    if gate1 is not None:
        dbranch1 = dbranch1 * gate1
    if mask1 is not None:
        dbranch1 = dbranch1 * mask1
    dhn1, g_attn = _mhsa_bwd(dbranch1, c_attn)
    dln1, dg1, db1 = layer_norm_bwd(dhn1, c_ln1)
    dh = dh_mid + dln1

    grads = {"ln1.gamma": dg1, "ln1.beta": db1, "ln2.gamma": dg2, "ln2.beta": db2}
    grads.update(g_attn)
    grads.update(g_ffn)
    return dh, grads


def encoder_layer_forward(
    h: np.ndarray,
    layer: EncoderLayerParams,
    config: ModelConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    droppath_p: float | None = None,
) -> np.ndarray:
    """Run one encoder layer on (L, d) or (B, L, d).

    `droppath_p` overrides the config rate (1.0 forces both branches off,
    making the layer the identity)."""
    train = mode == "train"
    if train and rng is None and (config.dropout_p > 0 or (droppath_p or config.droppath_p) > 0):
        raise ConfigError("train mode with stochastic rates needs an rng")
    squeeze = h.ndim == 2
    hb = h[None] if squeeze else h
    out, _ = _encoder_layer_fwd(hb, layer, config, train, rng, droppath_p)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# Full model
# ---------------------------------------------------------------------------

def _temporal_branch(params: ModelParams, config: ModelConfig, dtype):
    """The shared (L, d_time) temporal tensor for the configured variant."""
    if config.variant is Variant.TIME2VEC:
        tau = np.arange(config.seq_len, dtype=dtype)
        return _time2vec_fwd(tau, params.t2v)
    if config.variant is Variant.STANDARD_PE:
        return sinusoidal_pe(config.seq_len, config.d_model, dtype=dtype), None
    return None, None


def _model_fwd(
    x: np.ndarray,
    params: ModelParams,
    config: ModelConfig,
    train: bool,
    rng: np.random.Generator | None,
    collect_diagnostics: bool = False,
    token_permutation: np.ndarray | None = None,
):
    """Batched forward pass: x (B, T, C) -> logits (B, n_classes).

    Returns (logits, caches, diagnostics); caches feed `_model_bwd`.
    `token_permutation` reorders the stem's output tokens (the temporal
    branch is left in place) — a probe for position-information tests.
    """
    if x.ndim != 3 or x.shape[1] != config.window_samples or x.shape[2] != config.n_channels:
        raise ConfigError(
            f"expected input (B, {config.window_samples}, {config.n_channels}), "
            f"got {x.shape}"
        )
    dtype = params.stem.conv1_w.dtype
    x = np.ascontiguousarray(x, dtype=dtype)

    z_spatial, c_stem = _stem_fwd(x, params.stem, config.leaky_alpha)
    if token_permutation is not None:
        z_spatial = z_spatial[:, token_permutation, :]

    z_time, c_t2v = _temporal_branch(params, config, dtype)
    fused, c_fuse, diagnostics = _fuse_fwd(
        z_spatial,
        z_time,
        config.fusion,
        params.norm_add,
        config.ln_eps,
        config.d_model,
        collect_norms=collect_diagnostics,
    )

    h = fused
    layer_caches = []
    for layer in params.layers:
        h, cache = _encoder_layer_fwd(h, layer, config, train, rng)
        layer_caches.append(cache)

    hn, c_final = layer_norm_fwd(h, params.final_ln_gamma, params.final_ln_beta, config.ln_eps)
    pooled = hn.mean(axis=1)
    h1, c_h1 = linear_fwd(pooled, params.head_w1, params.head_b1)
    a1, c_a1 = leaky_relu_fwd(h1, config.leaky_alpha)
    logits, c_h2 = linear_fwd(a1, params.head_w2, params.head_b2)

    caches = {
        "stem": c_stem,
        "perm": token_permutation,
        "t2v": c_t2v,
        "fuse": c_fuse,
        "layers": layer_caches,
        "final_ln": c_final,
        "seq_len": hn.shape[1],
        "head": (c_h1, c_a1, c_h2),
        "variant": config.variant,
    }
    if collect_diagnostics and diagnostics is not None:
        diagnostics = {
            "fusion_mode": config.fusion.value,
            "spatial_norms": diagnostics[0],
            "temporal_norms": diagnostics[1],
        }
    else:
        diagnostics = None
    return logits, caches, diagnostics


def _model_bwd(dlogits: np.ndarray, caches: dict) -> dict[str, np.ndarray]:
    """Reverse-mode pass; returns gradients keyed by canonical tensor name."""
    c_h1, c_a1, c_h2 = caches["head"]
    grads: dict[str, np.ndarray] = {}

    da1, dw2, db2 = linear_bwd(dlogits, c_h2)
    grads["head.w2"] = dw2
    grads["head.b2"] = db2
    dh1 = leaky_relu_bwd(da1, c_a1)
    dpooled, dw1, db1 = linear_bwd(dh1, c_h1)
    grads["head.w1"] = dw1
    grads["head.b1"] = db1

    l_seq = caches["seq_len"]
    dhn = np.repeat(dpooled[:, None, :] / l_seq, l_seq, axis=1)
    dh, dgf, dbf = layer_norm_bwd(dhn, caches["final_ln"])
    grads["final_ln.gamma"] = dgf
    grads["final_ln.beta"] = dbf

    for i in range(len(caches["layers"]) - 1, -1, -1):
        dh, layer_grads = _encoder_layer_bwd(dh, caches["layers"][i])
        for leaf, g in layer_grads.items():
            grads[f"enc.{i}.{leaf}"] = g

    dz_spatial, dz_time, fuse_grads = _fuse_bwd(dh, caches["fuse"])
    for leaf, g in fuse_grads.items():
        grads[f"fuse.{leaf}"] = g

    if caches["variant"] is Variant.TIME2VEC and dz_time is not None:
        t2v_grads = _time2vec_bwd(dz_time, caches["t2v"])
        grads["t2v.omega"] = t2v_grads["omega"]
        grads["t2v.phi"] = t2v_grads["phi"]

    if caches["perm"] is not None:
        unpermuted = np.empty_like(dz_spatial)
        unpermuted[:, caches["perm"], :] = dz_spatial
        dz_spatial = unpermuted

    _, stem_grads = _stem_bwd(dz_spatial, caches["stem"])
    for leaf, g in stem_grads.items():
        grads[f"stem.{leaf}"] = g
    return grads


def model_forward(
    window: np.ndarray,
    params: ModelParams,
    config: ModelConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    collect_diagnostics: bool = False,
    token_permutation: np.ndarray | None = None,
):
    """Classify one (T, C) window or a batch (B, T, C).

    Returns logits, or (logits, diagnostics) when `collect_diagnostics`;
    diagnostics hold the per-position L2 norms of both branches as they
    enter the fusion point."""
    train = mode == "train"
    if train and rng is None and (config.dropout_p > 0 or config.droppath_p > 0):
        raise ConfigError("train mode with stochastic rates needs an rng")
    squeeze = window.ndim == 2
    xb = window[None] if squeeze else window
    logits, _, diagnostics = _model_fwd(
        xb, params, config, train, rng,
        collect_diagnostics=collect_diagnostics,
        token_permutation=token_permutation,
    )
    if squeeze:
        logits = logits[0]
    if collect_diagnostics:
        return logits, diagnostics
    return logits


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CKPT_FORMAT = "semgx-checkpoint"
_CKPT_VERSION = 1


def save_checkpoint(
    path: Path,
    params: ModelParams,
    config: ModelConfig,
    seed: int | None = None,
    meta: dict | None = None,
) -> None:
    """JSON header (with tensor directory) + concatenated float32 payload."""
    arrays = params.named_arrays()
    directory = {}
    offset = 0
    for name, arr in arrays.items():
        directory[name] = {"shape": list(arr.shape), "offset": offset}
        offset += arr.size * 4
    header = {
        "format": _CKPT_FORMAT,
        "version": _CKPT_VERSION,
        "config": config.to_json(),
        "seed": seed,
        "meta": meta or {},
        "tensors": directory,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: Path) -> tuple[ModelParams, ModelConfig, dict]:
    """Read a checkpoint; every tensor shape is validated against the config."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ConfigError(f"checkpoint truncated: {path}")
    (header_len,) = struct.unpack("<Q", raw[:8])
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"checkpoint header unreadable: {path}: {exc}") from exc
    if header.get("format") != _CKPT_FORMAT or header.get("version") != _CKPT_VERSION:
        raise ConfigError(f"not a recognized checkpoint: {path}")
    config = ModelConfig.from_json(header["config"])

    expected = param_shapes(config)
    directory = header["tensors"]
    if set(directory) != set(expected):
        missing = sorted(set(expected) - set(directory))
        extra = sorted(set(directory) - set(expected))
        raise ConfigError(
            f"checkpoint tensor directory mismatch: missing {missing}, unexpected {extra}"
        )
    payload = raw[8 + header_len :]
    arrays: dict[str, np.ndarray] = {}
    for name, entry in directory.items():
        shape = tuple(entry["shape"])
        if shape != expected[name]:
            raise ConfigError(
                f"checkpoint tensor {name} has shape {shape}, config implies {expected[name]}"
            )
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        chunk = payload[start : start + 4 * size]
        if len(chunk) != 4 * size:
            raise ConfigError(f"checkpoint payload truncated at tensor {name}")
        arrays[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
    params = ModelParams.from_named(arrays)
    meta = dict(header.get("meta") or {})
    meta["seed"] = header.get("seed")
    return params, config, meta
