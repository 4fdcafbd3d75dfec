"""Window tokenization and temporal embeddings.

The convolutional stem turns a 1000x2 raw window into 250 latent tokens: a
wide first convolution (kernel 61, roughly one motor-unit action potential at
4 kHz) and a narrow second one (kernel 7), both stride 2 with 'same'
zero-padding, each followed by LeakyReLU, then a position-wise projection.

Temporal structure is injected by one of three routes and combined with the
stem tokens by a fusion strategy:

* learnable embedding over token indices — one linear channel
  ``omega_0 * tau + phi_0`` plus sinusoidal channels ``sin(omega_i * tau +
  phi_i)`` with trainable frequencies and phases (cosines are reachable via a
  +pi/2 phase, so sine-only loses nothing);
* fixed sinusoidal position encodings;
* nothing at all (the permutation-invariant control).

Fusion modes: per-position concatenation, raw addition, per-branch
layer-normalized addition (each branch gets its own affine), sinusoidal
addition, or passthrough. Dimension constraints per mode are hard errors.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, NumericsError
from .ops import (
    conv1d_same_bwd,
    conv1d_same_fwd,
    layer_norm_bwd,
    layer_norm_fwd,
    leaky_relu_bwd,
    leaky_relu_fwd,
    linear_bwd,
    linear_fwd,
)


class FusionMode(str, Enum):
    CONCAT = "concat"
    ADD = "add"
    NORM_ADD = "norm_add"
    SINUSOIDAL_ADD = "sinusoidal_add"
    NONE = "none"


class Variant(str, Enum):
    TIME2VEC = "time2vec"
    STANDARD_PE = "standard_pe"
    NOPE = "nope"


# Which fusion strategies each variant supports.
VARIANT_FUSIONS: dict[Variant, frozenset[FusionMode]] = {
    Variant.TIME2VEC: frozenset({FusionMode.CONCAT, FusionMode.ADD, FusionMode.NORM_ADD}),
    Variant.STANDARD_PE: frozenset({FusionMode.SINUSOIDAL_ADD}),
    Variant.NOPE: frozenset({FusionMode.NONE}),
}


@dataclass
class StemParams:
    conv1_w: np.ndarray  # (k1, C, F1)
    conv1_b: np.ndarray  # (F1,)
    conv2_w: np.ndarray  # (k2, F1, F2)
    conv2_b: np.ndarray  # (F2,)
    proj_w: np.ndarray  # (F2, d_spatial)
    proj_b: np.ndarray  # (d_spatial,)


@dataclass
class Time2VecParams:
    omega: np.ndarray  # (d_t2v,), index 0 is the linear term
    phi: np.ndarray  # (d_t2v,)


@dataclass
class NormAddParams:
    gamma_spatial: np.ndarray
    beta_spatial: np.ndarray
    gamma_time: np.ndarray
    beta_time: np.ndarray


# ---------------------------------------------------------------------------
# Stem
# ---------------------------------------------------------------------------

def _stem_fwd(x: np.ndarray, stem: StemParams, alpha: float):
    """x: (B, T, C) -> (B, T/4, d_spatial) with caches for backward."""
    if not np.all(np.isfinite(x)):
        raise NumericsError("stem input contains non-finite samples")
    c1, cache_c1 = conv1d_same_fwd(x, stem.conv1_w, stem.conv1_b, stride=2)
    a1, cache_a1 = leaky_relu_fwd(c1, alpha)
    c2, cache_c2 = conv1d_same_fwd(a1, stem.conv2_w, stem.conv2_b, stride=2)
    a2, cache_a2 = leaky_relu_fwd(c2, alpha)
    z, cache_p = linear_fwd(a2, stem.proj_w, stem.proj_b)
    return z, (cache_c1, cache_a1, cache_c2, cache_a2, cache_p)


def _stem_bwd(dz: np.ndarray, cache):
    cache_c1, cache_a1, cache_c2, cache_a2, cache_p = cache
    da2, dwp, dbp = linear_bwd(dz, cache_p)
    dc2 = leaky_relu_bwd(da2, cache_a2)
    da1, dw2, db2 = conv1d_same_bwd(dc2, cache_c2)
    dc1 = leaky_relu_bwd(da1, cache_a1)
    dx, dw1, db1 = conv1d_same_bwd(dc1, cache_c1)
    grads = {
        "conv1.w": dw1, "conv1.b": db1,
        "conv2.w": dw2, "conv2.b": db2,
        "proj.w": dwp, "proj.b": dbp,
    }
    return dx, grads


def stem_forward(x: np.ndarray, stem: StemParams, alpha: float = 0.01) -> np.ndarray:
    """Tokenize one window (T, C) or a batch (B, T, C); length shrinks 4x."""
    squeeze = x.ndim == 2
    xb = x[None] if squeeze else x
    z, _ = _stem_fwd(xb, stem, alpha)
    return z[0] if squeeze else z


# ---------------------------------------------------------------------------
# Temporal embeddings
# ---------------------------------------------------------------------------

def _time2vec_fwd(tau: np.ndarray, params: Time2VecParams):
    phase = tau[:, None] * params.omega + params.phi  # (L, d_t2v)
    z = np.sin(phase)
    z[:, 0] = phase[:, 0]
    dz_dphase = np.cos(phase)
    dz_dphase[:, 0] = 1.0
    return z, (tau, dz_dphase)


def _time2vec_bwd(dz: np.ndarray, cache):
    tau, dz_dphase = cache
    g = dz * dz_dphase
    return {"omega": (g * tau[:, None]).sum(axis=0), "phi": g.sum(axis=0)}


def time2vec_forward(indices: np.ndarray, params: Time2VecParams) -> np.ndarray:
    """Embed integer token indices: column 0 linear, the rest sinusoidal."""
    if params.omega.shape != params.phi.shape or params.omega.ndim != 1:
        raise ConfigError("omega and phi must be equal-length vectors")
    tau = np.asarray(indices, dtype=params.omega.dtype)
    z, _ = _time2vec_fwd(tau, params)
    return z


def sinusoidal_pe(seq_len: int, d_model: int, dtype=np.float64) -> np.ndarray:
    """Fixed sin/cos position encodings, interleaved by column parity."""
    if d_model % 2 != 0:
        raise ConfigError(f"sinusoidal encodings need even d_model, got {d_model}")
    pos = np.arange(seq_len, dtype=np.float64)[:, None]
    i = np.arange(d_model // 2, dtype=np.float64)
    angles = pos / np.power(10000.0, 2.0 * i / d_model)
    pe = np.empty((seq_len, d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe.astype(dtype)


def layer_norm(
    v: np.ndarray, gamma: np.ndarray | float = 1.0, beta: np.ndarray | float = 0.0,
    eps: float = 1e-5,
) -> np.ndarray:
    """Normalize over the last axis (population variance) then affine."""
    v = np.asarray(v, dtype=np.result_type(v, np.float32))
    gamma = np.broadcast_to(np.asarray(gamma, dtype=v.dtype), v.shape[-1:])
    beta = np.broadcast_to(np.asarray(beta, dtype=v.dtype), v.shape[-1:])
    out, _ = layer_norm_fwd(v, gamma, beta, eps)
    return out


# ---------------------------------------------------------------------------
# Fusion
# ---------------------------------------------------------------------------

def _check_fuse_dims(d_spatial: int, d_time: int | None, d_model: int, mode: FusionMode):
    if mode is FusionMode.CONCAT:
        if d_time is None or d_spatial + d_time != d_model:
            raise ConfigError(
                f"concat fusion requires d_spatial + d_t2v = d_model; "
                f"got {d_spatial} + {d_time} != {d_model}"
            )
    elif mode in (FusionMode.ADD, FusionMode.NORM_ADD):
        if d_spatial != d_model or d_time != d_model:
            raise ConfigError(
                f"{mode.value} fusion requires d_spatial = d_t2v = d_model; "
                f"got d_spatial={d_spatial}, d_t2v={d_time}, d_model={d_model}"
            )
    elif mode is FusionMode.SINUSOIDAL_ADD:
        if d_spatial != d_model or (d_time is not None and d_time != d_model):
            raise ConfigError(
                f"sinusoidal_add requires d_spatial = d_model; got {d_spatial} != {d_model}"
            )
    else:
        if d_spatial != d_model:
            raise ConfigError(
                f"passthrough fusion requires d_spatial = d_model; got {d_spatial} != {d_model}"
            )
        if d_time is not None:
            raise ConfigError("passthrough fusion takes no temporal branch")


def _branch_norms(z: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(z.astype(np.float64) ** 2, axis=-1))


def _fuse_fwd(
    z_spatial: np.ndarray,  # (B, L, d_spatial)
    z_time: np.ndarray | None,  # (L, d_time) shared across the batch
    mode: FusionMode,
    norm_add: NormAddParams | None,
    eps: float,
    d_model: int,
    collect_norms: bool = False,
):
    d_spatial = z_spatial.shape[-1]
    d_time = None if z_time is None else z_time.shape[-1]
    _check_fuse_dims(d_spatial, d_time, d_model, mode)

    diagnostics = None
    if mode is FusionMode.CONCAT:
        b = z_spatial.shape[0]
        zt_b = np.broadcast_to(z_time, (b, *z_time.shape))
        z = np.concatenate([z_spatial, zt_b], axis=-1)
        cache = (mode, d_spatial)
        if collect_norms:
            diagnostics = (_branch_norms(z_spatial), _branch_norms(z_time))
    elif mode is FusionMode.ADD:
        z = z_spatial + z_time
        cache = (mode, None)
        if collect_norms:
            diagnostics = (_branch_norms(z_spatial), _branch_norms(z_time))
    elif mode is FusionMode.NORM_ADD:
        if norm_add is None:
            raise ConfigError("norm_add fusion requires its branch affine parameters")
        ys, cache_s = layer_norm_fwd(z_spatial, norm_add.gamma_spatial, norm_add.beta_spatial, eps)
        yt, cache_t = layer_norm_fwd(z_time, norm_add.gamma_time, norm_add.beta_time, eps)
        z = ys + yt
        cache = (mode, (cache_s, cache_t))
        if collect_norms:
            # Norms of what actually enters the addition: the normalized branches.
            diagnostics = (_branch_norms(ys), _branch_norms(yt))
    elif mode is FusionMode.SINUSOIDAL_ADD:
        z = z_spatial + z_time
        cache = (mode, None)
        if collect_norms:
            diagnostics = (_branch_norms(z_spatial), _branch_norms(z_time))
    else:  # NONE
        z = z_spatial
        cache = (mode, None)
        if collect_norms:
            diagnostics = (_branch_norms(z_spatial), None)
    return z, cache, diagnostics


def _fuse_bwd(dz: np.ndarray, cache):
    """Returns (d z_spatial, d z_time or None, norm-affine grads)."""
    mode, extra = cache
    grads: dict[str, np.ndarray] = {}
    if mode is FusionMode.CONCAT:
        d_spatial = extra
        return dz[..., :d_spatial], dz[..., d_spatial:].sum(axis=0), grads
    if mode is FusionMode.ADD:
        return dz, dz.sum(axis=0), grads
    if mode is FusionMode.NORM_ADD:
        cache_s, cache_t = extra
        dzs, dgs, dbs = layer_norm_bwd(dz, cache_s)
        dzt, dgt, dbt = layer_norm_bwd(dz.sum(axis=0), cache_t)
        grads = {
            "spatial.gamma": dgs, "spatial.beta": dbs,
            "time.gamma": dgt, "time.beta": dbt,
        }
        return dzs, dzt, grads
    if mode is FusionMode.SINUSOIDAL_ADD:
        return dz, None, grads  # fixed encodings carry no gradient
    return dz, None, grads


def fuse(
    z_spatial: np.ndarray,
    z_time: np.ndarray | None,
    mode: FusionMode | str,
    norm_add: NormAddParams | None = None,
    eps: float = 1e-5,
    d_model: int | None = None,
) -> np.ndarray:
    """Combine the spatial token sequence with the temporal branch.

    Accepts a single sequence (L, d_spatial) or a batch (B, L, d_spatial);
    `d_model` defaults to the dimensionality the mode implies.
    """
    mode = FusionMode(mode)
    squeeze = z_spatial.ndim == 2
    zb = z_spatial[None] if squeeze else z_spatial
    if d_model is None:
        d_time = 0 if z_time is None else z_time.shape[-1]
        d_model = zb.shape[-1] + d_time if mode is FusionMode.CONCAT else zb.shape[-1]
    z, _, _ = _fuse_fwd(zb, z_time, mode, norm_add, eps, d_model)
    return z[0] if squeeze else z
