"""Low-level differentiable array ops shared by the stem and encoder.

Every op is a `*_fwd` returning ``(output, cache)`` with a matching `*_bwd`
consuming the upstream gradient plus that cache; caches hold exactly what the
backward pass needs. Ops follow the dtype of their inputs, so one graph runs
in float32 for production training and float64 for finite-difference
verification.
"""

from __future__ import annotations

import numpy as np


def same_pad_1d(t_in: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Zero-pad split for 'same' conv: output length is ceil(t_in/stride).

    The extra pad sample (odd totals) goes on the right.
    """
    t_out = -(-t_in // stride)
    pad_total = max(0, (t_out - 1) * stride + kernel - t_in)
    return pad_total // 2, pad_total - pad_total // 2, t_out


def leaky_relu_fwd(x: np.ndarray, alpha: float):
    neg = x < 0
    y = np.where(neg, x * x.dtype.type(alpha), x)
    return y, (neg, alpha)


def leaky_relu_bwd(dy: np.ndarray, cache) -> np.ndarray:
    neg, alpha = cache
    return np.where(neg, dy * dy.dtype.type(alpha), dy)


def linear_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """y = x @ w + b over the last axis; x may have any leading shape.

    Leading axes are flattened so BLAS sees one large matmul instead of a
    batch of small ones; on a single core this is markedly faster.
    """
    d_in, d_out = w.shape
    y = x.reshape(-1, d_in) @ w
    y += b
    return y.reshape(x.shape[:-1] + (d_out,)), (x, w)


def linear_bwd(dy: np.ndarray, cache):
    x, w = cache
    d_in, d_out = w.shape
    x2 = x.reshape(-1, d_in)
    dy2 = dy.reshape(-1, d_out)
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    dx = (dy2 @ w.T).reshape(x.shape)
    return dx, dw, db


def conv1d_same_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int):
    """Strided 1D convolution with 'same' zero padding.

    x: (B, T, C_in); w: (k, C_in, C_out); b: (C_out,). Implemented as k
    tap-wise matmuls over strided views — no explicit im2col buffer.
    """
    k = w.shape[0]
    t_in = x.shape[1]
    pl, pr, t_out = same_pad_1d(t_in, k, stride)
    xp = np.pad(x, ((0, 0), (pl, pr), (0, 0)))
    span = (t_out - 1) * stride + 1
    y = np.empty((x.shape[0], t_out, w.shape[2]), dtype=np.result_type(x, w))
    y[...] = b
    for j in range(k):
        y += xp[:, j : j + span : stride, :] @ w[j]
    return y, (xp, w, stride, pl, t_in)


def conv1d_same_bwd(dy: np.ndarray, cache):
    xp, w, stride, pl, t_in = cache
    k = w.shape[0]
    span = (dy.shape[1] - 1) * stride + 1
    dw = np.empty_like(w)
    dxp = np.zeros_like(xp)
    for j in range(k):
        tap = xp[:, j : j + span : stride, :]
        dw[j] = np.tensordot(tap, dy, axes=([0, 1], [0, 1]))
        dxp[:, j : j + span : stride, :] += dy @ w[j].T
    db = dy.sum(axis=(0, 1))
    dx = dxp[:, pl : pl + t_in, :]
    return dx, dw, db


def layer_norm_fwd(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float):
    """Normalize over the last axis with population variance."""
    mean = x.mean(axis=-1, keepdims=True)
    xc = x - mean
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layer_norm_bwd(dy: np.ndarray, cache):
    xhat, inv, gamma = cache
    lead_axes = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=lead_axes)
    dbeta = dy.sum(axis=lead_axes)
    dxhat = dy * gamma
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def softmax_last(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis, max-subtraction stabilized."""
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_last_bwd(da: np.ndarray, a: np.ndarray) -> np.ndarray:
    inner = np.sum(da * a, axis=-1, keepdims=True)
    return (da - inner) * a


def dropout_mask(shape, p: float, rng: np.random.Generator, dtype) -> np.ndarray | None:
    """Inverted-dropout multiplier, or None when p=0 (identity)."""
    if p <= 0.0:
        return None
    if p >= 1.0:
        return np.zeros(shape, dtype=dtype)
    keep = rng.random(shape) >= p
    return keep.astype(dtype) / np.dtype(dtype).type(1.0 - p)


def droppath_gates(batch: int, p: float, rng: np.random.Generator, dtype) -> np.ndarray | None:
    """Per-sample residual-branch gates: 0 when dropped, 1/(1-p) when kept."""
    if p <= 0.0:
        return None
    if p >= 1.0:
        return np.zeros((batch, 1, 1), dtype=dtype)
    keep = rng.random(batch) >= p
    gates = keep.astype(dtype) / np.dtype(dtype).type(1.0 - p)
    return gates.reshape(batch, 1, 1)
