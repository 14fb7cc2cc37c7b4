"""Differentiable operations used by the encoder and the heads.

All operations accept leading batch dimensions. Attention-style matrices
are indexed ``[..., query, key]``; row operations act over the last axis.
"""
from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from hopgraph import _kernels
from hopgraph.errors import NumericError, ShapeError, ValidationError
from hopgraph.numerics.tensor import Tensor, as_tensor, make, unbroadcast

NEG_INF = -np.inf
LAYER_NORM_EPS = 1e-5
PROB_FLOOR = 1e-12


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return make(a.data * b.data, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return make(a.data @ b.data, (a, b), bw)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a: Tensor) -> Tensor:
    return make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make(np.concatenate([p.data for p in parts], axis=axis), parts, bw)


def take(a: Tensor, index, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1:
        raise ShapeError("take expects a 1-D index")
    shape = a.shape
    ax = axis % a.ndim

    def bw(g):
        out = np.zeros(shape)
        moved = np.moveaxis(out, ax, 0)
        np.add.at(moved, index, np.moveaxis(g, ax, 0))
        return (out,)

    return make(np.take(a.data, index, axis=ax), (a,), bw)


def embedding_lookup(weight: Tensor, ids) -> Tensor:
    """Rows of ``weight`` selected by integer ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ValidationError(f"embedding id out of range [0, {weight.shape[0]})")
    shape = weight.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return make(weight.data[ids], (weight,), bw)


def linear(x, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` with ``w`` stored as ``[in, out]``."""
    x = as_tensor(x)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not fit weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} for weight {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    # one graph node instead of matmul + add; the bias gradient is a plain row sum
    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gw = x.data.reshape(-1, x.shape[-1]).T @ g2
        grads = (g @ w.data.T, gw)
        return grads if b is None else grads + (g2.sum(axis=0),)

    return make(out, (x, w) if b is None else (x, w, b), bw)


def layer_norm(x: Tensor, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None, eps: float = LAYER_NORM_EPS) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    inv_std = 1.0 / np.sqrt((centred**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv_std
    width = x.shape[-1]

    def bw(g):
        return (inv_std / width * (width * g - g.sum(-1, keepdims=True) - xhat * (g * xhat).sum(-1, keepdims=True)),)

    out = make(xhat, (x,), bw)
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    sq = x.data * x.data
    t = np.tanh(_GELU_C * x.data * (1.0 + 0.044715 * sq))

    def bw(g):
        d = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * sq)
        return (g * d,)

    return make(0.5 * x.data * (1.0 + t), (x,), bw)


def softmax_rows(x: Tensor, additive_mask=None) -> Tensor:
    """Row softmax of ``x + mask``; ``-inf`` mask entries get exactly 0.

    Rows whose every entry is masked return all zeros.
    """
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows: NaN in logits")
    z = x.data if additive_mask is None else x.data + np.asarray(additive_mask, dtype=np.float64)
    blocked = np.isneginf(z)
    row_max = np.where(blocked, -np.inf, z).max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(blocked, 0.0, np.exp(np.where(blocked, 0.0, z - row_max)))
    s = e.sum(axis=-1, keepdims=True)
    y = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make(y, (x,), bw)


def renormalize_rows(x: Tensor) -> Tensor:
    """``x_ij / sum_j x_ij``; all-zero rows stay zero."""
    if (x.data < 0).any():
        raise ValidationError("renormalize_rows: entries must be non-negative")
    s = x.data.sum(axis=-1, keepdims=True)
    safe = np.where(s > 0, s, 1.0)
    y = np.where(s > 0, x.data / safe, 0.0)

    def bw(g):
        return (np.where(s > 0, (g - (g * y).sum(axis=-1, keepdims=True)) / safe, 0.0),)

    return make(y, (x,), bw)


def distance_kernel(raw: Tensor, dist: np.ndarray, roles: np.ndarray, kind: int) -> Tensor:
    """Per-head rescaling matrix F(D): ``raw`` [H,4] -> [B,H,n,n]."""
    dist = np.asarray(dist)
    roles = np.asarray(roles)
    if roles.shape != dist.shape[:2]:
        raise ShapeError(f"roles {roles.shape} do not match distances {dist.shape}")
    out = _kernels.kernel_forward(dist, roles, raw.data, kind)

    def bw(g):
        return (_kernels.kernel_backward(dist, roles, raw.data, kind, g),)

    return make(out, (raw,), bw)


def log_softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return make(y, (x,), bw)


def _check_targets(logits: Tensor, targets) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"expected logits [N,k] and targets [N], got {logits.shape} and {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise ValidationError("target class out of range")
    return targets


def cross_entropy(logits: Tensor, targets, weights: Optional[np.ndarray] = None) -> Tensor:
    """Mean negative log-likelihood; optional per-class ``weights``."""
    return focal_cross_entropy(logits, targets, gamma=0.0, weights=weights)


def focal_cross_entropy(logits: Tensor, targets, gamma: float, weights: Optional[np.ndarray] = None) -> Tensor:
    """Mean of ``w_y * -(1 - p_y)^gamma * log p_y`` over the rows of ``logits``.

    With ``gamma == 0`` and no weights this is plain cross-entropy.
    """
    targets = _check_targets(logits, targets)
    n = targets.shape[0]
    if n == 0:
        return Tensor(0.0)
    rows = np.arange(n)
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_p_all = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(log_p_all)
    log_pt = log_p_all[rows, targets]
    pt = probs[rows, targets]
    if gamma == 0.0:
        per_row = -log_pt
        dloss_dpt_times_pt = -np.ones(n)
    else:
        floored = np.maximum(pt, PROB_FLOOR)
        one_minus = np.maximum(1.0 - pt, 0.0)
        per_row = -(one_minus**gamma) * np.log(floored)
        # d loss / d log p_t
        with np.errstate(divide="ignore", invalid="ignore"):
            modulating_slope = np.where(one_minus > 0, gamma * one_minus ** (gamma - 1.0), 0.0)
        dloss_dpt_times_pt = modulating_slope * np.log(floored) * pt - one_minus**gamma
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)[targets]
    loss = (w * per_row).sum() / n

    def bw(g):
        # d log p_t / d z_j = delta_jy - p_j
        coef = (g * w * dloss_dpt_times_pt / n)[:, None]
        onehot = np.zeros_like(probs)
        onehot[rows, targets] = 1.0
        return (coef * (onehot - probs),)

    return make(loss, (logits,), bw)
