"""Differentiable operations used by the pipeline.

Every op accepts :class:`Tensor` or array-likes, supports leading batch axes
where that makes sense, and registers a backward closure when an input needs
gradients.

The hidden-layer nonlinearity for every MLP in the package is ``tanh``: it is
smooth, so central finite differences agree with the analytic gradient
everywhere (a ReLU kink would not).
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, as_tensor, make_node

ACTIVATION = "tanh"


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return make_node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return make_node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return make_node(a.data * b.data, (a, b), bw, "mul")


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / a.data

    def bw(g):
        a._accumulate(-g * out * out)

    return make_node(out, (a,), bw, "reciprocal")


def square(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        a._accumulate(2.0 * g * a.data)

    return make_node(a.data * a.data, (a,), bw, "square")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bw(g):
        a._accumulate(g * (1.0 - out * out))

    return make_node(out, (a,), bw, "tanh")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        a._accumulate(g * out)

    return make_node(out, (a,), bw, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise ValueError("log of non-positive entry")

    def bw(g):
        a._accumulate(g / a.data)

    return make_node(np.log(a.data), (a,), bw, "log")


def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# ---------------------------------------------------------------- reductions
def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return make_node(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- shape ops
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        a._accumulate(g.reshape(a.shape))

    return make_node(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)

    def bw(g):
        a._accumulate(np.swapaxes(g, -1, -2))

    return make_node(np.swapaxes(a.data, -1, -2), (a,), bw, "transpose")


def take(a, idx) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return make_node(a.data[idx], (a,), bw, "take")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return make_node(np.concatenate([t.data for t in ts], axis=axis), ts, bw, "concat")


# ---------------------------------------------------------------- linear algebra
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != (b.shape[-2] if b.ndim > 1 else b.shape[0]):
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            if b.ndim == 1:
                ga = np.multiply.outer(g, b.data)
            else:
                ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            if b.ndim == 1:
                gb = (a.data * g[..., None]).reshape(-1, b.shape[0]).sum(axis=0)
            elif a.ndim == 1:
                gb = np.multiply.outer(a.data, g)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return make_node(a.data @ b.data, (a, b), bw, "matmul")


# ---------------------------------------------------------------- normalisations
def softmax_rows(m, tau: float = 1.0) -> Tensor:
    """Softmax of ``m / tau`` along the last axis, with per-row max subtraction."""
    _check_tau(tau)
    m = as_tensor(m)
    x = m.data / tau
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        m._accumulate(out * (g - inner) / tau)

    return make_node(out, (m,), bw, "softmax_rows")


def log_softmax_rows(m, tau: float = 1.0) -> Tensor:
    _check_tau(tau)
    m = as_tensor(m)
    x = m.data / tau
    x = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=-1, keepdims=True))
    out = x - lse
    p = np.exp(out)

    def bw(g):
        m._accumulate((g - p * g.sum(axis=-1, keepdims=True)) / tau)

    return make_node(out, (m,), bw, "log_softmax_rows")


def row_normalize(m) -> Tensor:
    """Divide each row (last axis) by its sum. Entries must be strictly positive."""
    m = as_tensor(m)
    if (m.data <= 0).any():
        raise ValueError("row_normalize requires strictly positive entries (apply exp first)")
    s = m.data.sum(axis=-1, keepdims=True)
    out = m.data / s

    def bw(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        m._accumulate((g - inner) / s)

    return make_node(out, (m,), bw, "row_normalize")


def l2_normalize_rows(m, eps: float = 1e-12) -> Tensor:
    m = as_tensor(m)
    n = np.sqrt((m.data * m.data).sum(axis=-1, keepdims=True)) + eps
    out = m.data / n

    def bw(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        m._accumulate((g - out * inner) / n)

    return make_node(out, (m,), bw, "l2_normalize_rows")


def l2_normalize_cols(m) -> Tensor:
    return transpose(l2_normalize_rows(transpose(m)))


# ---------------------------------------------------------------- composites
def attention(queries, keys, values, tau: float = 1.0, mask: Optional[np.ndarray] = None) -> Tensor:
    """``softmax_rows(queries @ keys.T / tau + mask) @ values``."""
    _check_tau(tau)
    q, k, v = as_tensor(queries), as_tensor(keys), as_tensor(values)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    scores = matmul(q, transpose(k))
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape[-2:] != scores.shape[-2:]:
            raise ValueError(f"mask shape {mask.shape} does not match scores {scores.shape}")
        # the bias is in score units, so it is scaled into the pre-temperature frame
        scores = add(scores, mask * tau)
    weights = softmax_rows(scores, tau)
    return matmul(weights, v)


def mlp_forward(params: Sequence, x, final_activation: bool = False) -> Tensor:
    """Affine layers ``[(W, b), ...]`` with tanh between them."""
    h = as_tensor(x)
    for i, (w, b) in enumerate(params):
        if h.shape[-1] != w.shape[0]:
            raise ValueError(f"layer {i}: input dim {h.shape[-1]} != weight rows {w.shape[0]}")
        h = add(matmul(h, w), b)
        if i < len(params) - 1 or final_activation:
            h = tanh(h)
    return h


def cross_entropy(targets, log_probs) -> Tensor:
    """Mean over rows of ``-sum_k targets * log_probs``."""
    t, lp = as_tensor(targets), as_tensor(log_probs)
    rows = int(np.prod(t.shape[:-1])) if t.ndim > 1 else 1
    return mul(sum(mul(t, lp)), -1.0 / rows)
