"""Differentiable operations over :class:`Tensor`.

Broadcasting is limited to a right operand matching the trailing axes of the left
one (bias / gain / positional tables); everything else must agree exactly.
"""

from __future__ import annotations

import math

import numpy as np

from . import kernels
from .tensor import DimensionError, NumericError, Tensor, as_tensor, result


def _check_trailing(a, b, op):
    if a.shape == b.shape:
        return
    k = b.ndim
    if k == 0 or (k <= a.ndim and a.shape[a.ndim - k:] == b.shape):
        return
    raise DimensionError(f"{op}: shape {b.shape} does not match trailing axes of {a.shape}")


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead else g
    return g.reshape(shape)


def _finite(arr, op):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite output from {op}")
    return arr


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_trailing(a, b, "add")
    sa, sb = a.shape, b.shape
    return result(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_trailing(a, b, "sub")
    sb = b.shape
    return result(a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, sb)))


def mul(a, b):
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    a, b = as_tensor(a), as_tensor(b)
    _check_trailing(a, b, "mul")
    ad, bd, sb = a.data, b.data, b.shape
    return result(ad * bd, (a, b), lambda g: (g * bd, _reduce_to(g * ad, sb)))


def scale(a, c):
    c = float(c)
    return result(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b):
    """Matrix product over the last two axes with numpy batch semantics."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def bwd(g):
        ga = _reduce_to(g @ np.swapaxes(bd, -1, -2), sa) if a.requires_grad else None
        gb = _reduce_to(np.swapaxes(ad, -1, -2) @ g, sb) if b.requires_grad else None
        return ga, gb

    return result(_finite(ad @ bd, "matmul"), (a, b), bwd)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with weight stored (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input dim {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    w = weight.data
    y = x2 @ w.T
    if bias is not None:
        y = y + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ w).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return result(y.reshape(*lead, w.shape[0]), parents, bwd)


def reshape(x, shape):
    src = x.shape
    return result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x, axes):
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                  lambda g: (g.transpose(inv),))


def getitem(x, idx):
    src = x.shape

    def bwd(g):
        out = np.zeros(src)
        # add.at so repeated fancy indices accumulate
        np.add.at(out, idx, g)
        return (out,)

    return result(np.array(x.data[idx]), (x,), bwd)


def take(x, index, axis=0):
    """Select entries of ``x`` along ``axis``; repeated indices accumulate gradient."""
    index = np.asarray(index, dtype=np.int64)
    src = x.shape
    ax = axis % x.ndim

    def bwd(g):
        out = np.zeros(src)
        np.add.at(np.moveaxis(out, ax, 0), index, np.moveaxis(g, ax, 0))
        return (out,)

    return result(np.take(x.data, index, axis=ax), (x,), bwd)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(tensors)))

    return result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bwd)


def pad_stack(tensors, length):
    """Stack (n_i, d) tensors into (B, length, d), zero-filling past each n_i."""
    d = tensors[0].shape[-1]
    out = np.zeros((len(tensors), length, d))
    for i, t in enumerate(tensors):
        if t.shape[0] > length:
            raise DimensionError(f"pad_stack: row {i} has {t.shape[0]} > {length} positions")
        out[i, : t.shape[0]] = t.data
    ns = [t.shape[0] for t in tensors]
    return result(out, tuple(tensors), lambda g: tuple(g[i, :n] for i, n in enumerate(ns)))


def embedding(weight, ids):
    ids = np.asarray(ids, dtype=np.int64)
    V = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"embedding: ids outside [0, {V})")

    def bwd(g):
        gw = np.zeros(weight.shape)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return result(weight.data[ids], (weight,), bwd)


def sum(x):  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x):
    shape, n = x.shape, x.data.size
    return result(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def gelu(x):
    xd = x.data
    return result(kernels.gelu_fwd(xd), (x,), lambda g: (kernels.gelu_bwd(xd, g),))


def softmax_rows(x, causal=False, offset=0):
    """Softmax over the last axis. With ``causal`` row i of each trailing matrix sees
    columns ``j <= i + offset``; masked probabilities are exactly zero."""
    shape = x.shape
    rows = shape[-2] if x.ndim >= 2 else 1
    x2 = x.data.reshape(-1, shape[-1])
    try:
        y = kernels.softmax_fwd(x2, rows, causal, offset)
    except FloatingPointError as e:
        raise NumericError(str(e)) from None

    def bwd(g):
        return (kernels.softmax_bwd(y, g.reshape(y.shape), rows, causal, offset).reshape(shape),)

    return result(y.reshape(shape), (x,), bwd)


def layer_norm(x, gain, bias, eps=1e-5):
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias must have shape ({d},)")
    shape = x.shape
    try:
        y, xhat, rstd = kernels.layer_norm_fwd(x.data.reshape(-1, d), gain.data, bias.data, eps)
    except FloatingPointError as e:
        raise NumericError(str(e)) from None

    def bwd(g):
        gx, gg, gb = kernels.layer_norm_bwd(g.reshape(-1, d), xhat, rstd, gain.data)
        return gx.reshape(shape), gg, gb

    return result(y.reshape(shape), (x, gain, bias), bwd)


_MASKED = -1e30


def attention(q, k, v, causal=False, offset=0, key_mask=None):
    """Scaled dot-product attention over (B, heads, n, dh) tensors.

    ``offset`` is the number of cached key positions preceding the first query, so
    query i may attend keys ``j <= i + offset`` when ``causal``. ``key_mask`` is a
    boolean (B, n_keys) array; False keys receive exactly zero weight.
    """
    dh = q.shape[-1]
    if k.shape[-1] != dh or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention: incompatible q{q.shape} k{k.shape} v{v.shape}")
    s = 1.0 / math.sqrt(dh)
    qd, kd, vd = q.data, k.data, v.data
    scores = (qd @ np.swapaxes(kd, -1, -2)) * s
    if key_mask is not None:
        keep = np.asarray(key_mask, dtype=bool)
        if keep.shape != (scores.shape[0], scores.shape[-1]):
            raise DimensionError(f"attention: key_mask {keep.shape} vs scores {scores.shape}")
        # a large finite fill keeps the kernels' finiteness check meaningful
        scores = np.where(keep[:, None, None, :], scores, _MASKED)
    rows = scores.shape[-2]
    try:
        p2 = kernels.softmax_fwd(scores.reshape(-1, scores.shape[-1]), rows, causal, offset)
    except FloatingPointError as e:
        raise NumericError(str(e)) from None
    p = p2.reshape(scores.shape)

    def bwd(g):
        gp = g @ np.swapaxes(vd, -1, -2)
        gs = kernels.softmax_bwd(p2, gp.reshape(p2.shape), rows, causal, offset).reshape(p.shape) * s
        gq = gs @ kd if q.requires_grad else None
        gk = np.swapaxes(gs, -1, -2) @ qd if k.requires_grad else None
        gv = np.swapaxes(p, -1, -2) @ g if v.requires_grad else None
        return gq, gk, gv

    return result(p @ vd, (q, k, v), bwd)


def cross_entropy(logits, targets, ignore_index=-100):
    """Mean negative log-likelihood over positions whose target is not ``ignore_index``."""
    V = logits.shape[-1]
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    l2 = logits.data.reshape(-1, V)
    if t.shape[0] != l2.shape[0]:
        raise DimensionError(f"cross_entropy: {t.shape[0]} targets for {l2.shape[0]} rows")
    keep = t != ignore_index
    if not keep.any():
        raise ValueError("cross_entropy: every position is ignored, mean is undefined")
    if t[keep].min() < 0 or t[keep].max() >= V:
        raise IndexError(f"cross_entropy: target outside [0, {V})")
    try:
        total, count, probs = kernels.xent_fwd(l2, t, ignore_index)
    except FloatingPointError as e:
        raise NumericError(str(e)) from None
    shape = logits.shape

    def bwd(g):
        gl = probs.copy()
        rows = np.nonzero(keep)[0]
        gl[rows, t[rows]] -= 1.0
        return ((gl * (float(g) / count)).reshape(shape),)

    return result(np.asarray(total / count), (logits,), bwd)
