"""Pure-numpy versions of the compiled row kernels (same signatures, same semantics)."""

import numpy as np

GELU_C = 0.7978845608028654
GELU_A = 0.044715


def _mask(shape, rows, causal, offset):
    if not causal:
        return None
    R, n = shape
    q = np.arange(R) % rows
    return np.arange(n)[None, :] > (q + offset)[:, None]


def softmax_fwd(x, rows, causal, offset):
    if not np.isfinite(x).all():
        raise FloatingPointError("non-finite value entering softmax")
    mask = _mask(x.shape, rows, causal, offset)
    z = x if mask is None else np.where(mask, -np.inf, x)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y, gy, rows, causal, offset):
    # masked entries have y == 0, so the mask needs no separate handling
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def layer_norm_fwd(x, gain, bias, eps):
    if not np.isfinite(x).all():
        raise FloatingPointError("non-finite value entering layer_norm")
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd[:, None]
    return xhat * gain + bias, xhat, rstd


def layer_norm_bwd(gy, xhat, rstd, gain):
    t = gy * gain
    a = t.mean(axis=1, keepdims=True)
    b = (t * xhat).mean(axis=1, keepdims=True)
    gx = rstd[:, None] * (t - a - xhat * b)
    return gx, (gy * xhat).sum(axis=0), gy.sum(axis=0)


def gelu_fwd(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x ** 3)))


def gelu_bwd(x, gy):
    t = np.tanh(GELU_C * (x + GELU_A * x ** 3))
    return gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x))


def xent_fwd(logits, targets, ignore_index):
    keep = targets != ignore_index
    probs = np.zeros_like(logits)
    if not keep.any():
        return 0.0, 0, probs
    z = logits[keep]
    if not np.isfinite(z).all():
        raise FloatingPointError("non-finite logits entering cross_entropy")
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(s[:, 0])
    probs[keep] = e / s
    t = targets[keep]
    total = float((lse - z[np.arange(len(t)), t]).sum())
    return total, int(keep.sum()), probs
