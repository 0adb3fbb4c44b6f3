"""AdamW with decoupled weight decay, plus a warmup/cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np


def adamw_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """One in-place AdamW update.

    ``state`` maps parameter name -> {"m", "v", "t"} and is created on demand. Parameters
    that are not trainable, or have no gradient, are left untouched (bitwise).
    """
    b1, b2 = betas
    for p, g in zip(params, grads):
        if not p.trainable or g is None:
            continue
        st = state.get(p.name)
        if st is None:
            st = state[p.name] = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
        st["t"] += 1
        t = st["t"]
        st["m"] = b1 * st["m"] + (1.0 - b1) * g
        st["v"] = b2 * st["v"] + (1.0 - b2) * (g * g)
        m_hat = st["m"] / (1.0 - b1 ** t)
        v_hat = st["v"] / (1.0 - b2 ** t)
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def global_grad_norm(params):
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float((p.grad * p.grad).sum())
    return math.sqrt(sq)


class AdamW:
    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, clip_norm=None):
        self.params = [p for p in params if p.trainable]
        names = [p.name for p in self.params]
        if len(set(names)) != len(names) or "" in names:
            raise ValueError("optimizer parameters need unique, non-empty names")
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.state = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        grads = [p.grad for p in self.params]
        if self.clip_norm:
            norm = global_grad_norm(self.params)
            if norm > self.clip_norm:
                k = self.clip_norm / (norm + 1e-12)
                grads = [None if g is None else g * k for g in grads]
        adamw_step(self.params, grads, self.state, self.lr if lr is None else lr,
                   self.betas, self.eps, self.weight_decay)

    def state_arrays(self):
        out = {}
        for name, st in self.state.items():
            out[f"{name}::m"] = st["m"]
            out[f"{name}::v"] = st["v"]
            out[f"{name}::t"] = np.asarray(st["t"], dtype=np.int64)
        return out

    def load_state_arrays(self, arrays):
        self.state = {}
        for key, arr in arrays.items():
            name, kind = key.rsplit("::", 1)
            st = self.state.setdefault(name, {})
            st[kind] = int(arr) if kind == "t" else np.array(arr, dtype=np.float64)


def cosine_lr(step, total, base_lr, warmup=0, floor=0.1):
    """Linear warmup then cosine decay to ``floor * base_lr``."""
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(1, total - warmup)
    frac = min(1.0, (step - warmup) / span)
    return base_lr * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * frac)))
