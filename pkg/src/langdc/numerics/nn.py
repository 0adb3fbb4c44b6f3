"""Parameters, modules and the transformer building blocks shared by every model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fnmatch import fnmatch

import numpy as np

from . import ops
from .tensor import Tensor


class CapacityError(ValueError):
    """A sequence is longer than the positional table / configured context."""


class Parameter(Tensor):
    __slots__ = ("name",)

    def __init__(self, data, name="", trainable=True):
        super().__init__(data, requires_grad=trainable)
        self.name = name

    @property
    def trainable(self):
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag):
        self.requires_grad = bool(flag)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


class Module:
    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix=""):
        for name, p in self.named_parameters(prefix):
            p.name = name
        return self

    def set_trainable(self, patterns, flag=True):
        """Set trainability for parameters whose name matches any glob in ``patterns``."""
        hit = 0
        for name, p in self.named_parameters():
            if any(fnmatch(name, pat) for pat in patterns):
                p.trainable = flag
                hit += 1
        return hit

    def freeze(self):
        for p in self.parameters():
            p.trainable = False
        return self


def _normal(rng, shape, std):
    return rng.standard_normal(shape) * std


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True, std=0.02):
        self.weight = Parameter(_normal(rng, (n_out, n_in), std))
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    @property
    def n_in(self):
        return self.weight.shape[1]

    @property
    def n_out(self):
        return self.weight.shape[0]

    def __call__(self, x):
        return ops.linear(x, self.weight, self.bias)


def lora_apply(weight, a, b, alpha, r):
    """Effective weight ``W + (alpha / r) * B @ A`` for W (out, in), A (r, in), B (out, r)."""
    W, A, B = (np.asarray(m.data if isinstance(m, Tensor) else m, dtype=np.float64) for m in (weight, a, b))
    if r > min(W.shape):
        raise ValueError(f"LoRA rank {r} exceeds matrix dims {W.shape}")
    if A.shape != (r, W.shape[1]) or B.shape != (W.shape[0], r):
        raise ValueError(f"LoRA factors A{A.shape} B{B.shape} incompatible with W{W.shape}, r={r}")
    return W + (alpha / r) * (B @ A)


class LoRALinear(Module):
    """Linear layer with an optional low-rank additive path; B starts at zero."""

    def __init__(self, n_in, n_out, rng, bias=True):
        self.base = Linear(n_in, n_out, rng, bias=bias)
        self.lora_a = None
        self.lora_b = None
        self.scaling = 0.0
        self.alpha = 0.0
        self.rank = 0

    def enable_lora(self, rank, alpha, rng):
        if rank < 1 or rank > min(self.base.n_in, self.base.n_out):
            raise ValueError(f"LoRA rank {rank} invalid for {self.base.n_out}x{self.base.n_in}")
        self.rank = rank
        self.alpha = alpha
        self.scaling = alpha / rank
        bound = 1.0 / math.sqrt(self.base.n_in)
        self.lora_a = Parameter(rng.uniform(-bound, bound, (rank, self.base.n_in)))
        self.lora_b = Parameter(np.zeros((self.base.n_out, rank)))

    def effective_weight(self):
        if self.lora_a is None:
            return self.base.weight.data.copy()
        return lora_apply(self.base.weight, self.lora_a, self.lora_b, self.alpha, self.rank)

    def __call__(self, x):
        y = self.base(x)
        if self.lora_a is None:
            return y
        h = ops.linear(x, self.lora_a)
        return ops.add(y, ops.scale(ops.linear(h, self.lora_b), self.scaling))


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x):
        return ops.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, n, d, rng, std=0.02):
        self.weight = Parameter(_normal(rng, (n, d), std))

    def __call__(self, ids):
        return ops.embedding(self.weight, ids)


class MLP(Module):
    """Two-layer GELU map; used for every projector and transformer feed-forward."""

    def __init__(self, n_in, n_hidden, n_out, rng):
        self.fc1 = Linear(n_in, n_hidden, rng)
        self.fc2 = Linear(n_hidden, n_out, rng)

    @property
    def n_in(self):
        return self.fc1.n_in

    @property
    def n_out(self):
        return self.fc2.n_out

    def __call__(self, x):
        return self.fc2(ops.gelu(self.fc1(x)))


@dataclass
class KVCache:
    """Per-layer key/value arrays for incremental decoding (inference only)."""

    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)

    @property
    def length(self):
        return self.keys[0].shape[-2] if self.keys else 0


class SelfAttention(Module):
    def __init__(self, d, heads, rng, causal):
        if d % heads:
            raise ValueError(f"head count {heads} does not divide width {d}")
        self.heads = heads
        self.causal = causal
        self.wq = LoRALinear(d, d, rng)
        self.wk = LoRALinear(d, d, rng)
        self.wv = LoRALinear(d, d, rng)
        self.wo = LoRALinear(d, d, rng)

    def _split(self, t):
        B, N, d = t.shape
        return ops.transpose(ops.reshape(t, (B, N, self.heads, d // self.heads)), (0, 2, 1, 3))

    def qkv(self, x):
        return self._split(self.wq(x)), self._split(self.wk(x)), self._split(self.wv(x))

    def merge(self, o):
        B, h, N, dh = o.shape
        return self.wo(ops.reshape(ops.transpose(o, (0, 2, 1, 3)), (B, N, h * dh)))

    def __call__(self, x, cache=None, layer=0, key_mask=None):
        q, k, v = self.qkv(x)
        offset = 0
        if cache is not None:
            if len(cache.keys) > layer:
                offset = cache.keys[layer].shape[-2]
                k = Tensor(np.concatenate([cache.keys[layer], k.data], axis=-2))
                v = Tensor(np.concatenate([cache.values[layer], v.data], axis=-2))
                cache.keys[layer], cache.values[layer] = k.data, v.data
            else:
                cache.keys.append(k.data)
                cache.values.append(v.data)
        return self.merge(ops.attention(q, k, v, causal=self.causal, offset=offset, key_mask=key_mask))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, d, heads, rng, causal, ffn_mult=4):
        self.ln1 = LayerNorm(d)
        self.attn = SelfAttention(d, heads, rng, causal)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(d, ffn_mult * d, d, rng)

    def __call__(self, x, cache=None, layer=0, key_mask=None):
        x = ops.add(x, self.attn(self.ln1(x), cache=cache, layer=layer, key_mask=key_mask))
        return ops.add(x, self.mlp(self.ln2(x)))


def causal_self_attention(x, block_attn, context=None):
    """Single-sequence causal attention over (N, d) using a :class:`SelfAttention`'s weights."""
    if context is not None and x.shape[0] > context:
        raise CapacityError(f"sequence of {x.shape[0]} exceeds context length {context}")
    if not block_attn.causal:
        raise ValueError("attention module is not causal")
    out = block_attn(ops.reshape(x, (1,) + x.shape))
    return ops.reshape(out, x.shape)
