"""Fixed-ratio pooling and the captioner used as a variable-length token pruner.

The captioner is a small causal decoder that reads a segment's visual tokens as a
prefix and writes a caption. The hidden state of every caption token it writes, taken
at the tap layer and mapped by the post projector, becomes one soft visual token, so
a segment costs as many tokens as its caption is long.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus.clips import FRAMES_PER_SEGMENT, NUM_FRAMES
from .corpus.vocab import BOS_ID, CAPTION_VOCAB_SIZE, EOS_ID, PAD_ID
from .encoders import pool_grid
from .errors import ConfigError
from .numerics import Block, KVCache, LayerNorm, Linear, Module, Parameter, Tensor, no_tape, ops
from .numerics.tensor import DimensionError

# ids the decoder may never emit; everything else is a caption token or the stop symbol
UNEMITTABLE = (PAD_ID, BOS_ID)


def pooled_side(g, stride):
    if g < 1 or stride < 1:
        raise ConfigError("grid side and stride must be >= 1")
    return -(-g // stride)


def base_token_count(image_grid, video_grid, stride, frames=NUM_FRAMES):
    """Tokens left after pooling both encoders' grids for every frame."""
    return frames * (pooled_side(image_grid, stride) ** 2 + pooled_side(video_grid, stride) ** 2)


def base_prune(tokens, grid, stride):
    """Pool (..., grid², d) tokens of one frame grid to (..., ceil(grid/stride)², d)."""
    return pool_grid(tokens, grid, pooled_side(grid, stride))


@dataclass(frozen=True)
class BasePrunerConfig:
    stride: int = 2

    def __post_init__(self):
        if self.stride < 1:
            raise ConfigError(f"base_pruner.stride must be >= 1, got {self.stride}")


def base_tokens(image, video, enc_cfg, stride):
    """Pooled base tokens per clip, segment by segment, image before video.

    ``image`` is (..., S, 4·Gi², d) and ``video`` (..., S, 4·Gv², d) as produced by the
    encoders; the result is (..., S·4·(si² + sv²), d).
    """
    gi, gv, d = enc_cfg.image_grid, enc_cfg.video_grid, image.shape[-1]
    lead = image.shape[:-2]
    img = ops.reshape(image, (*lead, FRAMES_PER_SEGMENT, gi * gi, d))
    vid = ops.reshape(video, (*lead, FRAMES_PER_SEGMENT, gv * gv, d))
    img = base_prune(img, gi, stride)
    vid = base_prune(vid, gv, stride)
    img = ops.reshape(img, (*lead, -1, d))
    vid = ops.reshape(vid, (*lead, -1, d))
    seg = ops.concat([img, vid], axis=-2)  # (..., S, per-seg, d)
    S = lead[-1]
    return ops.reshape(seg, (*lead[:-1], S * seg.shape[-2], d))


@dataclass(frozen=True)
class CapPrunerConfig:
    layers: int = 4
    embed_dim: int = 64
    heads: int = 4
    vocab: int = CAPTION_VOCAB_SIZE
    max_tokens: int = 128
    tap_layer: int = -1  # -1 selects the middle block
    prefix_len: int = 512

    def __post_init__(self):
        if self.tap_layer == -1:
            object.__setattr__(self, "tap_layer", self.layers // 2)
        if not 0 <= self.tap_layer <= self.layers:
            raise ConfigError(f"cap_pruner.tap_layer={self.tap_layer} outside [0, {self.layers}]")
        if self.max_tokens < 1:
            raise ConfigError("cap_pruner.max_tokens must be >= 1")
        if self.embed_dim % self.heads:
            raise ConfigError(f"cap_pruner.heads={self.heads} must divide embed_dim={self.embed_dim}")

    @property
    def context(self):
        return self.prefix_len + 1 + self.max_tokens


@dataclass
class CompressedSegment:
    soft_tokens: Tensor  # (n, d_out) after the post projector, or tap states without one
    caption_ids: tuple
    length: int
    segment_index: int
    mode: str  # "free_running" | "teacher_forced"
    tap_states: np.ndarray = field(repr=False, default=None)  # (n, d_cap) before projection
    warnings: list = field(default_factory=list)


class CapPruner(Module):
    def __init__(self, cfg: CapPrunerConfig, rng):
        self.cfg = cfg
        d = cfg.embed_dim
        self.tok = Parameter(rng.standard_normal((cfg.vocab, d)) * 0.02)
        self.pos = Parameter(rng.standard_normal((cfg.context, d)) * 0.02)
        self.blocks = [Block(d, cfg.heads, rng, causal=True) for _ in range(cfg.layers)]
        self.ln_f = LayerNorm(d)
        self.head = Linear(d, cfg.vocab, rng, bias=False)

    # forward pieces -------------------------------------------------------------
    def _embed(self, prefix, ids, start=0):
        """Concatenate the visual prefix (may be None) with token embeddings, add positions."""
        ids = np.asarray(ids, dtype=np.int64)
        parts = [] if prefix is None else [prefix]
        if ids.shape[-1]:
            parts.append(ops.embedding(self.tok, ids))
        x = parts[0] if len(parts) == 1 else ops.concat(parts, axis=1)
        n = x.shape[1]
        if start + n > self.cfg.context:
            raise DimensionError(f"captioner context {self.cfg.context} exceeded ({start + n})")
        return ops.add(x, ops.getitem(self.pos, slice(start, start + n)))

    def _check_prefix(self, prefix):
        if prefix.ndim != 3 or prefix.shape[1:] != (self.cfg.prefix_len, self.cfg.embed_dim):
            raise DimensionError(
                f"captioner prefix must be (B, {self.cfg.prefix_len}, {self.cfg.embed_dim}), got {prefix.shape}")

    def hidden_states(self, prefix, ids, taps=(), cache=None, start=0):
        """Run the decoder; returns (final residual states, {layer: states})."""
        x = self._embed(prefix, ids, start)
        saved = {0: x} if 0 in taps else {}
        for i, blk in enumerate(self.blocks, start=1):
            x = blk(x, cache=cache, layer=i - 1)
            if i in taps:
                saved[i] = x
        return x, saved

    def logits(self, h):
        return self.head(self.ln_f(h))

    def tap_hidden(self, prefix, ids, layer):
        """Residual states after block ``layer`` (0 = embeddings) for the whole sequence."""
        if not 0 <= layer <= self.cfg.layers:
            raise ConfigError(f"tap layer {layer} outside [0, {self.cfg.layers}]")
        self._check_prefix(prefix)
        return self.hidden_states(prefix, ids, taps=(layer,))[1][layer]

    # the three captioner operations ---------------------------------------------
    def caption_loss(self, prefix, golds):
        """Token-mean cross-entropy of ``gold + EOS`` given ``BOS + gold``; prefix positions carry no loss."""
        self._check_prefix(prefix)
        if prefix.shape[0] != len(golds):
            raise DimensionError(f"{prefix.shape[0]} prefixes for {len(golds)} captions")
        golds = [list(g)[: self.cfg.max_tokens] for g in golds]
        T = max(len(g) for g in golds) + 1
        inputs = np.full((len(golds), T), PAD_ID, dtype=np.int64)
        targets = np.full((len(golds), T), -100, dtype=np.int64)
        for b, g in enumerate(golds):
            inputs[b, : len(g) + 1] = [BOS_ID] + g
            targets[b, : len(g) + 1] = g + [EOS_ID]
        h, _ = self.hidden_states(prefix, inputs)
        P = self.cfg.prefix_len
        return ops.cross_entropy(self.logits(ops.getitem(h, (slice(None), slice(P, None)))), targets)

    def teacher_forced(self, prefix, gold, post=None, segment_index=0, tap_layer=None):
        """One pass with the gold caption as the decoded sequence (prefix is (P, d) or (1, P, d))."""
        if prefix.ndim == 2:
            prefix = ops.reshape(prefix, (1,) + prefix.shape)
        self._check_prefix(prefix)
        tap = self.cfg.tap_layer if tap_layer is None else tap_layer
        gold = [int(t) for t in gold]
        warnings = []
        if len(gold) > self.cfg.max_tokens:
            warnings.append(f"gold caption of {len(gold)} tokens truncated to {self.cfg.max_tokens}")
            gold = gold[: self.cfg.max_tokens]
        n, P = len(gold), self.cfg.prefix_len
        states = self.tap_hidden(prefix, [[BOS_ID] + gold], tap)
        # soft token t is the state at the position holding caption token t
        tapped = ops.reshape(ops.getitem(states, (0, slice(P + 1, P + 1 + n))), (n, self.cfg.embed_dim))
        soft = post(tapped) if post is not None and n else tapped
        return CompressedSegment(soft, tuple(gold), n, segment_index, "teacher_forced",
                                 tap_states=tapped.data, warnings=warnings)

    def decode_ids(self, prefix, max_tokens=None):
        """Batched greedy decode with a key/value cache; returns one id list per row.

        A row stops when it emits EOS (not included) or holds ``max_tokens`` ids.
        """
        self._check_prefix(prefix)
        cap = self.cfg.max_tokens if max_tokens is None else min(max_tokens, self.cfg.max_tokens)
        B, P = prefix.shape[0], self.cfg.prefix_len
        out = [[] for _ in range(B)]
        done = np.zeros(B, dtype=bool)
        with no_tape():
            cache = KVCache()
            h, _ = self.hidden_states(prefix, np.full((B, 1), BOS_ID), cache=cache)
            for t in range(cap):
                logits = self.logits(ops.getitem(h, (slice(None), -1))).data.copy()
                logits[:, UNEMITTABLE] = -np.inf
                nxt = logits.argmax(axis=-1)
                for b in np.nonzero(~done)[0]:
                    if nxt[b] == EOS_ID:
                        done[b] = True
                    else:
                        out[b].append(int(nxt[b]))
                if done.all() or t == cap - 1:
                    break
                h, _ = self.hidden_states(None, nxt[:, None], cache=cache, start=P + 1 + t)
        return out

    def free_running(self, prefix, post=None, tap_layer=None, with_states=True):
        """Greedy captions for a batch of prefixes, as :class:`CompressedSegment` records.

        Soft tokens are read from one pass over each finished sequence, which is the
        teacher-forced computation on the emitted ids.
        """
        if prefix.ndim == 2:
            prefix = ops.reshape(prefix, (1,) + prefix.shape)
        ids = self.decode_ids(prefix)
        segs = []
        with no_tape():
            for b, row in enumerate(ids):
                if with_states:
                    seg = self.teacher_forced(ops.getitem(prefix, slice(b, b + 1)), row, post=post,
                                              segment_index=b, tap_layer=tap_layer)
                else:
                    seg = CompressedSegment(None, tuple(row), len(row), b, "free_running")
                seg.mode = "free_running"
                segs.append(seg)
        return segs


def cap_prune_free_running(model: CapPruner, prefix, post=None):
    return model.free_running(prefix, post=post)


def cap_prune_teacher_forced(model: CapPruner, prefix, gold, post=None, segment_index=0):
    return model.teacher_forced(prefix, gold, post=post, segment_index=segment_index)


def caption_loss(model: CapPruner, prefix, golds):
    return model.caption_loss(prefix, golds)


def tap_hidden(model: CapPruner, prefix, ids, layer):
    return model.tap_hidden(prefix, ids, layer)
