"""The small base language model, its LoRA adapters, and prompt assembly.

A prompt is laid out as ``[base tokens][cap tokens seg0..seg3][question tokens]``.
Training and batched evaluation use :func:`shared_prefix_hidden`, which runs each
clip's visual prefix once and lets all of that clip's question rows attend to it;
the result equals running every question as its own full sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus.vocab import EOS_ID, LETTER_IDS, LLM_VOCAB_SIZE, PAD_ID
from .errors import ConfigError
from .numerics import Block, CapacityError, LayerNorm, Linear, Module, Parameter, no_tape, ops


@dataclass(frozen=True)
class LlmConfig:
    layers: int = 6
    embed_dim: int = 96
    heads: int = 4
    vocab: int = LLM_VOCAB_SIZE
    context: int = 768
    max_answer_tokens: int = 2

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ConfigError(f"llm.heads={self.heads} must divide embed_dim={self.embed_dim}")
        if self.context < 1 or self.layers < 1:
            raise ConfigError("llm.context and llm.layers must be >= 1")


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    targets: tuple = ("wq", "wk", "wv", "wo")

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"lora.rank must be >= 1, got {self.rank}")
        bad = set(self.targets) - {"wq", "wk", "wv", "wo"}
        if bad:
            raise ConfigError(f"lora.targets has non-attention matrices {sorted(bad)}")


class BaseLLM(Module):
    def __init__(self, cfg: LlmConfig, rng):
        self.cfg = cfg
        d = cfg.embed_dim
        self.tok = Parameter(rng.standard_normal((cfg.vocab, d)) * 0.02)
        self.pos = Parameter(rng.standard_normal((cfg.context, d)) * 0.02)
        self.blocks = [Block(d, cfg.heads, rng, causal=True) for _ in range(cfg.layers)]
        self.ln_f = LayerNorm(d)
        self.head = Linear(d, cfg.vocab, rng, bias=False)

    def enable_lora(self, lcfg: LoraConfig, rng):
        if lcfg.rank > self.cfg.embed_dim:
            raise ConfigError(f"lora.rank={lcfg.rank} exceeds llm width {self.cfg.embed_dim}")
        for blk in self.blocks:
            for name in lcfg.targets:
                getattr(blk.attn, name).enable_lora(lcfg.rank, lcfg.alpha, rng)

    def embed_ids(self, ids):
        return ops.embedding(self.tok, np.asarray(ids, dtype=np.int64))

    def positions(self, start, n):
        if start + n > self.cfg.context:
            raise CapacityError(f"sequence of {start + n} exceeds llm context {self.cfg.context}")
        return ops.getitem(self.pos, slice(start, start + n))

    def run(self, x):
        """Causal pass over already embedded (B, N, d) inputs (positions included)."""
        for blk in self.blocks:
            x = blk(x)
        return x

    def logits(self, h):
        return self.head(self.ln_f(h))


# prompt assembly ------------------------------------------------------------------

@dataclass
class PromptLayout:
    spans: list = field(default_factory=list)  # (name, start, end), contiguous

    @property
    def total(self):
        return self.spans[-1][2] if self.spans else 0

    def span(self, name):
        for n, a, b in self.spans:
            if n == name:
                return a, b
        raise KeyError(name)

    def origin(self, position):
        for n, a, b in self.spans:
            if a <= position < b:
                return n
        raise IndexError(position)

    def lengths(self):
        return {n: b - a for n, a, b in self.spans}


def layout_for(base_len, cap_lens, question_len):
    spans, at = [], 0
    for name, n in [("base", base_len)] + [(f"cap{i}", c) for i, c in enumerate(cap_lens)] + [("question", question_len)]:
        spans.append((name, at, at + n))
        at += n
    return PromptLayout(spans)


def aggregate_tokens(llm: BaseLLM, base, segments, question_ids):
    """Embed one prompt: base tokens, then cap tokens in segment order, then the question.

    ``base`` is a (Nb, d_llm) tensor already in the LLM's space; segments are
    :class:`~langdc.pruners.CompressedSegment` records with projected soft tokens.
    """
    idx = [s.segment_index for s in segments]
    if idx != sorted(idx):
        raise ValueError(f"segments out of temporal order: {idx}")
    layout = layout_for(base.shape[0], [s.length for s in segments], len(question_ids))
    if layout.total > llm.cfg.context:
        # name the span that crosses the limit
        over = next(n for n, a, b in layout.spans if b > llm.cfg.context)
        raise CapacityError(f"prompt of {layout.total} tokens overflows llm context {llm.cfg.context} in span {over!r}")
    parts = [base] + [s.soft_tokens for s in segments if s.length] + [llm.embed_ids(question_ids)]
    parts = [p for p in parts if p.shape[0]]
    x = ops.concat(parts, axis=0) if len(parts) > 1 else parts[0]
    return layout, ops.add(x, llm.positions(0, layout.total))


def answer_generate(llm: BaseLLM, embedded, max_tokens=None):
    """Greedy answer ids for one embedded prompt (EOS ends decoding and is dropped)."""
    cap = llm.cfg.max_answer_tokens if max_tokens is None else max_tokens
    out = []
    with no_tape():
        x = embedded
        for _ in range(cap):
            h = llm.run(ops.reshape(x, (1,) + x.shape))
            nxt = int(llm.logits(ops.getitem(h, (0, -1))).data.argmax())
            if nxt == EOS_ID:
                break
            out.append(nxt)
            step = ops.add(llm.embed_ids([nxt]), llm.positions(x.shape[0], 1))
            x = ops.concat([x, step], axis=0)
    return out


# shared-prefix batching -------------------------------------------------------------

def shared_prefix_hidden(llm: BaseLLM, prefixes, owners, rows):
    """Final hidden states of text rows that each continue one visual prefix.

    ``prefixes`` is a list of (n_c, d) tensors; row m holds token ids ``rows[m]``
    and continues prefix ``owners[m]``. Returns a (M, T, d) tensor, T the longest row.
    """
    cfg = llm.cfg
    owners = np.asarray(owners, dtype=np.int64)
    plens = np.array([p.shape[0] for p in prefixes], dtype=np.int64)
    P = int(plens.max()) if len(plens) else 0
    T = max(len(r) for r in rows)
    if int((plens[owners] + np.array([len(r) for r in rows])).max()) > cfg.context:
        raise CapacityError(f"prompt exceeds llm context {cfg.context}")
    ids = np.full((len(rows), T), PAD_ID, dtype=np.int64)
    for m, r in enumerate(rows):
        ids[m, : len(r)] = r
    pos_idx = plens[owners][:, None] + np.arange(T)[None, :]
    hq = ops.add(llm.embed_ids(ids), ops.reshape(ops.take(llm.pos, np.minimum(pos_idx, cfg.context - 1).reshape(-1)),
                                                 (len(rows), T, cfg.embed_dim)))
    if P == 0:
        return llm.run(hq)
    hp = ops.add(ops.pad_stack(prefixes, P), llm.positions(0, P))
    mask = np.ones((len(rows), P + T), dtype=bool)
    mask[:, :P] = np.arange(P)[None, :] < plens[owners][:, None]
    last = len(llm.blocks) - 1
    for i, blk in enumerate(llm.blocks):
        attn = blk.attn
        qp, kp, vp = attn.qkv(blk.ln1(hp))
        qq, kq, vq = attn.qkv(blk.ln1(hq))
        k = ops.concat([ops.take(kp, owners, 0), kq], axis=2)
        v = ops.concat([ops.take(vp, owners, 0), vq], axis=2)
        hq = ops.add(hq, attn.merge(ops.attention(qq, k, v, causal=True, offset=P, key_mask=mask)))
        hq = ops.add(hq, blk.mlp(blk.ln2(hq)))
        if i < last:
            # the prefix's own outputs are not needed after the last block's keys/values
            hp = ops.add(hp, attn.merge(ops.attention(qp, kp, vp, causal=True)))
            hp = ops.add(hp, blk.mlp(blk.ln2(hp)))
    return hq


def gather_logits(llm, hidden, at):
    """Logits at (row, position) pairs of a (M, T, d) hidden tensor."""
    M, T, d = hidden.shape
    rows, cols = np.asarray(at[0]), np.asarray(at[1])
    flat = ops.take(ops.reshape(hidden, (M * T, d)), rows * T + cols, 0)
    return llm.logits(flat)


def sequence_loss(llm, prefixes, owners, inputs, targets):
    """Mean next-token cross-entropy on text rows continuing visual prefixes.

    ``targets[m]`` aligns with ``inputs[m]``; ``-100`` marks positions without loss.
    """
    h = shared_prefix_hidden(llm, prefixes, owners, inputs)
    rows, cols, tgt = [], [], []
    for m, t in enumerate(targets):
        for j, y in enumerate(t):
            if y != -100:
                rows.append(m)
                cols.append(j)
                tgt.append(y)
    return ops.cross_entropy(gather_logits(llm, h, (rows, cols)), np.array(tgt))


def answer_batch(llm, prefixes, owners, prompts, max_tokens=None):
    """Greedy answers for many prompts sharing per-clip prefixes."""
    cap = llm.cfg.max_answer_tokens if max_tokens is None else max_tokens
    rows = [list(p) for p in prompts]
    out = [[] for _ in rows]
    live = list(range(len(rows)))
    with no_tape():
        for _ in range(cap):
            if not live:
                break
            h = shared_prefix_hidden(llm, prefixes, [owners[m] for m in live], [rows[m] for m in live])
            at = ([i for i in range(len(live))], [len(rows[m]) - 1 for m in live])
            nxt = gather_logits(llm, h, at).data.argmax(axis=-1)
            still = []
            for m, y in zip(live, nxt):
                if y == EOS_ID:
                    continue
                out[m].append(int(y))
                rows[m].append(int(y))
                still.append(m)
            live = still
    return out


def choose_option(answer_ids, qa):
    """Option index picked by emitted ids: a leading letter, else an exact option match."""
    if answer_ids and answer_ids[0] in LETTER_IDS:
        return LETTER_IDS.index(answer_ids[0])
    for i, opt in enumerate(qa.options):
        if list(answer_ids) == list(opt):
            return i
    return None


def answer_targets(qa):
    """(input row, target row) teaching the letter then EOS after the prompt."""
    prompt, ans = qa.prompt_ids(), qa.answer_ids()
    inputs = prompt + ans
    targets = [-100] * (len(prompt) - 1) + ans + [EOS_ID]
    return inputs, targets


__all__ = [
    "BaseLLM", "LlmConfig", "LoraConfig", "PromptLayout", "aggregate_tokens", "answer_batch",
    "answer_generate", "answer_targets", "choose_option", "gather_logits", "layout_for",
    "sequence_loss", "shared_prefix_hidden",
]
