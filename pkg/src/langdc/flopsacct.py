"""Analytic prefill FLOPs for a pooled-token baseline and the caption-pruned pipeline.

Per layer a prefill over N tokens costs 8·N·d² for the four attention projections,
4·N²·d for scores and mixing, and 4·N·d·f for the two-matrix feed-forward; the
output head adds 2·N·d·V. A multiply-add counts as two FLOPs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

from .errors import ConfigError

FORMULA_VERSION = "prefill-v1"


@dataclass(frozen=True)
class ArchProfile:
    name: str
    layers: int
    hidden: int
    ffn: int
    vocab: int

    def __post_init__(self):
        for k in ("layers", "hidden", "ffn", "vocab"):
            if getattr(self, k) < 1:
                raise ConfigError(f"profile {self.name!r}: {k} must be positive")


# published dimensions of the two backbones
QWEN25_3B = ArchProfile("qwen2.5-3b", 36, 2048, 11008, 151936)
QWEN25_05B = ArchProfile("qwen2.5-0.5b", 24, 896, 4864, 151936)


def attention_term(arch, n):
    return arch.layers * 4 * n * n * arch.hidden


def prefill_flops(arch: ArchProfile, n_tokens):
    if n_tokens < 0:
        raise ValueError("token count must be >= 0")
    L, d, f, V, n = arch.layers, arch.hidden, arch.ffn, arch.vocab, n_tokens
    return L * (8 * n * d * d + 4 * n * n * d + 4 * n * d * f) + 2 * n * d * V


@dataclass(frozen=True)
class TokenPlan:
    """Tokens entering each stage. ``cap_prefix`` is the captioner's visual prefix per segment."""

    baseline_tokens: int = 3328
    base_tokens: int = 832
    cap_lengths: tuple = (59, 59, 59, 59)
    cap_prefix: tuple = (832, 832, 832, 832)
    text_tokens: int = 64
    answer_tokens: int = 0  # generated answer tokens, charged as extra prefill when > 0
    encoder_tokens: int = 0  # visual tokens through an encoder profile, when one is given

    def __post_init__(self):
        if len(self.cap_lengths) != len(self.cap_prefix):
            raise ConfigError("cap_lengths and cap_prefix need one entry per segment")
        vals = [self.baseline_tokens, self.base_tokens, self.text_tokens, self.answer_tokens,
                self.encoder_tokens, *self.cap_lengths, *self.cap_prefix]
        if min(vals) < 0:
            raise ConfigError("token counts must be >= 0")


@dataclass
class FlopsReport:
    components: dict = field(default_factory=dict)  # pipeline -> {component: flops}
    tokens: dict = field(default_factory=dict)
    version: str = FORMULA_VERSION

    def total(self, pipeline):
        return sum(self.components[pipeline].values())

    @property
    def ratio(self):
        return self.total("langdc") / self.total("baseline")

    def rows(self):
        out = []
        for pipe, comps in self.components.items():
            for name, v in comps.items():
                out.append({"pipeline": pipe, "component": name, "flops": v})
            out.append({"pipeline": pipe, "component": "total", "flops": self.total(pipe)})
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["pipeline", "component", "flops", "version"])
            w.writeheader()
            for r in self.rows():
                w.writerow({**r, "flops": f"{r['flops']:.6e}", "version": self.version})


def pipeline_flops(llm: ArchProfile, cap: ArchProfile, plan: TokenPlan, encoder: ArchProfile | None = None):
    """FLOPs of the baseline and the caption-pruned pipeline under one plan.

    Captioner decoding is charged as one prefill over prefix plus emitted tokens per
    segment, an upper bound on cached decoding.
    """
    answer = plan.answer_tokens
    base = {"llm_prefill": prefill_flops(llm, plan.baseline_tokens + plan.text_tokens + answer)}
    ours = {
        "llm_prefill": prefill_flops(llm, plan.base_tokens + sum(plan.cap_lengths) + plan.text_tokens + answer),
        "cappruner": sum(prefill_flops(cap, p + n) for p, n in zip(plan.cap_prefix, plan.cap_lengths)),
    }
    if encoder is not None:
        enc = prefill_flops(encoder, plan.encoder_tokens)
        base["encoders"] = enc
        ours["encoders"] = enc
    tokens = {
        "baseline_visual": plan.baseline_tokens,
        "langdc_visual": plan.base_tokens + sum(plan.cap_lengths),
        "text": plan.text_tokens,
        "answer": answer,
    }
    return FlopsReport({"baseline": base, "langdc": ours}, tokens)


def profile_from_dict(name, d):
    try:
        return ArchProfile(name, int(d["layers"]), int(d["hidden"]), int(d["ffn"]), int(d["vocab"]))
    except KeyError as e:
        raise ConfigError(f"profile {name!r} lacks key {e.args[0]}") from None


def plan_from_dict(d):
    known = set(TokenPlan.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown plan keys: {sorted(unknown)}")
    kw = dict(d)
    for k in ("cap_lengths", "cap_prefix"):
        if k in kw:
            kw[k] = tuple(int(x) for x in kw[k])
    return TokenPlan(**kw)
