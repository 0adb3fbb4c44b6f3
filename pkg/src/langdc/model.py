"""The full model: encoders, projectors, both pruners, the base LLM and its adapters."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .assembly import BaseLLM, LlmConfig, LoraConfig
from .corpus.clips import NUM_SEGMENTS
from .corpus.vocab import LLM_WORDS
from .encoders import DualEncoder, EncoderConfig, projector
from .numerics import Module, ops
from .pruners import BasePrunerConfig, CapPruner, CapPrunerConfig, base_tokens


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    base_pruner: BasePrunerConfig = field(default_factory=BasePrunerConfig)
    cap_pruner: CapPrunerConfig = field(default_factory=CapPrunerConfig)
    llm: LlmConfig = field(default_factory=LlmConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    projector_hidden: int = 128

    def __post_init__(self):
        # the captioner prefix is one segment of image then video tokens
        prefix = self.encoder.image_tokens_per_segment + self.encoder.video_tokens_per_segment
        if self.cap_pruner.prefix_len != prefix:
            object.__setattr__(self, "cap_pruner", CapPrunerConfig(**{**asdict(self.cap_pruner), "prefix_len": prefix}))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        lora = dict(d["lora"])
        lora["targets"] = tuple(lora["targets"])
        return cls(EncoderConfig(**d["encoder"]), BasePrunerConfig(**d["base_pruner"]),
                   CapPrunerConfig(**d["cap_pruner"]), LlmConfig(**d["llm"]), LoraConfig(**lora),
                   d["projector_hidden"])


class ModelBundle(Module):
    def __init__(self, cfg: ModelConfig, seed=0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        e, c, l = cfg.encoder, cfg.cap_pruner, cfg.llm
        self.encoders = DualEncoder(e, rng)
        self.proj_cap = projector(e.embed_dim, c.embed_dim, rng, cfg.projector_hidden)
        self.proj_llm = projector(e.embed_dim, l.embed_dim, rng, cfg.projector_hidden)
        self.cappruner = CapPruner(c, rng)
        self.post_proj = projector(c.embed_dim, l.embed_dim, rng, cfg.projector_hidden)
        self.llm = BaseLLM(l, rng)
        self.llm.enable_lora(cfg.lora, rng)
        self.assign_names()
        self.freeze()

    # architecture identity ----------------------------------------------------------
    def digest(self):
        """Hash of parameter names/shapes and the token table; equal digests load safely."""
        spec = [(n, list(p.shape)) for n, p in self.named_parameters()]
        blob = json.dumps({"params": spec, "vocab": LLM_WORDS}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def state_arrays(self):
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_arrays(self, arrays):
        params = dict(self.named_parameters())
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)[:3]}...")
        for n, p in params.items():
            if arrays[n].shape != p.shape:
                raise ValueError(f"{n}: shape {arrays[n].shape} != {p.shape}")
            p.data = np.array(arrays[n], dtype=np.float64)

    # forward pieces -------------------------------------------------------------------
    def encode(self, frames):
        """(B, 16, G, G) -> image (B, 4, 4·Gi², d_enc), video (B, 4, 4·Gv², d_enc)."""
        g = self.cfg.encoder.grid
        segs = np.asarray(frames).reshape(-1, NUM_SEGMENTS, 4, g, g)
        return self.encoders.encode_frames(segs), self.encoders.encode_segment(segs)

    def encode_segments(self, segment_frames):
        """(B, 4, G, G) -> image (B, 4·Gi², d_enc), video (B, 4·Gv², d_enc)."""
        return self.encoders.encode_frames(segment_frames), self.encoders.encode_segment(segment_frames)

    def cap_prefix(self, image, video):
        """Captioner prefix per segment: projected image tokens then video tokens."""
        return self.proj_cap(ops.concat([image, video], axis=-2))

    def pooled_base(self, image, video, stride=None):
        stride = self.cfg.base_pruner.stride if stride is None else stride
        return base_tokens(image, video, self.cfg.encoder, stride)

    def base_llm_tokens(self, pooled):
        return self.proj_llm(pooled)
