"""Frame and segment encoders over symbol grids, plus the projectors leaving them.

Both encoders embed each cell's symbol with a learned table and a learned 2-D
position. The frame encoder mixes cells within one frame only; the segment encoder
pools cells first and then attends across the four frames of a segment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus.clips import FRAMES_PER_SEGMENT, NUM_SEGMENTS, NUM_SYMBOLS
from .numerics import MLP, Block, LayerNorm, Module, Parameter, Tensor, ops
from .numerics.tensor import DimensionError


@dataclass(frozen=True)
class EncoderConfig:
    grid: int = 8
    image_grid: int = 8
    video_grid: int = 4
    embed_dim: int = 64
    layers: int = 1
    heads: int = 4
    num_symbols: int = NUM_SYMBOLS

    def __post_init__(self):
        if min(self.grid, self.image_grid, self.video_grid) < 1:
            raise ValueError("grid sides must be >= 1")
        if self.image_grid > self.grid or self.video_grid > self.grid:
            raise ValueError(f"encoder grids ({self.image_grid}, {self.video_grid}) exceed input grid {self.grid}")
        if self.embed_dim % self.heads:
            raise ValueError(f"heads={self.heads} must divide embed_dim={self.embed_dim}")

    @property
    def image_tokens_per_segment(self):
        return FRAMES_PER_SEGMENT * self.image_grid ** 2

    @property
    def video_tokens_per_segment(self):
        return FRAMES_PER_SEGMENT * self.video_grid ** 2


def adaptive_pool_matrix(g, out):
    """(out², g²) averaging matrix for adaptive pooling of a row-major g×g grid.

    Output cell i covers input rows ``[floor(i*g/out), ceil((i+1)*g/out))`` and the
    same window along columns.
    """
    if g < 1 or out < 1:
        raise ValueError("pool sides must be >= 1")
    m = np.zeros((out, g))
    for i in range(out):
        lo, hi = (i * g) // out, -(-((i + 1) * g) // out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return np.kron(m, m)


def pool_grid(x, g, out):
    """Adaptive average pooling of tokens laid out as (..., g*g, d)."""
    if x.shape[-2] != g * g:
        raise DimensionError(f"pool_grid: expected {g * g} tokens, got {x.shape[-2]}")
    if out == g:
        return x
    return ops.matmul(Tensor(adaptive_pool_matrix(g, out)), x)


def _check_symbols(frames, cfg):
    frames = np.asarray(frames)
    if frames.shape[-2:] != (cfg.grid, cfg.grid):
        raise DimensionError(f"frames must end in ({cfg.grid}, {cfg.grid}), got {frames.shape}")
    if frames.size and (frames.min() < 0 or frames.max() >= cfg.num_symbols):
        raise IndexError(f"symbol id outside [0, {cfg.num_symbols})")
    return frames.astype(np.int64)


class _CellEmbed(Module):
    def __init__(self, cfg, rng):
        self.symbols = Parameter(rng.standard_normal((cfg.num_symbols, cfg.embed_dim)) * 0.02)
        self.position = Parameter(rng.standard_normal((cfg.grid * cfg.grid, cfg.embed_dim)) * 0.02)

    def __call__(self, frames):
        lead = frames.shape[:-2]
        ids = frames.reshape(*lead, -1)
        return ops.add(ops.embedding(self.symbols, ids), self.position)


class FrameEncoder(Module):
    """Per-frame transformer over the G×G cells, pooled to Gi×Gi tokens."""

    def __init__(self, cfg: EncoderConfig, rng):
        self.cfg = cfg
        self.embed = _CellEmbed(cfg, rng)
        self.blocks = [Block(cfg.embed_dim, cfg.heads, rng, causal=False) for _ in range(cfg.layers)]
        self.ln = LayerNorm(cfg.embed_dim)

    def __call__(self, frames):
        """(..., G, G) symbol ids -> (..., Gi², d) tokens; frames never exchange information."""
        cfg = self.cfg
        frames = _check_symbols(frames, cfg)
        lead = frames.shape[:-2]
        x = self.embed(frames.reshape(-1, cfg.grid, cfg.grid))
        for blk in self.blocks:
            x = blk(x)
        x = pool_grid(self.ln(x), cfg.grid, cfg.image_grid)
        return ops.reshape(x, (*lead, cfg.image_grid ** 2, cfg.embed_dim))


class SegmentEncoder(Module):
    """Cells pooled to Gv×Gv per frame, then attention across all frames of a segment."""

    def __init__(self, cfg: EncoderConfig, rng):
        self.cfg = cfg
        self.embed = _CellEmbed(cfg, rng)
        self.time = Parameter(rng.standard_normal((FRAMES_PER_SEGMENT, cfg.embed_dim)) * 0.02)
        self.blocks = [Block(cfg.embed_dim, cfg.heads, rng, causal=False) for _ in range(cfg.layers)]
        self.ln = LayerNorm(cfg.embed_dim)

    def __call__(self, segments):
        """(..., 4, G, G) -> (..., 4·Gv², d), frame-major."""
        cfg = self.cfg
        segments = _check_symbols(segments, cfg)
        if segments.shape[-3] != FRAMES_PER_SEGMENT:
            raise DimensionError(f"a segment has {FRAMES_PER_SEGMENT} frames, got {segments.shape[-3]}")
        lead = segments.shape[:-3]
        gv2 = cfg.video_grid ** 2
        x = self.embed(segments.reshape(-1, FRAMES_PER_SEGMENT, cfg.grid, cfg.grid))
        x = ops.reshape(pool_grid(x, cfg.grid, cfg.video_grid), (-1, FRAMES_PER_SEGMENT * gv2, cfg.embed_dim))
        x = ops.add(x, ops.take(self.time, np.repeat(np.arange(FRAMES_PER_SEGMENT), gv2)))
        for blk in self.blocks:
            x = blk(x)
        x = self.ln(x)
        return ops.reshape(x, (*lead, FRAMES_PER_SEGMENT * gv2, cfg.embed_dim))


@dataclass
class SegmentFeatures:
    image_tokens: Tensor  # (4·Gi², d_enc)
    video_tokens: Tensor  # (4·Gv², d_enc)
    segment_index: int


class DualEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng):
        self.cfg = cfg
        self.frame = FrameEncoder(cfg, rng)
        self.segment = SegmentEncoder(cfg, rng)

    def encode_frames(self, segment_frames):
        """Image tokens for one or more segments: (..., 4, G, G) -> (..., 4·Gi², d)."""
        x = self.frame(segment_frames)
        lead = x.shape[:-3]
        return ops.reshape(x, (*lead, self.cfg.image_tokens_per_segment, self.cfg.embed_dim))

    def encode_segment(self, segment_frames):
        return self.segment(segment_frames)

    def encode_clip(self, frames):
        """Per-segment features for one 16-frame clip."""
        segs = np.asarray(frames).reshape(NUM_SEGMENTS, FRAMES_PER_SEGMENT, self.cfg.grid, self.cfg.grid)
        img, vid = self.encode_frames(segs), self.encode_segment(segs)
        return [SegmentFeatures(img[s], vid[s], s) for s in range(NUM_SEGMENTS)]


def projector(d_in, d_out, rng, hidden=None):
    """Two-layer GELU projector; biases start at zero."""
    return MLP(d_in, hidden or max(d_in, d_out), d_out, rng)


def project(proj, features):
    if features.shape[-1] != proj.n_in:
        raise DimensionError(f"projector expects width {proj.n_in}, got {features.shape[-1]}")
    return proj(features)


def project_to_cappruner(proj, features):
    return project(proj, features)


def project_to_llm(proj, features):
    return project(proj, features)
