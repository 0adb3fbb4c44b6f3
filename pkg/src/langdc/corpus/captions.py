"""Rule-based teacher captions and the supervision filter.

Each visible entity contributes a 3-token clause (color, shape, zone) and each event a
6-token clause (color, shape, verb, direction-or-in/out, ordinal frame, zone), so the
filtered length is exactly 3x the segment richness; an empty segment reads
"empty scene". The raw teacher output wraps clauses in articles, connectives and
hedges that :func:`filter_supervision` strips.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .clips import FRAMES_PER_SEGMENT, Clip
from .vocab import FILLER, FILLER_IDS, FILLER_WORDS, ORDINALS, VERBS, ZONES, encode

TEACHER_CAP = 100
TOKENS_PER_RICHNESS = 3


@dataclass(frozen=True)
class CaptionRecord:
    clip_id: str
    segment_index: int
    tokens: tuple
    raw_tokens: tuple

    def __len__(self):
        return len(self.tokens)


def zone_of(pos, grid):
    r, c = pos
    return ZONES[3 * min(2, r * 3 // grid) + min(2, c * 3 // grid)]


def _direction(kind):
    if kind.startswith("move_"):
        return kind[len("move_"):]
    return "in" if kind == "appear" else "out"


def _verb(kind):
    return VERBS["move" if kind.startswith("move_") else kind]


def content_clauses(clip: Clip, s: int):
    """Filtered clause word lists for segment ``s`` in canonical order."""
    seen = clip.visible_in_segment(s)
    if not seen:
        return [["empty", "scene"]]
    clauses = []
    # entities in raster order of where they are first seen in the segment
    for eid, (f, pos) in sorted(seen.items(), key=lambda kv: (kv[1][1], kv[0])):
        e = clip.entities[eid]
        clauses.append([e.color, e.shape, zone_of(pos, clip.grid)])
    for ev in sorted(clip.segment_events(s), key=lambda ev: (ev.frame_index, ev.entity_id)):
        e = clip.entities[ev.entity_id]
        f = ev.frame_index
        if ev.kind == "disappear":
            pos = clip.positions[f - 1][ev.entity_id]
        else:
            pos = clip.positions[f][ev.entity_id]
        clauses.append([e.color, e.shape, _verb(ev.kind), _direction(ev.kind),
                        ORDINALS[f % FRAMES_PER_SEGMENT - 1], zone_of(pos, clip.grid)])
    return clauses


def _dress(clauses, rng, empty):
    """Wrap content clauses in filler the way a verbose teacher would."""
    if empty:
        return ["an", "empty", "scene"]
    raw = []
    for i, cl in enumerate(clauses):
        if i:
            raw.append(FILLER["connective"][int(rng.integers(len(FILLER["connective"])))])
        if rng.random() < 0.3:
            raw.append(FILLER["speculative"][int(rng.integers(len(FILLER["speculative"])))])
        if len(cl) == 3:
            raw += ["there", "is", "a", cl[0], cl[1], "at", "the", cl[2]]
        else:
            raw += ["the", cl[0], cl[1], cl[2], cl[3], "at", "the", cl[4], "near", cl[5]]
    return raw


def filter_supervision(raw_tokens):
    """Drop filler ids/words, keeping content tokens in order."""
    out = []
    for t in raw_tokens:
        if isinstance(t, str):
            if t not in FILLER_WORDS:
                out.append(t)
        elif t not in FILLER_IDS:
            out.append(t)
    return out


def teacher_caption(clip: Clip, segment_index: int) -> CaptionRecord:
    clauses = content_clauses(clip, segment_index)
    empty = clauses == [["empty", "scene"]]
    seed = zlib.crc32(f"{clip.clip_id}/{segment_index}".encode())
    raw = encode(_dress(clauses, np.random.default_rng(seed), empty))
    tokens = filter_supervision(raw)
    if len(tokens) > TEACHER_CAP:
        raise ValueError(f"caption of {len(tokens)} tokens exceeds teacher cap {TEACHER_CAP}")
    return CaptionRecord(clip.clip_id, segment_index, tuple(tokens), tuple(raw))


def expected_length(segment_richness):
    """Filtered caption length implied by the clause grammar."""
    return 2 if segment_richness == 0 else TOKENS_PER_RICHNESS * segment_richness
