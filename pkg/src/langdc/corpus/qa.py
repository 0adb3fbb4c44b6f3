"""Multiple-choice questions answerable from a clip's symbolic state."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clips import Clip
from .vocab import COLORS, DIRECTIONS, LETTERS, NUMBERS, SHAPES, encode

QA_KINDS = ("existence", "count", "direction", "color")
MIN_QA_PER_CLIP = 4


@dataclass(frozen=True)
class QARecord:
    clip_id: str
    question: tuple
    kind: str
    options: tuple  # 4 token tuples
    correct_index: int

    def prompt_ids(self):
        """Question followed by lettered options and the answer cue."""
        ids = list(self.question) + encode(["options"])
        for letter, opt in zip(LETTERS, self.options):
            ids += encode([letter]) + list(opt)
        return ids + encode(["answer"])

    def answer_ids(self):
        return encode([LETTERS[self.correct_index]])


def _record(clip, kind, question, correct, distractors, rng):
    opts = [correct] + list(distractors)
    assert len(opts) == 4 and len(set(opts)) == 4
    order = rng.permutation(4)
    options = tuple(tuple(encode([opts[i]])) for i in order)
    return QARecord(clip.clip_id, tuple(encode(question)), kind, options, int(np.argmax(order == 0)))


def shape_count(clip, shape):
    return sum(1 for e in clip.entities if e.shape == shape)


def move_directions(clip, entity_id):
    return {ev.kind[len("move_"):] for ev in clip.events
            if ev.entity_id == entity_id and ev.kind.startswith("move_")}


def _existence(clip, rng, present):
    have = {(e.color, e.shape) for e in clip.entities}
    if present:
        e = clip.entities[int(rng.integers(len(clip.entities)))]
        color, shape, ans = e.color, e.shape, "yes"
    else:
        absent = [(c, s) for s in SHAPES for c in COLORS if (c, s) not in have]
        if not absent:
            return None
        color, shape = absent[int(rng.integers(len(absent)))]
        ans = "no"
    others = [w for w in ("yes", "no") if w != ans] + ["unknown", "maybe"]
    return _record(clip, "existence", ["is", "there", "a", color, shape, "?"], ans, others, rng)


def _count(clip, rng, shape):
    n = shape_count(clip, shape)
    pool = [k for k in range(len(NUMBERS)) if k != n]
    # nearby counts are the plausible mistakes
    pool.sort(key=lambda k: (abs(k - n), k))
    wrong = [NUMBERS[k] for k in pool[:3]]
    return _record(clip, "count", ["how", "many", shape, "?"], NUMBERS[n], wrong, rng)


def _direction(clip, rng):
    cands = [e for e in clip.entities if len(move_directions(clip, e.id)) == 1]
    if not cands:
        return None
    e = cands[int(rng.integers(len(cands)))]
    d = next(iter(move_directions(clip, e.id)))
    wrong = [x for x in DIRECTIONS if x != d]
    return _record(clip, "direction", ["which", "way", "does", "the", e.color, e.shape, "move", "?"],
                   d, wrong, rng)


def _color(clip, rng):
    cands = [e for e in clip.entities if shape_count(clip, e.shape) == 1]
    if not cands:
        return None
    e = cands[int(rng.integers(len(cands)))]
    wrong = [c for c in COLORS if c != e.color]
    wrong = [wrong[i] for i in rng.choice(len(wrong), size=3, replace=False)]
    return _record(clip, "color", ["what", "color", "is", "the", e.shape, "?"], e.color, wrong, rng)


def generate_qa(clip: Clip, seed) -> list:
    """At least four questions covering every answerable kind; unanswerable kinds are skipped."""
    rng = np.random.default_rng(seed)
    shapes = [SHAPES[i] for i in rng.permutation(len(SHAPES))]
    out = [
        _existence(clip, rng, present=True),
        _existence(clip, rng, present=False),
        _count(clip, rng, shapes[0]),
        _direction(clip, rng),
        _color(clip, rng),
    ]
    out = [q for q in out if q is not None]
    extra = 1
    while len(out) < MIN_QA_PER_CLIP:
        out.append(_count(clip, rng, shapes[extra]))
        extra += 1
    return out


def symbolic_answer(clip: Clip, qa: QARecord):
    """Answer word read directly from clip state, independent of the generator's bookkeeping."""
    from .vocab import decode

    words = decode(qa.question)
    if qa.kind == "existence":
        color, shape = words[3], words[4]
        return "yes" if any(e.color == color and e.shape == shape for e in clip.entities) else "no"
    if qa.kind == "count":
        return NUMBERS[shape_count(clip, words[2])]
    if qa.kind == "direction":
        color, shape = words[4], words[5]
        e = next(e for e in clip.entities if e.color == color and e.shape == shape)
        dirs = {ev.kind[5:] for ev in clip.events if ev.entity_id == e.id and ev.kind.startswith("move_")}
        return dirs.pop()
    if qa.kind == "color":
        shape = words[4]
        return next(e.color for e in clip.entities if e.shape == shape)
    raise ValueError(qa.kind)
