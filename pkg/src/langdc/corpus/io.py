"""Line-delimited corpus files: ``clips.jsonl``, ``captions.jsonl``, ``qa.jsonl``.

Every file starts with a header line ``{"format": "langdc-corpus", "kind": ..., "version": 1}``
followed by one JSON record per line. See ``docs/corpus_schema.md``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DataError
from .captions import CaptionRecord, teacher_caption
from .clips import NUM_SEGMENTS, Clip, Entity, MotionEvent, generate_clip
from .qa import QARecord, generate_qa

FORMAT = "langdc-corpus"
VERSION = 1
FILES = {"clips": "clips.jsonl", "captions": "captions.jsonl", "qa": "qa.jsonl"}


class CorpusFormatError(DataError):
    def __init__(self, path, line, msg):
        super().__init__(f"{path}:{line}: {msg}")
        self.path = str(path)
        self.line = line


@dataclass
class Corpus:
    clips: list = field(default_factory=list)
    captions: list = field(default_factory=list)
    qa: list = field(default_factory=list)

    def __post_init__(self):
        self._index()

    def _index(self):
        self.by_id = {c.clip_id: c for c in self.clips}
        self.caption_index = {(r.clip_id, r.segment_index): r for r in self.captions}
        self.qa_index = {}
        for q in self.qa:
            self.qa_index.setdefault(q.clip_id, []).append(q)

    def caption(self, clip_id, s):
        return self.caption_index[(clip_id, s)]

    def subset(self, clip_ids):
        keep = set(clip_ids)
        return Corpus([c for c in self.clips if c.clip_id in keep],
                      [r for r in self.captions if r.clip_id in keep],
                      [q for q in self.qa if q.clip_id in keep])

    def __eq__(self, other):
        return (isinstance(other, Corpus) and self.clips == other.clips
                and self.captions == other.captions and self.qa == other.qa)


def build_corpus(seed, num_clips, richness_range=(1, 24), grid=8):
    """Clip ``i`` uses seed ``seed * 1_000_003 + i`` so corpora of different sizes share prefixes."""
    clips, caps, qa = [], [], []
    for i in range(num_clips):
        s = seed * 1_000_003 + i
        clip = generate_clip(s, richness_range, grid=grid, clip_id=f"c{seed}-{i:06d}")
        clips.append(clip)
        caps.extend(teacher_caption(clip, k) for k in range(NUM_SEGMENTS))
        qa.extend(generate_qa(clip, s + 7))
    return Corpus(clips, caps, qa)


def _clip_to_json(c: Clip):
    return {
        "clip_id": c.clip_id,
        "grid": c.grid,
        "frames": c.frames.astype(int).tolist(),
        "entities": [[e.id, e.shape, e.color, list(e.position)] for e in c.entities],
        "events": [[e.entity_id, e.kind, e.frame_index] for e in c.events],
        "richness": c.richness,
        "positions": [sorted([eid, r, col] for eid, (r, col) in p.items()) for p in c.positions],
    }


def _clip_from_json(d):
    return Clip(
        clip_id=d["clip_id"],
        grid=int(d["grid"]),
        frames=np.asarray(d["frames"], dtype=np.int8),
        entities=[Entity(int(i), s, col, tuple(p)) for i, s, col, p in d["entities"]],
        events=[MotionEvent(int(i), k, int(f)) for i, k, f in d["events"]],
        richness=int(d["richness"]),
        positions=[{int(e): (int(r), int(c)) for e, r, c in p} for p in d["positions"]],
    )


def _caption_to_json(r: CaptionRecord):
    return {"clip_id": r.clip_id, "segment_index": r.segment_index,
            "tokens": list(r.tokens), "raw_tokens": list(r.raw_tokens)}


def _caption_from_json(d):
    return CaptionRecord(d["clip_id"], int(d["segment_index"]),
                         tuple(int(t) for t in d["tokens"]), tuple(int(t) for t in d["raw_tokens"]))


def _qa_to_json(q: QARecord):
    return {"clip_id": q.clip_id, "question": list(q.question), "kind": q.kind,
            "options": [list(o) for o in q.options], "correct_index": q.correct_index}


def _qa_from_json(d):
    return QARecord(d["clip_id"], tuple(int(t) for t in d["question"]), d["kind"],
                    tuple(tuple(int(t) for t in o) for o in d["options"]), int(d["correct_index"]))


_CODECS = {
    "clips": (_clip_to_json, _clip_from_json),
    "captions": (_caption_to_json, _caption_from_json),
    "qa": (_qa_to_json, _qa_from_json),
}


def _write(path, kind, records):
    enc = _CODECS[kind][0]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": FORMAT, "kind": kind, "version": VERSION}) + "\n")
        for rec in records:
            fh.write(json.dumps(enc(rec), separators=(",", ":")) + "\n")


def _read(path, kind):
    dec = _CODECS[kind][1]
    out = []
    n = 0
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(path, n, f"malformed JSON ({e.msg})") from None
            if n == 1:
                if not isinstance(obj, dict) or obj.get("format") != FORMAT or obj.get("kind") != kind:
                    raise CorpusFormatError(path, n, f"missing or wrong {kind} header")
                if obj.get("version") != VERSION:
                    raise CorpusFormatError(path, n, f"unsupported version {obj.get('version')!r}")
                continue
            try:
                out.append(dec(obj))
            except (KeyError, TypeError, ValueError) as e:
                raise CorpusFormatError(path, n, f"bad {kind} record ({e!r})") from None
    if n == 0:
        raise CorpusFormatError(path, 1, "empty file, header expected")
    return out


def write_corpus(corpus: Corpus, path):
    path = Path(path)
    ids = {c.clip_id for c in corpus.clips}
    for rec in list(corpus.captions) + list(corpus.qa):
        if rec.clip_id not in ids:
            raise ValueError(f"record references unknown clip {rec.clip_id!r}")
    path.mkdir(parents=True, exist_ok=True)
    _write(path / FILES["clips"], "clips", corpus.clips)
    _write(path / FILES["captions"], "captions", corpus.captions)
    _write(path / FILES["qa"], "qa", corpus.qa)


def read_corpus(path) -> Corpus:
    path = Path(path)
    clips = _read(path / FILES["clips"], "clips")
    ids = {c.clip_id for c in clips}
    loaded = {}
    for kind in ("captions", "qa"):
        recs = _read(path / FILES[kind], kind)
        for n, rec in enumerate(recs, start=2):
            if rec.clip_id not in ids:
                raise CorpusFormatError(path / FILES[kind], n, f"dangling clip_id {rec.clip_id!r}")
        loaded[kind] = recs
    return Corpus(clips, loaded["captions"], loaded["qa"])
