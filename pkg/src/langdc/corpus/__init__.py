"""Synthetic symbolic-video corpus: clips, teacher captions, QA and file I/O."""

from .captions import CaptionRecord, expected_length, filter_supervision, teacher_caption
from .clips import (
    NUM_FRAMES,
    NUM_SEGMENTS,
    NUM_SYMBOLS,
    Clip,
    Entity,
    GenerationError,
    MotionEvent,
    generate_clip,
)
from .io import Corpus, CorpusFormatError, build_corpus, read_corpus, write_corpus
from .qa import QA_KINDS, QARecord, generate_qa, symbolic_answer

__all__ = [
    "NUM_FRAMES", "NUM_SEGMENTS", "NUM_SYMBOLS", "QA_KINDS", "CaptionRecord", "Clip", "Corpus",
    "CorpusFormatError", "Entity", "GenerationError", "MotionEvent", "QARecord", "build_corpus",
    "expected_length", "filter_supervision", "generate_clip", "generate_qa", "read_corpus",
    "symbolic_answer", "teacher_caption", "write_corpus",
]
