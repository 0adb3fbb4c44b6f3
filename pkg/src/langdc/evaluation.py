"""Exact-match scoring, the per-instance cheapest-correct oracle, and length statistics."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .assembly import answer_batch, choose_option
from .corpus.clips import NUM_SEGMENTS
from .corpus.vocab import CAPTION_VOCAB_SIZE
from .errors import DataError
from .numerics import Tensor, no_tape, ops


@dataclass
class EvalRecord:
    instance_id: str
    kind: str
    predicted: int  # option index, -1 when the output matched no option
    correct: bool
    tokens: int
    cap_lengths: tuple = ()
    answer_ids: tuple = ()
    clip_id: str = ""

    def to_json(self):
        d = asdict(self)
        d["cap_lengths"] = list(self.cap_lengths)
        d["answer_ids"] = list(self.answer_ids)
        return d

    @classmethod
    def from_json(cls, d):
        return cls(d["instance_id"], d["kind"], int(d["predicted"]), bool(d["correct"]), int(d["tokens"]),
                   tuple(d.get("cap_lengths", ())), tuple(d.get("answer_ids", ())), d.get("clip_id", ""))


def instance_ids(corpus):
    """Stable ids ``clip_id#k`` for the k-th question of each clip."""
    seen = defaultdict(int)
    out = []
    for q in corpus.qa:
        out.append(f"{q.clip_id}#{seen[q.clip_id]}")
        seen[q.clip_id] += 1
    return out


def check_vocab(bundle, corpus):
    V = bundle.llm.cfg.vocab
    for q in corpus.qa:
        ids = list(q.question) + [t for o in q.options for t in o]
        if ids and max(ids) >= V:
            raise DataError(f"question for {q.clip_id} uses token ids beyond the model vocabulary ({V})")
    for r in corpus.captions:
        if r.tokens and max(r.tokens) >= min(CAPTION_VOCAB_SIZE, bundle.cappruner.cfg.vocab):
            raise DataError(f"caption for {r.clip_id} uses ids beyond the captioner vocabulary")


def evaluate_answerer(corpus, answer_fn, tokens_fn=None):
    """Score any ``answer_fn(clip, qa) -> option index`` on every question."""
    recs = []
    for iid, q in zip(instance_ids(corpus), corpus.qa):
        clip = corpus.by_id[q.clip_id]
        pick = answer_fn(clip, q)
        pick = -1 if pick is None else int(pick)
        recs.append(EvalRecord(iid, q.kind, pick, pick == q.correct_index,
                               int(tokens_fn(clip)) if tokens_fn else 0, clip_id=q.clip_id))
    return recs


@dataclass(frozen=True)
class EvalConfig:
    stride: int = 0  # 0 = the model's base_pruner.stride
    use_base: bool = True
    use_cap: bool = True
    clip_batch: int = 16

    @property
    def label(self):
        parts = [f"base/{self.stride}" if self.use_base else "nobase", "cap" if self.use_cap else "nocap"]
        return "+".join(parts)


def compress_clips(bundle, clips, cfg: EvalConfig):
    """Visual prefixes in LLM space for a batch of clips plus their cap lengths."""
    stride = cfg.stride or bundle.cfg.base_pruner.stride
    frames = np.stack([c.frames for c in clips])
    with no_tape():
        img, vid = bundle.encode(frames)
        parts = [[] for _ in clips]
        lengths = [[0] * NUM_SEGMENTS for _ in clips]
        if cfg.use_base:
            base = bundle.base_llm_tokens(bundle.pooled_base(img, vid, stride))
            for i in range(len(clips)):
                parts[i].append(ops.getitem(base, i))
        if cfg.use_cap:
            prefix = bundle.cap_prefix(img, vid)
            B = len(clips)
            flat = ops.reshape(prefix, (B * NUM_SEGMENTS,) + prefix.shape[2:])
            segs = bundle.cappruner.free_running(flat, post=bundle.post_proj)
            for k, seg in enumerate(segs):
                i, s = divmod(k, NUM_SEGMENTS)
                seg.segment_index = s
                lengths[i][s] = seg.length
                if seg.length:
                    parts[i].append(seg.soft_tokens)
        prefixes = []
        for p in parts:
            if not p:
                prefixes.append(Tensor(np.zeros((0, bundle.llm.cfg.embed_dim))))
            else:
                prefixes.append(ops.concat(p, axis=0) if len(p) > 1 else p[0])
    return prefixes, lengths


def evaluate(bundle, corpus, cfg: EvalConfig = EvalConfig()):
    """Deterministic exact-match records for every question of ``corpus``."""
    check_vocab(bundle, corpus)
    ids = instance_ids(corpus)
    by_clip = defaultdict(list)
    for k, q in enumerate(corpus.qa):
        by_clip[q.clip_id].append(k)
    clips = [c for c in corpus.clips if c.clip_id in by_clip]
    recs = [None] * len(corpus.qa)
    for i in range(0, len(clips), cfg.clip_batch):
        chunk = clips[i:i + cfg.clip_batch]
        prefixes, lengths = compress_clips(bundle, chunk, cfg)
        owners, prompts, which = [], [], []
        for j, c in enumerate(chunk):
            for k in by_clip[c.clip_id]:
                owners.append(j)
                prompts.append(corpus.qa[k].prompt_ids())
                which.append(k)
        answers = answer_batch(bundle.llm, prefixes, owners, prompts)
        for k, j, ans in zip(which, owners, answers):
            q = corpus.qa[k]
            pick = choose_option(ans, q)
            pick = -1 if pick is None else pick
            recs[k] = EvalRecord(ids[k], q.kind, pick, pick == q.correct_index,
                                 int(prefixes[j].shape[0]), tuple(lengths[j]), tuple(ans), q.clip_id)
    return recs


def accuracy(records):
    return float(np.mean([r.correct for r in records])) if records else 0.0


def summarize(records):
    """Overall and per-kind accuracy and mean visual tokens."""
    rows = []
    groups = defaultdict(list)
    for r in records:
        groups[r.kind].append(r)
    for kind in ["all"] + sorted(groups):
        rs = records if kind == "all" else groups[kind]
        rows.append({"kind": kind, "n": len(rs), "accuracy": accuracy(rs),
                     "mean_tokens": float(np.mean([r.tokens for r in rs])) if rs else 0.0})
    return rows


def write_records(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


def read_records(path):
    with open(path, encoding="utf-8") as fh:
        return [EvalRecord.from_json(json.loads(line)) for line in fh if line.strip()]


def write_summary(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["kind", "n", "accuracy", "mean_tokens"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "accuracy": f"{r['accuracy']:.6f}", "mean_tokens": f"{r['mean_tokens']:.4f}"})


# the oracle ------------------------------------------------------------------------------

@dataclass
class CorrectnessMatrix:
    instances: list
    columns: list
    tokens: np.ndarray  # (R, C) tokens each configuration spent on each instance
    correct: np.ndarray  # (R, C) bool

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        self.correct = np.asarray(self.correct, dtype=bool)
        R, C = len(self.instances), len(self.columns)
        if self.tokens.shape != (R, C) or self.correct.shape != (R, C):
            raise ValueError(f"matrix must be {R}x{C}; got tokens {self.tokens.shape}, correct {self.correct.shape}")

    @classmethod
    def from_runs(cls, runs):
        """Align ``{column label: [EvalRecord]}`` on shared instance ids."""
        labels = list(runs)
        if not labels:
            raise ValueError("no runs")
        maps = {lab: {r.instance_id: r for r in runs[lab]} for lab in labels}
        ids = [i for i in (r.instance_id for r in runs[labels[0]]) if all(i in maps[l] for l in labels)]
        tok = [[maps[l][i].tokens for l in labels] for i in ids]
        cor = [[maps[l][i].correct for l in labels] for i in ids]
        return cls(ids, labels, np.array(tok, dtype=np.float64).reshape(len(ids), len(labels)),
                   np.array(cor, dtype=bool).reshape(len(ids), len(labels)))

    def column_accuracy(self):
        return self.correct.mean(axis=0)

    def column_mean_tokens(self):
        return self.tokens.mean(axis=0)


@dataclass
class OracleResult:
    chosen: np.ndarray  # column index per instance
    charged: np.ndarray  # tokens charged per instance
    correct: np.ndarray  # bool per instance
    columns: list = field(default_factory=list)

    @property
    def accuracy(self):
        return float(self.correct.mean())

    @property
    def mean_tokens(self):
        return float(self.charged.mean())


def oracle_select(m: CorrectnessMatrix):
    """Per instance, the fewest-token correct column; instances correct nowhere are
    scored wrong and charged their fewest-token column. Ties go to the earlier column."""
    R, C = m.correct.shape
    if R == 0 or C == 0:
        raise ValueError("oracle_select needs a non-empty matrix")
    # lexsort keys: tokens, then column index; masked columns pushed to the end
    masked = np.where(m.correct, m.tokens, np.inf)
    best = np.argmin(masked, axis=1)
    anyc = m.correct.any(axis=1)
    cheapest = np.argmin(m.tokens, axis=1)
    chosen = np.where(anyc, best, cheapest)
    charged = m.tokens[np.arange(R), chosen]
    return OracleResult(chosen, charged, anyc.copy(), list(m.columns))


# length statistics ---------------------------------------------------------------------------

@dataclass
class LengthStats:
    bin_edges: np.ndarray
    counts: np.ndarray
    per_kind: dict
    n: int

    def rows(self):
        return [(int(a), int(b), int(c)) for a, b, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts)]


def length_stats(records, bin_width=8, out_dir=None):
    """Histogram of total cap length per instance and mean visual tokens per task kind."""
    if not records:
        raise ValueError("length_stats needs at least one record")
    totals = np.array([sum(r.cap_lengths) for r in records])
    top = int(totals.max()) + 1
    edges = np.arange(0, top + bin_width, bin_width)
    counts, _ = np.histogram(totals, bins=edges)
    per = defaultdict(list)
    for r in records:
        per[r.kind].append((r.tokens, sum(r.cap_lengths)))
    per_kind = {k: {"mean_tokens": float(np.mean([a for a, _ in v])), "mean_cap": float(np.mean([b for _, b in v]))}
                for k, v in sorted(per.items())}
    stats = LengthStats(edges, counts, per_kind, len(records))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_histogram_csv(stats, out / "lengths.csv")
        with open(out / "per_task.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "mean_tokens", "mean_cap_tokens"])
            for k, v in per_kind.items():
                w.writerow([k, f"{v['mean_tokens']:.4f}", f"{v['mean_cap']:.4f}"])
        (out / "lengths.svg").write_text(histogram_svg(stats))
    return stats


def write_histogram_csv(stats, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lo", "hi", "count"])
        w.writerows(stats.rows())


def read_histogram_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    edges = np.array([int(r["lo"]) for r in rows] + ([int(rows[-1]["hi"])] if rows else []))
    return edges, np.array([int(r["count"]) for r in rows])


def histogram_svg(stats, width=480, height=240):
    """Minimal standalone SVG bar chart of the cap-length histogram."""
    pad = 30
    n = max(1, len(stats.counts))
    peak = max(1, int(stats.counts.max()) if len(stats.counts) else 1)
    bw = (width - 2 * pad) / n
    bars = []
    for i, c in enumerate(stats.counts):
        h = (height - 2 * pad) * c / peak
        bars.append(f'<rect x="{pad + i * bw:.1f}" y="{height - pad - h:.1f}" width="{max(bw - 1, 1):.1f}" '
                    f'height="{h:.1f}" fill="#4a7ab5"><title>[{stats.bin_edges[i]}, {stats.bin_edges[i + 1]}): {c}</title></rect>')
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
            f'<text x="{pad}" y="18" font-size="12">cap tokens per instance (n={stats.n})</text>'
            f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>'
            + "".join(bars)
            + f'<text x="{pad}" y="{height - 10}" font-size="10">0</text>'
            f'<text x="{width - pad - 20}" y="{height - 10}" font-size="10">{int(stats.bin_edges[-1])}</text></svg>')


def tercile_means(values, richness):
    """Mean of ``values`` within richness terciles (ranks split into three equal groups)."""
    values, richness = np.asarray(values, dtype=float), np.asarray(richness, dtype=float)
    order = np.argsort(richness, kind="stable")
    groups = np.array_split(order, 3)
    return [float(values[g].mean()) for g in groups]


def average_ranks(x):
    """1-based ranks with ties sharing their mean rank."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    xs = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def spearman(x, y):
    """Rank correlation; nan when either side is constant."""
    rx, ry = average_ranks(x), average_ranks(y)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    return float((rx * ry).sum() / denom) if denom > 0 else float("nan")


def segment_lengths(bundle, clips, batch=16):
    """Free-running cap length and ground-truth richness for every segment of ``clips``."""
    lengths, richness = [], []
    cfg = EvalConfig(use_base=False, clip_batch=batch)
    for i in range(0, len(clips), batch):
        chunk = clips[i:i + batch]
        _, ls = compress_clips(bundle, chunk, cfg)
        for c, row in zip(chunk, ls):
            lengths.extend(row)
            richness.extend(c.segment_richness(s) for s in range(NUM_SEGMENTS))
    return np.array(lengths), np.array(richness)
