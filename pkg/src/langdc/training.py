"""Staged training with mechanically enforced trainability contracts.

Stages, in order:

* ``LanguagePretrain``: the base LLM (adapters excluded) learns caption text, and
  answering questions from a clip's gold captions, with no visual input; a stand-in
  for starting from a pretrained LLM.
* ``CrossModalPretrain``: encoders and the two encoder projectors learn from caption
  losses through the frozen captioner and the frozen LLM.
* ``CapPrunerPretrain``: the captioner, its input projector and the encoders learn
  to caption each segment.
* ``PostPretrain``: the post projector learns to hand captioner states to the LLM.
* ``SFT``: LoRA adapters plus the LLM-side projectors learn to answer questions;
  the captioner runs teacher-forced on gold captions.

Every stage hashes the parameters it must not touch before and after running and
raises :class:`~langdc.errors.ContractViolation` on any difference.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
import zipfile
from dataclasses import asdict, dataclass, field, replace
from fnmatch import fnmatch
from pathlib import Path

import numpy as np

from .assembly import answer_targets, sequence_loss
from .corpus.clips import FRAMES_PER_SEGMENT, NUM_SEGMENTS
from .corpus.vocab import BOS_ID, EOS_ID
from .errors import ConfigError, ContractViolation, DataError
from .numerics import AdamW, Tape, Tensor, backward, cosine_lr, no_tape, ops
from .pruners import base_token_count

STAGES = ("LanguagePretrain", "CrossModalPretrain", "CapPrunerPretrain", "PostPretrain", "SFT")

# the widest trainable set each stage may declare
CONTRACTS = {
    # text-only warm start standing in for a pretrained base LLM; adapters stay untouched
    "LanguagePretrain": ("llm.tok", "llm.pos", "llm.blocks.*.ln?.*", "llm.blocks.*.base.*", "llm.blocks.*.mlp.*",
                         "llm.ln_f.*", "llm.head.*"),
    "CrossModalPretrain": ("encoders.*", "proj_cap.*", "proj_llm.*"),
    "CapPrunerPretrain": ("encoders.*", "proj_cap.*", "cappruner.*"),
    "PostPretrain": ("post_proj.*",),
    "SFT": ("llm.*.lora_a", "llm.*.lora_b", "post_proj.*", "proj_llm.*"),
}

SCHEME_FULL = "full"
SCHEME_NO_CAP_PRETRAIN = "w/o CapPruner-Pretraining"
SCHEME_NO_POST_PRETRAIN = "w/o Post-Pretraining"

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class StageSpec:
    stage: str
    trainable: tuple = ()
    dataset: str = "train"
    epochs: float = 1.0
    lr: float = 3e-4
    batch_size: int = 16
    seed: int = 0
    warmup: int = 20
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    max_steps: int = 0  # 0 = derived from epochs

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if not self.trainable:
            object.__setattr__(self, "trainable", CONTRACTS[self.stage])
        object.__setattr__(self, "trainable", tuple(self.trainable))
        if self.batch_size < 1 or self.epochs <= 0 or self.lr <= 0:
            raise ConfigError(f"{self.stage}: batch_size, epochs and lr must be positive")


def check_contract(bundle, spec):
    """Names the spec would train; raises if any falls outside the stage contract."""
    allowed = CONTRACTS[spec.stage]
    names = [n for n, _ in bundle.named_parameters() if any(fnmatch(n, g) for g in spec.trainable)]
    bad = [n for n in names if not any(fnmatch(n, g) for g in allowed)]
    if bad:
        raise ContractViolation(f"{spec.stage} may not train {bad[:3]}{'...' if len(bad) > 3 else ''}")
    if not names:
        raise ContractViolation(f"{spec.stage}: trainable globs {spec.trainable} match no parameter")
    return names


def frozen_digest(bundle, names=None):
    h = hashlib.sha256()
    for n, p in bundle.named_parameters():
        if names is None or n in names:
            h.update(n.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


# batching -----------------------------------------------------------------------------

def length_bucketed_batches(lengths, batch_size, rng, pool=8):
    """Shuffle, sort within pools of ``pool`` batches by length, then shuffle batches."""
    order = rng.permutation(len(lengths))
    batches = []
    span = batch_size * pool
    for i in range(0, len(order), span):
        chunk = sorted(order[i:i + span], key=lambda j: (lengths[j], j))
        batches += [chunk[k:k + batch_size] for k in range(0, len(chunk), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def segment_units(corpus):
    """(clip index, segment index, caption ids) for every segment of the corpus."""
    units = []
    for ci, clip in enumerate(corpus.clips):
        for s in range(NUM_SEGMENTS):
            units.append((ci, s, list(corpus.caption(clip.clip_id, s).tokens)))
    return units


def segment_frames(corpus, units):
    g = corpus.clips[0].grid
    out = np.empty((len(units), FRAMES_PER_SEGMENT, g, g), dtype=np.int64)
    for k, (ci, s, _) in enumerate(units):
        out[k] = corpus.clips[ci].frames[s * FRAMES_PER_SEGMENT:(s + 1) * FRAMES_PER_SEGMENT]
    return out


def caption_rows(golds):
    inputs = [[BOS_ID] + g for g in golds]
    targets = [g + [EOS_ID] for g in golds]
    return inputs, targets


# frozen-feature caches -------------------------------------------------------------------

def base_feature_cache(bundle, corpus, stride, batch=32):
    """Pooled encoder features per clip (before the LLM projector): (C, Nb, d_enc)."""
    out = []
    with no_tape():
        for i in range(0, len(corpus.clips), batch):
            frames = np.stack([c.frames for c in corpus.clips[i:i + batch]])
            img, vid = bundle.encode(frames)
            out.append(bundle.pooled_base(img, vid, stride).data)
    return np.concatenate(out) if out else np.zeros((0, 0, bundle.cfg.encoder.embed_dim))


def tap_state_cache(bundle, corpus, batch=32, tap_layer=None):
    """Teacher-forced captioner states on gold captions: {(clip index, segment): (n, d_cap)}."""
    cp = bundle.cappruner
    tap = cp.cfg.tap_layer if tap_layer is None else tap_layer
    P = cp.cfg.prefix_len
    units = segment_units(corpus)
    cache = {}
    with no_tape():
        for i in range(0, len(units), batch):
            chunk = units[i:i + batch]
            img, vid = bundle.encode_segments(segment_frames(corpus, chunk))
            prefix = bundle.cap_prefix(img, vid)
            golds = [g[: cp.cfg.max_tokens] for _, _, g in chunk]
            T = max(len(g) for g in golds) + 1
            ids = np.zeros((len(chunk), T), dtype=np.int64)
            for b, g in enumerate(golds):
                ids[b, : len(g) + 1] = [BOS_ID] + g
            states = cp.hidden_states(prefix, ids, taps=(tap,))[1][tap].data
            for b, (ci, s, _) in enumerate(chunk):
                cache[(ci, s)] = states[b, P + 1:P + 1 + len(golds[b])].copy()
    return cache


# per-stage losses -------------------------------------------------------------------------

class _Stage:
    def __init__(self, bundle, corpus, spec, stride=None):
        self.bundle, self.corpus, self.spec = bundle, corpus, spec
        self.stride = bundle.cfg.base_pruner.stride if stride is None else stride

    def prepare(self):
        pass

    def units(self):
        raise NotImplementedError

    def unit_length(self, u):
        raise NotImplementedError

    def loss(self, batch):
        raise NotImplementedError


class _CrossModal(_Stage):
    """Caption loss through the frozen LLM (pooled base tokens as prefix) plus the
    frozen captioner's caption loss; only encoders and encoder projectors move."""

    def units(self):
        return segment_units(self.corpus)

    def unit_length(self, u):
        return len(u[2])

    def loss(self, batch):
        b = self.bundle
        img, vid = b.encode_segments(segment_frames(self.corpus, batch))
        golds = [u[2] for u in batch]
        base = b.base_llm_tokens(b.pooled_base(ops.reshape(img, (len(batch), 1) + img.shape[1:]),
                                               ops.reshape(vid, (len(batch), 1) + vid.shape[1:]), self.stride))
        prefixes = [ops.getitem(base, k) for k in range(len(batch))]
        inputs, targets = caption_rows(golds)
        llm_loss = sequence_loss(b.llm, prefixes, list(range(len(batch))), inputs, targets)
        cap_loss = b.cappruner.caption_loss(b.cap_prefix(img, vid), golds)
        return ops.add(llm_loss, cap_loss)


class _CapPretrain(_CrossModal):
    def loss(self, batch):
        b = self.bundle
        img, vid = b.encode_segments(segment_frames(self.corpus, batch))
        return b.cappruner.caption_loss(b.cap_prefix(img, vid), [u[2] for u in batch])


class _PostPretrain(_CrossModal):
    """LLM caption loss with the post-projected gold-caption states as the only prefix."""

    def prepare(self):
        self.taps = tap_state_cache(self.bundle, self.corpus)

    def loss(self, batch):
        b = self.bundle
        golds = [u[2] for u in batch]
        prefixes = [b.post_proj(Tensor(self.taps[(u[0], u[1])])) for u in batch]
        inputs, targets = caption_rows(golds)
        return sequence_loss(b.llm, prefixes, list(range(len(batch))), inputs, targets)


class _SFT(_Stage):
    """Answer loss on QA pairs; one visual prefix per clip shared by its questions."""

    def prepare(self):
        self.base = base_feature_cache(self.bundle, self.corpus, self.stride)
        self.taps = tap_state_cache(self.bundle, self.corpus)
        index = {c.clip_id: i for i, c in enumerate(self.corpus.clips)}
        self.by_clip = {}
        for q in self.corpus.qa:
            self.by_clip.setdefault(index[q.clip_id], []).append(q)

    def units(self):
        return sorted(self.by_clip)

    def unit_length(self, ci):
        return sum(len(self.taps[(ci, s)]) for s in range(NUM_SEGMENTS))

    def prefix(self, ci):
        b = self.bundle
        parts = [b.base_llm_tokens(Tensor(self.base[ci]))]
        for s in range(NUM_SEGMENTS):
            t = self.taps[(ci, s)]
            if len(t):
                parts.append(b.post_proj(Tensor(t)))
        return ops.concat(parts, axis=0)

    def loss(self, batch):
        prefixes, owners, inputs, targets = [], [], [], []
        for k, ci in enumerate(batch):
            prefixes.append(self.prefix(ci))
            for q in self.by_clip[ci]:
                i, t = answer_targets(q)
                owners.append(k)
                inputs.append(i)
                targets.append(t)
        return sequence_loss(self.bundle.llm, prefixes, owners, inputs, targets)


class _LanguagePretrain(_Stage):
    """Next-token loss on caption text, and on QA answers read from the clip's gold captions.

    No visual input: each batch sits behind one shared blank (zero) prefix whose length is a
    fixed function of the batch, so position embeddings are trained where visual prefixes
    will later sit.
    """

    def prepare(self):
        corpus = self.corpus
        story = {c.clip_id: [t for s in range(NUM_SEGMENTS) for t in corpus.caption(c.clip_id, s).tokens]
                 for c in corpus.clips}
        self.rows = [([BOS_ID] + g, g + [EOS_ID]) for _, _, g in segment_units(corpus)]
        for q in corpus.qa:
            i, t = answer_targets(q)
            ctx = story[q.clip_id]
            self.rows.append((ctx + i, [-100] * len(ctx) + t))
        cfg = self.bundle.cfg
        longest = max(len(i) for i, _ in self.rows)
        base = base_token_count(cfg.encoder.image_grid, cfg.encoder.video_grid, cfg.base_pruner.stride)
        self.max_offset = max(0, min(base, cfg.llm.context - longest))

    def units(self):
        return list(range(len(self.rows)))

    def unit_length(self, u):
        return len(self.rows[u][0])

    def offset(self, batch):
        return (min(batch) * 7919 + self.spec.seed * 104729) % (self.max_offset + 1)

    def loss(self, batch):
        inputs = [self.rows[u][0] for u in batch]
        targets = [self.rows[u][1] for u in batch]
        blank = Tensor(np.zeros((self.offset(batch), self.bundle.llm.cfg.embed_dim)))
        return sequence_loss(self.bundle.llm, [blank], [0] * len(batch), inputs, targets)


_IMPL = {"LanguagePretrain": _LanguagePretrain, "CrossModalPretrain": _CrossModal, "CapPrunerPretrain": _CapPretrain,
         "PostPretrain": _PostPretrain, "SFT": _SFT}


# the loop -------------------------------------------------------------------------------

@dataclass
class StageResult:
    stage: str
    steps: int
    losses: list = field(default_factory=list)
    seconds: float = 0.0
    trainable: list = field(default_factory=list)


def schedule(stage_impl, spec):
    units = stage_impl.units()
    if not units:
        raise DataError(f"{spec.stage}: no training units in corpus")
    lengths = [stage_impl.unit_length(u) for u in units]
    rng = np.random.default_rng(spec.seed)
    plan = []
    epochs = int(np.ceil(spec.epochs))
    for _ in range(epochs):
        plan += [[units[j] for j in b] for b in length_bucketed_batches(lengths, spec.batch_size, rng)]
    total = spec.max_steps or max(1, int(round(len(plan) * spec.epochs / epochs)))
    while len(plan) < total:
        plan += [[units[j] for j in b] for b in length_bucketed_batches(lengths, spec.batch_size, rng)]
    return plan[:total]


def run_stage(bundle, corpus, spec: StageSpec, run_dir=None, stride=None, resume=None,
              stop_after=None, checkpoint_every=0, log=None, provenance=()):
    """Train one stage; returns a :class:`StageResult`.

    ``resume`` is a loaded :class:`Checkpoint` taken mid-stage; training continues from
    its step with its optimizer state. ``stop_after`` ends the stage early (for resume
    tests) after that many total steps.
    """
    names = check_contract(bundle, spec)
    bundle.freeze()
    bundle.set_trainable(spec.trainable, True)
    frozen = {n for n, _ in bundle.named_parameters()} - set(names)
    before = frozen_digest(bundle, frozen)

    impl = _IMPL[spec.stage](bundle, corpus, spec, stride)
    impl.prepare()
    plan = schedule(impl, spec)
    params = [p for p in bundle.parameters() if p.trainable]
    opt = AdamW(params, lr=spec.lr, weight_decay=spec.weight_decay, clip_norm=spec.clip_norm)
    start = 0
    if resume is not None:
        if resume.meta.get("stage") != spec.stage:
            raise ConfigError(f"checkpoint is mid-{resume.meta.get('stage')}, not {spec.stage}")
        opt.load_state_arrays(resume.optimizer)
        start = int(resume.meta["step"])
    writer = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        fh = open(run_dir / f"metrics_{spec.stage}.csv", "a" if start else "w", newline="")
        writer = csv.writer(fh)
        if not start:
            writer.writerow(["step", "loss", "lr", "seconds"])
    result = StageResult(spec.stage, 0, trainable=names)
    t0 = time.time()
    end = len(plan) if stop_after is None else min(stop_after, len(plan))
    warm = min(spec.warmup, max(1, len(plan) // 10))
    for step in range(start, end):
        opt.zero_grad()
        with Tape():
            loss = impl.loss(plan[step])
        backward(loss)
        lr = cosine_lr(step, len(plan), spec.lr, warmup=warm)
        opt.step(lr=lr)
        val = float(loss.data)
        result.losses.append(val)
        if writer is not None:
            writer.writerow([step + 1, f"{val:.6f}", f"{lr:.6g}", f"{time.time() - t0:.2f}"])
        if log is not None and (step + 1) % max(1, len(plan) // 20) == 0:
            log(f"{spec.stage} step {step + 1}/{len(plan)} loss {val:.4f}")
        if run_dir is not None and checkpoint_every and (step + 1) % checkpoint_every == 0 and step + 1 < end:
            save_checkpoint(run_dir / f"{spec.stage}_step{step + 1}.ckpt", bundle, opt, spec, step + 1, provenance)
    result.steps = end
    result.seconds = time.time() - t0
    if writer is not None:
        fh.close()
    if frozen_digest(bundle, frozen) != before:
        raise ContractViolation(f"{spec.stage} changed parameters outside {spec.trainable}")
    result.optimizer = opt
    bundle.freeze()
    return result


# checkpoints ---------------------------------------------------------------------------

class CheckpointError(ValueError):
    exit_code = 3


@dataclass
class Checkpoint:
    meta: dict
    params: dict
    optimizer: dict


def save_checkpoint(path, bundle, opt=None, spec=None, step=None, provenance=()):
    """Versioned named-array container (a zip of .npy files plus JSON metadata)."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "digest": bundle.digest(),
        "config": bundle.cfg.to_dict(),
        "provenance": list(provenance),
        "stage": spec.stage if spec is not None else None,
        "spec": asdict(spec) if spec is not None else None,
        "step": step,
    }
    arrays = {f"param/{n}": a for n, a in bundle.state_arrays().items()}
    if opt is not None:
        arrays.update({f"optim/{k}": v for k, v in opt.state_arrays().items()})
    arrays["meta"] = np.frombuffer(json.dumps(meta, default=list).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)
    return path


def read_checkpoint(path):
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            params = {k[6:]: z[k] for k in z.files if k.startswith("param/")}
            optim = {k[6:]: z[k] for k in z.files if k.startswith("optim/")}
    except (zipfile.BadZipFile, OSError, EOFError, ValueError, KeyError) as e:
        raise CheckpointError(f"{path}: unreadable or truncated checkpoint ({e})") from None
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {meta.get('version')} unsupported")
    return Checkpoint(meta, params, optim)


def load_checkpoint(path, bundle, force=False):
    ckpt = read_checkpoint(path)
    if ckpt.meta["digest"] != bundle.digest() and not force:
        raise CheckpointError(f"{path}: config digest {ckpt.meta['digest']} != model {bundle.digest()}")
    bundle.load_state_arrays(ckpt.params)
    return ckpt


# the three stages as named in the pipeline ---------------------------------------------------

def run_stage1(bundle, corpus, spec=None, **kw):
    return run_stage(bundle, corpus, spec or StageSpec("CrossModalPretrain"), **kw)


def run_stage2(bundle, corpus, spec_a=None, spec_b=None, skip_cappruner_pretrain=False,
               skip_post_pretrain=False, **kw):
    """Phase A (captioner pretraining) then phase B (post projector); returns (results, scheme)."""
    results = []
    if not skip_cappruner_pretrain:
        results.append(run_stage(bundle, corpus, spec_a or StageSpec("CapPrunerPretrain"), **kw))
    if not skip_post_pretrain:
        results.append(run_stage(bundle, corpus, spec_b or StageSpec("PostPretrain"), **kw))
    return results, scheme_name(skip_cappruner_pretrain, skip_post_pretrain)


def run_stage3(bundle, corpus, spec=None, **kw):
    return run_stage(bundle, corpus, spec or StageSpec("SFT"), **kw)


def scheme_name(skip_cappruner_pretrain=False, skip_post_pretrain=False):
    if skip_cappruner_pretrain and skip_post_pretrain:
        return f"{SCHEME_NO_CAP_PRETRAIN} + {SCHEME_NO_POST_PRETRAIN}"
    if skip_cappruner_pretrain:
        return SCHEME_NO_CAP_PRETRAIN
    if skip_post_pretrain:
        return SCHEME_NO_POST_PRETRAIN
    return SCHEME_FULL


def with_seed(spec, seed):
    return replace(spec, seed=seed)
