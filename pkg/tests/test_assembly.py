import numpy as np
import pytest

from langdc.assembly import (
    BaseLLM, LlmConfig, LoraConfig, aggregate_tokens, answer_batch, answer_generate, answer_targets, choose_option,
    layout_for, shared_prefix_hidden,
)
from langdc.corpus import build_corpus
from langdc.corpus.vocab import EOS_ID, LETTER_IDS, encode
from langdc.errors import ConfigError
from langdc.numerics import CapacityError, Tensor, no_tape, ops
from langdc.pruners import CompressedSegment


@pytest.fixture(scope="module")
def llm():
    rng = np.random.default_rng(5)
    m = BaseLLM(LlmConfig(layers=2, embed_dim=16, heads=2, context=64), rng)
    m.enable_lora(LoraConfig(rank=2), rng)
    for blk in m.blocks:  # make the adapters non-trivial
        for name in ("wq", "wv"):
            lin = getattr(blk.attn, name)
            lin.lora_b.data = rng.standard_normal(lin.lora_b.shape) * 0.1
    return m


def seg(n, idx, d=16, seed=0):
    return CompressedSegment(Tensor(np.random.default_rng(seed + idx).standard_normal((n, d))), (5,) * n, n,
                             idx, "teacher_forced")


def test_layout_is_base_caps_question():
    lay = layout_for(3, [2, 0, 4, 1], 5)
    assert [n for n, _, _ in lay.spans] == ["base", "cap0", "cap1", "cap2", "cap3", "question"]
    assert lay.total == 15 and lay.span("cap2") == (5, 9) and lay.origin(9) == "cap3"
    assert lay.origin(10) == "question"


def test_aggregate_orders_tokens(llm):
    base = Tensor(np.random.default_rng(1).standard_normal((3, 16)))
    segs = [seg(2, 0), seg(0, 1), seg(1, 2), seg(2, 3)]
    q = encode(["how", "many", "?"])
    lay, x = aggregate_tokens(llm, base, segs, q)
    pos = llm.pos.data
    assert np.array_equal(x.data[:3], base.data + pos[:3])
    assert np.array_equal(x.data[3:5], segs[0].soft_tokens.data + pos[3:5])
    assert np.array_equal(x.data[5], segs[2].soft_tokens.data[0] + pos[5])
    assert np.array_equal(x.data[8:], llm.tok.data[q] + pos[8:11])
    assert lay.lengths() == {"base": 3, "cap0": 2, "cap1": 0, "cap2": 1, "cap3": 2, "question": 3}


def test_aggregate_rejects_disorder(llm):
    with pytest.raises(ValueError, match="order"):
        aggregate_tokens(llm, Tensor(np.zeros((1, 16))), [seg(1, 1), seg(1, 0)], [3])


def test_capacity_error_names_span(llm):
    with pytest.raises(CapacityError, match="cap1"):
        aggregate_tokens(llm, Tensor(np.zeros((30, 16))), [seg(20, 0), seg(20, 1)], [3, 4])


def full_rows(llm, prefixes, owners, rows):
    """Every row run as its own complete sequence."""
    out = []
    with no_tape():
        for o, r in zip(owners, rows):
            _, x = aggregate_tokens(llm, prefixes[o], [], r)
            out.append(llm.run(ops.reshape(x, (1,) + x.shape)).data[0, prefixes[o].shape[0]:])
    return out


def test_shared_prefix_equals_full_sequences(llm):
    rng = np.random.default_rng(2)
    prefixes = [Tensor(rng.standard_normal((n, 16))) for n in (5, 2, 7)]
    owners = [0, 2, 2, 1, 0]
    rows = [[3, 4, 5], [6], [7, 8, 9, 10], [11, 12], [13, 14, 15, 16, 17]]
    with no_tape():
        h = shared_prefix_hidden(llm, prefixes, owners, rows).data
    for m, ref in enumerate(full_rows(llm, prefixes, owners, rows)):
        assert np.allclose(h[m, : len(rows[m])], ref, atol=1e-12)


def test_answer_batch_equals_single_generation(llm):
    rng = np.random.default_rng(3)
    prefixes = [Tensor(rng.standard_normal((n, 16))) for n in (4, 6)]
    owners = [0, 1, 1]
    prompts = [[3, 4], [5, 6, 7], [8]]
    batched = answer_batch(llm, prefixes, owners, prompts, max_tokens=3)
    for o, p, got in zip(owners, prompts, batched):
        _, x = aggregate_tokens(llm, prefixes[o], [], p)
        assert got == answer_generate(llm, x, max_tokens=3)


def test_lora_zero_init_bitwise():
    rng = np.random.default_rng(8)
    m = BaseLLM(LlmConfig(layers=2, embed_dim=16, heads=2, context=32), rng)
    x = Tensor(rng.standard_normal((2, 5, 16)))
    before = m.logits(m.run(x)).data.copy()
    m.enable_lora(LoraConfig(rank=4), np.random.default_rng(0))
    assert np.array_equal(m.logits(m.run(x)).data, before)


def test_lora_config_errors():
    with pytest.raises(ConfigError):
        LoraConfig(rank=0)
    with pytest.raises(ConfigError):
        LoraConfig(targets=("fc1",))


@pytest.fixture(scope="module")
def qa():
    return build_corpus(0, 2).qa[0]


def test_choose_option(qa):
    assert choose_option([LETTER_IDS[2]], qa) == 2
    assert choose_option(list(qa.options[1]), qa) == 1
    assert choose_option([], qa) is None
    assert choose_option([EOS_ID - 1], qa) is None


def test_answer_targets_align(qa):
    inputs, targets = answer_targets(qa)
    assert len(inputs) == len(targets)
    n = len(qa.prompt_ids())
    assert targets[n - 1] == LETTER_IDS[qa.correct_index] and targets[n] == EOS_ID
    assert all(t == -100 for t in targets[: n - 1])
