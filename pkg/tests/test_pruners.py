import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_model_config
from langdc.corpus.vocab import BOS_ID, EOS_ID, PAD_ID
from langdc.encoders import EncoderConfig
from langdc.errors import ConfigError
from langdc.model import ModelBundle
from langdc.numerics import AdamW, KVCache, Tape, Tensor, backward, no_tape, ops
from langdc.numerics.tensor import DimensionError
from langdc.pruners import (
    UNEMITTABLE, BasePrunerConfig, CapPrunerConfig, base_prune, base_token_count, base_tokens, pooled_side,
)

PAPER_COUNTS = {2: 3328, 4: 832, 8: 208, 16: 80}


@pytest.mark.parametrize("stride,count", sorted(PAPER_COUNTS.items()))
def test_paper_scale_token_counts(stride, count):
    assert base_token_count(24, 16, stride) == count
    img = Tensor(np.zeros((16, 24 * 24, 2)))
    vid = Tensor(np.zeros((16, 16 * 16, 2)))
    n = base_prune(img, 24, stride).shape[-2] + base_prune(vid, 16, stride).shape[-2]
    assert 16 * n == count


def test_pooled_side_ceil():
    assert [pooled_side(5, s) for s in (1, 2, 3, 5, 6)] == [5, 3, 2, 1, 1]
    with pytest.raises(ConfigError):
        BasePrunerConfig(0)


def test_base_tokens_order_image_then_video(rng):
    cfg = EncoderConfig(grid=8, image_grid=4, video_grid=2, embed_dim=3, heads=1)
    img = rng.standard_normal((2, 4, 4 * 16, 3))
    vid = rng.standard_normal((2, 4, 4 * 4, 3))
    out = base_tokens(Tensor(img), Tensor(vid), cfg, 2).data
    per = 4 * 4 + 4 * 1
    assert out.shape == (2, 4 * per, 3)
    s, f = 2, 1
    # first image token of frame f in segment s: mean of its top-left 2x2 window
    grid = img[1, s, f * 16:(f + 1) * 16].reshape(4, 4, 3)
    assert np.allclose(out[1, s * per + f * 4], grid[:2, :2].mean(axis=(0, 1)))
    # video tokens of segment s pool to one token per frame
    assert np.allclose(out[1, s * per + 16 + f], vid[1, s, f * 4:(f + 1) * 4].mean(axis=0))


# captioner ----------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def bundle():
    return ModelBundle(tiny_model_config(), seed=3)


def prefixes(bundle, n, seed=0):
    rng = np.random.default_rng(seed)
    frames = rng.integers(0, 25, (n, 4, 8, 8))
    with no_tape():
        img, vid = bundle.encode_segments(frames)
        return bundle.cap_prefix(img, vid)


def naive_greedy(cp, prefix, cap):
    """Recompute the whole sequence each step, no cache."""
    ids = [BOS_ID]
    with no_tape():
        for _ in range(cap):
            h, _ = cp.hidden_states(prefix, np.array([ids]))
            logits = cp.logits(ops.getitem(h, (0, -1))).data.copy()
            logits[list(UNEMITTABLE)] = -np.inf
            nxt = int(logits.argmax())
            if nxt == EOS_ID:
                break
            ids.append(nxt)
    return ids[1:]


def test_cached_decode_matches_naive(bundle):
    p = prefixes(bundle, 3)
    got = bundle.cappruner.decode_ids(p, max_tokens=12)
    for b in range(3):
        assert got[b] == naive_greedy(bundle.cappruner, ops.getitem(p, slice(b, b + 1)), 12)


@settings(max_examples=10)
@given(st.integers(0, 1000))
def test_length_bounds_and_no_specials(seed):
    b = ModelBundle(tiny_model_config(max_tokens=128), seed=seed)
    segs = b.cappruner.free_running(prefixes(b, 2, seed), post=b.post_proj)
    for s in segs:
        assert 0 <= s.length <= 128
        assert s.length == len(s.caption_ids) == s.soft_tokens.shape[0]
        assert not set(s.caption_ids) & {PAD_ID, BOS_ID, EOS_ID}


def test_greedy_is_deterministic(bundle):
    p = prefixes(bundle, 4, 9)
    a = bundle.cappruner.free_running(p, post=bundle.post_proj)
    b = bundle.cappruner.free_running(p, post=bundle.post_proj)
    for x, y in zip(a, b):
        assert x.caption_ids == y.caption_ids
        assert np.array_equal(x.soft_tokens.data, y.soft_tokens.data)


def test_tap_layer_never_changes_length(bundle):
    p = prefixes(bundle, 4, 5)
    lengths = {t: [s.length for s in bundle.cappruner.free_running(p, tap_layer=t)]
               for t in range(bundle.cappruner.cfg.layers + 1)}
    assert len({tuple(v) for v in lengths.values()}) == 1


@pytest.fixture(scope="module")
def overfit():
    """A captioner trained until greedy decoding reproduces one gold caption."""
    b = ModelBundle(tiny_model_config(), seed=11)
    gold = [5, 9, 14, 5, 22, 30, 8]
    p = prefixes(b, 1, 2)
    params = list(b.cappruner.parameters())
    for q in params:
        q.trainable = True
    opt = AdamW(params, lr=3e-3)
    for _ in range(300):
        opt.zero_grad()
        with Tape():
            loss = b.cappruner.caption_loss(p, [gold])
        backward(loss)
        opt.step()
        if float(loss.data) < 1e-3:
            break
    b.freeze()
    return b, p, gold


def test_overfit_free_running_reproduces_gold(overfit):
    b, p, gold = overfit
    assert b.cappruner.decode_ids(p)[0] == gold


def test_teacher_forced_free_running_equivalence(overfit):
    b, p, gold = overfit
    fr = b.cappruner.free_running(p, post=b.post_proj)[0]
    tf = b.cappruner.teacher_forced(p, gold, post=b.post_proj)
    assert fr.caption_ids == tf.caption_ids
    assert np.array_equal(fr.tap_states, tf.tap_states)
    assert np.array_equal(fr.soft_tokens.data, tf.soft_tokens.data)


def test_cached_step_states_agree_with_one_pass(overfit):
    """Tap states gathered token by token through the cache match the single pass."""
    b, p, gold = overfit
    cp, tap, P = b.cappruner, b.cappruner.cfg.tap_layer, b.cappruner.cfg.prefix_len
    cache = KVCache()
    states = []
    with no_tape():
        _, saved = cp.hidden_states(p, np.array([[BOS_ID]]), taps=(tap,), cache=cache)
        for t, tok in enumerate(gold):
            _, saved = cp.hidden_states(None, np.array([[tok]]), taps=(tap,), cache=cache, start=P + 1 + t)
            states.append(saved[tap].data[0, -1])
    tf = cp.teacher_forced(p, gold)
    assert np.allclose(np.stack(states), tf.tap_states, atol=1e-12)


def test_teacher_forced_truncates_with_warning(bundle):
    p = prefixes(bundle, 1)
    seg = bundle.cappruner.teacher_forced(p, [5] * 30)
    assert seg.length == bundle.cappruner.cfg.max_tokens
    assert seg.warnings and "truncated" in seg.warnings[0]


def test_prefix_shape_checked(bundle):
    with pytest.raises(DimensionError):
        bundle.cappruner.decode_ids(Tensor(np.zeros((1, 3, 16))))


def test_caption_loss_ignores_padding(bundle):
    p = prefixes(bundle, 2)
    both = float(bundle.cappruner.caption_loss(p, [[5, 6], [7, 8, 9, 10]]).data)
    one = bundle.cappruner.caption_loss(ops.getitem(p, slice(0, 1)), [[5, 6]])
    two = bundle.cappruner.caption_loss(ops.getitem(p, slice(1, 2)), [[7, 8, 9, 10]])
    # token-mean over 3 + 5 target positions
    assert both == pytest.approx((3 * float(one.data) + 5 * float(two.data)) / 8, rel=1e-12)


def test_tap_layer_config_validated():
    with pytest.raises(ConfigError):
        CapPrunerConfig(layers=2, tap_layer=3)
    assert CapPrunerConfig(layers=4).tap_layer == 2
