import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import tiny_model_config
from langdc import training
from langdc.corpus.vocab import EOS_ID
from langdc.errors import ConfigError, ContractViolation
from langdc.model import ModelBundle, ModelConfig
from langdc.training import (
    CONTRACTS, SCHEME_FULL, SCHEME_NO_CAP_PRETRAIN, STAGES, CheckpointError, StageSpec, check_contract,
    length_bucketed_batches, load_checkpoint, read_checkpoint, run_stage, run_stage2, save_checkpoint, scheme_name,
)


def snapshot(bundle):
    return {n: p.data.copy() for n, p in bundle.named_parameters()}


@pytest.mark.parametrize("stage", STAGES)
def test_stage_touches_only_its_contract(stage, small_corpus):
    b = ModelBundle(tiny_model_config(), seed=1)
    before = snapshot(b)
    res = run_stage(b, small_corpus, StageSpec(stage, max_steps=2, lr=1e-2, batch_size=4))
    after = snapshot(b)
    moved = {n for n in before if not np.array_equal(before[n], after[n])}
    assert moved and moved <= set(res.trainable)
    for n in set(before) - set(res.trainable):
        assert np.array_equal(before[n], after[n]), n


def test_sft_trains_lora_and_llm_side_projectors_only(small_corpus):
    b = ModelBundle(tiny_model_config(), seed=2)
    names = check_contract(b, StageSpec("SFT"))
    assert any(n.endswith("lora_a") for n in names) and any(n.startswith("post_proj") for n in names)
    assert not any(n.startswith(("cappruner", "encoders", "proj_cap")) for n in names)
    assert not any(n.endswith(".weight") and ".base." in n for n in names)


def test_wider_trainable_set_rejected():
    b = ModelBundle(tiny_model_config(), seed=0)
    with pytest.raises(ContractViolation):
        check_contract(b, StageSpec("PostPretrain", trainable=("post_proj.*", "llm.*")))
    with pytest.raises(ContractViolation, match="match no parameter"):
        check_contract(b, StageSpec("PostPretrain", trainable=("nothing.*",)))


def test_tampering_detected(small_corpus, monkeypatch):
    b = ModelBundle(tiny_model_config(), seed=0)
    impl = training._IMPL["PostPretrain"]
    orig = impl.loss

    def sneaky(self, batch):
        self.bundle.llm.tok.data[0, 0] += 1e-9
        return orig(self, batch)

    monkeypatch.setattr(impl, "loss", sneaky)
    with pytest.raises(ContractViolation):
        run_stage(b, small_corpus, StageSpec("PostPretrain", max_steps=1))


def test_unknown_stage():
    with pytest.raises(ConfigError):
        StageSpec("Distill")


@given(st.lists(st.integers(0, 50), min_size=1, max_size=200), st.integers(1, 17))
def test_batches_partition_units(lengths, bs):
    batches = length_bucketed_batches(lengths, bs, np.random.default_rng(0))
    flat = sorted(i for b in batches for i in b)
    assert flat == list(range(len(lengths)))
    assert all(1 <= len(b) <= bs for b in batches)


def test_checkpoint_round_trip(tmp_path, small_corpus):
    b = ModelBundle(tiny_model_config(), seed=4)
    run_stage(b, small_corpus, StageSpec("PostPretrain", max_steps=1))
    path = save_checkpoint(tmp_path / "a.ckpt", b, provenance=["x"])
    fresh = ModelBundle(tiny_model_config(), seed=5)
    ck = load_checkpoint(path, fresh)
    assert ck.meta["provenance"] == ["x"]
    for (n, p), (_, q) in zip(b.named_parameters(), fresh.named_parameters()):
        assert np.array_equal(p.data, q.data), n
    assert ModelConfig.from_dict(ck.meta["config"]) == b.cfg


def test_resume_is_bitwise(tmp_path, small_corpus):
    spec = StageSpec("SFT", max_steps=4, batch_size=3, lr=5e-3)
    a = ModelBundle(tiny_model_config(), seed=6)
    run_stage(a, small_corpus, spec)

    b = ModelBundle(tiny_model_config(), seed=6)
    r = run_stage(b, small_corpus, spec, stop_after=2)
    path = save_checkpoint(tmp_path / "mid.ckpt", b, r.optimizer, spec, 2)
    c = ModelBundle(tiny_model_config(), seed=99)
    ck = load_checkpoint(path, c)
    run_stage(c, small_corpus, spec, resume=ck)
    for (n, p), (_, q) in zip(a.named_parameters(), c.named_parameters()):
        assert np.array_equal(p.data, q.data), n


def test_truncated_checkpoint(tmp_path):
    b = ModelBundle(tiny_model_config(), seed=0)
    path = save_checkpoint(tmp_path / "t.ckpt", b)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        read_checkpoint(path)


def test_digest_mismatch(tmp_path):
    b = ModelBundle(tiny_model_config(), seed=0)
    path = save_checkpoint(tmp_path / "d.ckpt", b)
    other = ModelBundle(tiny_model_config(max_tokens=30), seed=0)  # longer position table
    assert other.digest() != b.digest()
    with pytest.raises(CheckpointError, match="digest"):
        load_checkpoint(path, other)


def test_metrics_csv_written(tmp_path, small_corpus):
    b = ModelBundle(tiny_model_config(), seed=0)
    run_stage(b, small_corpus, StageSpec("CapPrunerPretrain", max_steps=3, batch_size=4), run_dir=tmp_path)
    rows = (tmp_path / "metrics_CapPrunerPretrain.csv").read_text().splitlines()
    assert rows[0] == "step,loss,lr,seconds" and len(rows) == 4


def test_scheme_names_and_skips(small_corpus):
    assert scheme_name() == SCHEME_FULL
    b = ModelBundle(tiny_model_config(), seed=0)
    res, name = run_stage2(b, small_corpus, spec_b=StageSpec("PostPretrain", max_steps=1),
                           skip_cappruner_pretrain=True)
    assert name == SCHEME_NO_CAP_PRETRAIN and [r.stage for r in res] == ["PostPretrain"]


def test_contract_table_covers_stages():
    assert set(CONTRACTS) == set(STAGES)


def test_language_pretrain_trains_base_llm_only(small_corpus):
    b = ModelBundle(tiny_model_config(), seed=7)
    names = set(check_contract(b, StageSpec("LanguagePretrain")))
    llm = {n for n, _ in b.named_parameters() if n.startswith("llm.")}
    assert names == {n for n in llm if "lora" not in n}
    res = run_stage(b, small_corpus, StageSpec("LanguagePretrain", max_steps=2, lr=1e-2, batch_size=8))
    assert not any(p.data.any() for n, p in b.named_parameters() if n.endswith("lora_b"))
    assert len(res.losses) == 2


def test_language_pretrain_blank_prefix_fits_context(small_corpus):
    b = ModelBundle(tiny_model_config(), seed=0)
    impl = training._IMPL["LanguagePretrain"](b, small_corpus, StageSpec("LanguagePretrain"))
    impl.prepare()
    longest = max(len(i) for i, _ in impl.rows)
    assert 0 < impl.max_offset <= b.cfg.llm.context - longest
    assert all(len(i) == len(t) for i, t in impl.rows)
    offsets = {impl.offset([u]) for u in impl.units()}
    assert len(offsets) > 1 and max(offsets) <= impl.max_offset


def test_language_pretrain_qa_rows_read_gold_captions(small_corpus):
    b = ModelBundle(tiny_model_config(), seed=0)
    impl = training._IMPL["LanguagePretrain"](b, small_corpus, StageSpec("LanguagePretrain"))
    impl.prepare()
    q = small_corpus.qa[0]
    story = [t for s in range(4) for t in small_corpus.caption(q.clip_id, s).tokens]
    inputs, targets = impl.rows[len(small_corpus.clips) * 4]
    assert inputs == story + q.prompt_ids() + q.answer_ids()
    assert [t for t in targets if t != -100] == q.answer_ids() + [EOS_ID]
