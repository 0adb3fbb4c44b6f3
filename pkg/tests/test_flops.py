import pytest
from hypothesis import given
from hypothesis import strategies as st

from langdc.errors import ConfigError
from langdc.flopsacct import (
    FORMULA_VERSION, QWEN25_05B, QWEN25_3B, ArchProfile, TokenPlan, attention_term, pipeline_flops, plan_from_dict,
    prefill_flops, profile_from_dict,
)

TINY = ArchProfile("tiny", layers=1, hidden=2, ffn=4, vocab=8)


def test_zero_tokens():
    assert prefill_flops(QWEN25_3B, 0) == 0


def test_hand_computed_case():
    # projections 8*3*2*2 = 96, scores 4*9*2 = 72, ffn 4*3*2*4 = 96, head 2*3*2*8 = 96
    assert prefill_flops(TINY, 3) == 360


def test_quadratic_term_scales_by_four():
    assert attention_term(QWEN25_3B, 2 * 777) == 4 * attention_term(QWEN25_3B, 777)
    linear = prefill_flops(QWEN25_3B, 777) - attention_term(QWEN25_3B, 777)
    assert prefill_flops(QWEN25_3B, 1554) - attention_term(QWEN25_3B, 1554) == 2 * linear


@given(st.integers(0, 5000))
def test_monotone(n):
    assert prefill_flops(QWEN25_05B, n + 1) > prefill_flops(QWEN25_05B, n)


plans = st.builds(
    TokenPlan,
    baseline_tokens=st.integers(0, 4000), base_tokens=st.integers(0, 1000),
    cap_lengths=st.tuples(*[st.integers(0, 128)] * 4), cap_prefix=st.tuples(*[st.integers(0, 900)] * 4),
    text_tokens=st.integers(0, 100), answer_tokens=st.integers(0, 5),
)


@given(plans)
def test_totals_are_component_sums(plan):
    rep = pipeline_flops(QWEN25_3B, QWEN25_05B, plan)
    for pipe, comps in rep.components.items():
        assert rep.total(pipe) == sum(comps.values())
    assert rep.version == FORMULA_VERSION


@given(plans, st.sampled_from(["base_tokens", "text_tokens", "cap"]))
def test_pipeline_monotone_in_tokens(plan, which):
    before = pipeline_flops(QWEN25_3B, QWEN25_05B, plan).total("langdc")
    if which == "cap":
        bumped = TokenPlan(**{**plan.__dict__, "cap_lengths": (plan.cap_lengths[0] + 1,) + plan.cap_lengths[1:]})
    else:
        bumped = TokenPlan(**{**plan.__dict__, which: getattr(plan, which) + 1})
    assert pipeline_flops(QWEN25_3B, QWEN25_05B, bumped).total("langdc") > before


def test_decomposition_law():
    plan = TokenPlan(baseline_tokens=832, base_tokens=832, cap_lengths=(0, 0, 0, 0), cap_prefix=(208,) * 4)
    rep = pipeline_flops(QWEN25_3B, QWEN25_05B, plan)
    assert rep.total("langdc") == rep.total("baseline") + 4 * prefill_flops(QWEN25_05B, 208)


def test_paper_plan_ratio():
    plan = TokenPlan(baseline_tokens=3328, base_tokens=832, cap_lengths=(59,) * 4, cap_prefix=(832,) * 4)
    assert sum(plan.cap_lengths) == 236
    assert 0.35 <= pipeline_flops(QWEN25_3B, QWEN25_05B, plan).ratio <= 0.65


def test_encoder_toggle_adds_equally():
    enc = ArchProfile("vit", 24, 1024, 4096, 1)
    plan = TokenPlan(encoder_tokens=9216)
    a = pipeline_flops(QWEN25_3B, QWEN25_05B, plan)
    b = pipeline_flops(QWEN25_3B, QWEN25_05B, plan, encoder=enc)
    extra = prefill_flops(enc, 9216)
    assert b.total("baseline") - a.total("baseline") == extra == b.total("langdc") - a.total("langdc")


def test_profile_and_plan_parsing(tmp_path):
    assert profile_from_dict("x", {"layers": 1, "hidden": 2, "ffn": 4, "vocab": 8}) == ArchProfile("x", 1, 2, 4, 8)
    with pytest.raises(ConfigError):
        profile_from_dict("x", {"layers": 1})
    with pytest.raises(ConfigError):
        plan_from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        ArchProfile("bad", 0, 1, 1, 1)
    assert plan_from_dict({"cap_lengths": [1, 2], "cap_prefix": [3, 4]}).cap_lengths == (1, 2)


def test_csv_output(tmp_path):
    rep = pipeline_flops(QWEN25_3B, QWEN25_05B, TokenPlan())
    rep.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "pipeline,component,flops,version"
    assert any(line.startswith("langdc,total,") for line in lines)
