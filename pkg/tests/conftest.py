import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from langdc.assembly import LlmConfig, LoraConfig
from langdc.corpus import build_corpus
from langdc.encoders import EncoderConfig
from langdc.model import ModelBundle, ModelConfig
from langdc.pruners import BasePrunerConfig, CapPrunerConfig

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tiny_model_config(**cap):
    return ModelConfig(
        encoder=EncoderConfig(grid=8, image_grid=2, video_grid=2, embed_dim=16, heads=2),
        base_pruner=BasePrunerConfig(2),
        cap_pruner=CapPrunerConfig(layers=2, embed_dim=16, heads=2, **({"max_tokens": 24} | cap)),
        llm=LlmConfig(layers=2, embed_dim=16, heads=2, context=256),
        lora=LoraConfig(rank=2, alpha=4.0),
        projector_hidden=16,
    )


@pytest.fixture
def tiny_bundle():
    return ModelBundle(tiny_model_config(), seed=0)


@pytest.fixture(scope="session")
def small_corpus():
    return build_corpus(3, 12, richness_range=(1, 8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
