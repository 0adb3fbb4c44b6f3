"""Flat key/value run configuration read from TOML.

Every key is listed in :data:`KEYS` with its default and a one-line description;
unknown keys are rejected. A run directory always receives a ``config.toml``
snapshot of the resolved values.
"""

from __future__ import annotations

from dataclasses import replace

from ._toml import TOMLDecodeError, load_toml
from .assembly import LlmConfig, LoraConfig
from .encoders import EncoderConfig
from .errors import ConfigError
from .model import ModelConfig
from .pruners import BasePrunerConfig, CapPrunerConfig
from .training import StageSpec

# key: (default, description)
KEYS = {
    "seed": (0, "model initialisation and batch-order seed"),
    "data_seed": (0, "corpus generation seed"),
    "train_clips": (2000, "clips in the generated training split"),
    "eval_clips": (200, "clips in the generated held-out split"),
    "richness_min": (1, "lowest clip richness generated"),
    "richness_max": (24, "highest clip richness generated"),
    "grid": (8, "symbol grid side of every frame"),
    "image_grid": (4, "frame-encoder output side per frame"),
    "video_grid": (4, "segment-encoder output side per frame"),
    "enc_dim": (64, "encoder width"),
    "enc_layers": (1, "transformer blocks per encoder"),
    "enc_heads": (4, "attention heads per encoder block"),
    "stride": (2, "base pruner pooling stride"),
    "cap_layers": (4, "captioner decoder blocks"),
    "cap_dim": (64, "captioner width"),
    "cap_heads": (4, "captioner attention heads"),
    "cap_max_tokens": (128, "longest caption the captioner may emit per segment"),
    "tap_layer": (-1, "captioner block whose states become soft tokens (-1 = middle)"),
    "llm_layers": (6, "base LLM blocks"),
    "llm_dim": (96, "base LLM width"),
    "llm_heads": (4, "base LLM attention heads"),
    "llm_context": (768, "base LLM positions"),
    "lora_rank": (8, "LoRA rank on the attention matrices"),
    "lora_alpha": (16.0, "LoRA scale numerator"),
    "projector_hidden": (128, "hidden width of every projector"),
    "lm_epochs": (0.5, "text-only base LLM pretraining epochs (0 skips it)"),
    "lm_lr": (3e-3, "text-only base LLM pretraining peak learning rate"),
    "lm_batch_size": (32, "text-only base LLM pretraining rows per step"),
    "s1_epochs": (0.25, "cross-modal pretraining epochs"),
    "s1_lr": (1e-3, "cross-modal pretraining peak learning rate"),
    "s1_batch_size": (16, "cross-modal pretraining segments per step"),
    "s2a_epochs": (1.0, "captioner pretraining epochs"),
    "s2a_lr": (1e-3, "captioner pretraining peak learning rate"),
    "s2a_batch_size": (16, "captioner pretraining segments per step"),
    "s2b_epochs": (0.5, "post-projector pretraining epochs"),
    "s2b_lr": (1e-3, "post-projector pretraining peak learning rate"),
    "s2b_batch_size": (16, "post-projector pretraining segments per step"),
    "s3_epochs": (1.0, "instruction tuning epochs"),
    "s3_lr": (2e-3, "instruction tuning peak learning rate"),
    "s3_batch_size": (8, "instruction tuning clips per step"),
    "eval_batch": (16, "clips per evaluation batch"),
}

STAGE_KEYS = {"LanguagePretrain": "lm", "CrossModalPretrain": "s1", "CapPrunerPretrain": "s2a", "PostPretrain": "s2b", "SFT": "s3"}


class RunConfig(dict):
    """Resolved flat configuration; a dict of every key in :data:`KEYS`."""

    def __getattr__(self, k):
        try:
            return self[k]
        except KeyError:
            raise AttributeError(k) from None

    def model_config(self):
        return ModelConfig(
            encoder=EncoderConfig(self.grid, self.image_grid, self.video_grid, self.enc_dim, self.enc_layers, self.enc_heads),
            base_pruner=BasePrunerConfig(self.stride),
            cap_pruner=CapPrunerConfig(self.cap_layers, self.cap_dim, self.cap_heads, max_tokens=self.cap_max_tokens,
                                       tap_layer=self.tap_layer),
            llm=LlmConfig(self.llm_layers, self.llm_dim, self.llm_heads, context=self.llm_context),
            lora=LoraConfig(self.lora_rank, self.lora_alpha),
            projector_hidden=self.projector_hidden,
        )

    def stage_spec(self, stage, seed=None):
        p = STAGE_KEYS[stage]
        spec = StageSpec(stage, epochs=self[f"{p}_epochs"], lr=self[f"{p}_lr"],
                         batch_size=self[f"{p}_batch_size"], seed=self.seed)
        return spec if seed is None else replace(spec, seed=seed)

    def to_toml(self):
        lines = []
        for k in KEYS:
            v = self[k]
            lines.append(f"{k} = {_toml_value(v)}")
        return "\n".join(lines) + "\n"


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key, value):
    default = KEYS[key][0]
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if type(value) is not type(default):
        raise ConfigError(f"config key {key!r} expects {type(default).__name__}, got {value!r}")
    return value


def make_config(values=None):
    values = dict(values or {})
    unknown = sorted(set(values) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    cfg = RunConfig({k: d for k, (d, _) in KEYS.items()})
    for k, v in values.items():
        cfg[k] = _coerce(k, v)
    try:
        cfg.model_config()
    except (ValueError, ConfigError) as e:
        raise ConfigError(str(e)) from None
    return cfg


def load_config(path=None, overrides=None):
    values = {}
    if path is not None:
        try:
            values = load_toml(path)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
        nested = [k for k, v in values.items() if isinstance(v, dict)]
        if nested:
            raise ConfigError(f"config is flat; tables not allowed: {', '.join(nested)}")
    values.update(overrides or {})
    return make_config(values)


def describe_keys():
    """Markdown table of every key, its default and meaning."""
    rows = ["| key | default | meaning |", "|---|---|---|"]
    rows += [f"| `{k}` | `{_toml_value(d)}` | {doc} |" for k, (d, doc) in KEYS.items()]
    return "\n".join(rows)
