"""Experiment configuration and the `key = value` config-file dialect.

Files are UTF-8 lines of ``key = value`` with ``#`` comments. Dotted keys
address the model block, e.g. ``model.tpavi_stages = 1,2,3,4``. List values
are comma-separated.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .model import ModelConfig
from .storage import read_kv

DEFAULT_EPOCHS = {"s4": 15, "ms3": 30, "disambig": 15}


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    setting: str = "s4"                # supervision regime: s4 | ms3
    loss_variant: str = "none"         # alignment term: none | av | vv
    loss_weight: float = 0.5           # balance between supervision and alignment
    lr: float = 1e-4
    batch_size: int = 4
    epochs: Optional[int] = None       # None resolves per setting
    data_dir: str = "data"
    seed: int = 0
    init_checkpoint: Optional[str] = None
    pretrain_data_dir: Optional[str] = None  # source data for the warm-start recipe
    threshold: float = 0.5

    def __post_init__(self):
        if self.setting not in ("s4", "ms3"):
            raise ValueError(f"setting must be s4 or ms3, got {self.setting!r}")
        if self.loss_variant not in ("none", "av", "vv"):
            raise ValueError(f"loss_variant must be none, av, or vv, "
                             f"got {self.loss_variant!r}")
        if self.loss_variant != "none" and self.model.fusion_mode == "none":
            raise ValueError("an alignment loss needs audio fusion enabled; "
                             "set loss_variant = none when fusion_mode is none")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs is not None and self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")

    @property
    def resolved_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        return DEFAULT_EPOCHS[self.setting]


_MODEL_INT = {"height", "width", "audio_dim", "channels", "mel_bins", "seed"}
_MODEL_TUPLE = {"stage_channels", "tpavi_stages", "aspp_rates"}
_EXP_INT = {"batch_size", "epochs", "seed"}
_EXP_FLOAT = {"lr", "loss_weight", "threshold"}
_EXP_STR = {"setting", "loss_variant", "data_dir", "init_checkpoint", "pretrain_data_dir"}

# the config-file spelling for the balance weight
_KEY_ALIASES = {"lambda": "loss_weight"}


def _int_tuple(text: str) -> tuple:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(tok) for tok in text.split(","))


def parse_config_text(pairs) -> ExperimentConfig:
    model_kwargs = {}
    exp_kwargs = {}
    for raw_key, value in pairs.items():
        key = _KEY_ALIASES.get(raw_key, raw_key)
        if key.startswith("model."):
            sub = key[len("model."):]
            if sub in _MODEL_INT:
                model_kwargs[sub] = int(value)
            elif sub in _MODEL_TUPLE:
                model_kwargs[sub] = _int_tuple(value)
            elif sub == "fusion_mode":
                model_kwargs[sub] = value
            else:
                raise ValueError(f"unknown config key {raw_key!r}")
        elif key in _EXP_INT:
            exp_kwargs[key] = int(value)
        elif key in _EXP_FLOAT:
            exp_kwargs[key] = float(value)
        elif key in _EXP_STR:
            exp_kwargs[key] = value
        else:
            raise ValueError(f"unknown config key {raw_key!r}")
    return ExperimentConfig(model=ModelConfig(**model_kwargs), **exp_kwargs)


def load_config(path) -> ExperimentConfig:
    return parse_config_text(read_kv(Path(path)))


def format_config(config: ExperimentConfig) -> str:
    """Render a config back to the file dialect (used by ablation outputs)."""
    lines = [
        f"setting = {config.setting}",
        f"loss_variant = {config.loss_variant}",
        f"lambda = {config.loss_weight:g}",
        f"lr = {config.lr:g}",
        f"batch_size = {config.batch_size}",
        f"epochs = {config.resolved_epochs}",
        f"data_dir = {config.data_dir}",
        f"seed = {config.seed}",
        f"threshold = {config.threshold:g}",
    ]
    if config.init_checkpoint:
        lines.append(f"init_checkpoint = {config.init_checkpoint}")
    if config.pretrain_data_dir:
        lines.append(f"pretrain_data_dir = {config.pretrain_data_dir}")
    m = config.model
    lines += [
        f"model.height = {m.height}",
        f"model.width = {m.width}",
        f"model.audio_dim = {m.audio_dim}",
        f"model.channels = {m.channels}",
        f"model.stage_channels = {','.join(str(c) for c in m.stage_channels)}",
        f"model.tpavi_stages = {','.join(str(s) for s in m.tpavi_stages)}",
        f"model.fusion_mode = {m.fusion_mode}",
        f"model.aspp_rates = {','.join(str(r) for r in m.aspp_rates)}",
        f"model.mel_bins = {m.mel_bins}",
        f"model.seed = {m.seed}",
    ]
    return "\n".join(lines) + "\n"


def with_model(config: ExperimentConfig, **model_overrides) -> ExperimentConfig:
    return replace(config, model=replace(config.model, **model_overrides))
