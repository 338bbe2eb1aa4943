"""Experiment configuration: YAML in, validated dataclasses out.

Unknown keys are rejected and error messages carry the offending field path.
The resolved config is serialized into every output directory (provenance).
See docs/config.md for the full key schema.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError

DEFAULT_LAMBDAS = (0.003, 0.01, 0.03, 0.1)
DEFAULT_LEVEL_CHANNELS = (32, 32, 24, 16)


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    seed: int = 1234
    count: int = 2048
    size: int = 64
    path: str = ""


@dataclass
class HeldoutConfig:
    seed: int = 99
    count: int = 64
    size: int = 64


@dataclass
class SqTrainConfig:
    latent_channels: int = 32
    base_channels: int = 48
    level_channels: tuple = DEFAULT_LEVEL_CHANNELS
    lambdas: tuple = DEFAULT_LAMBDAS
    steps: int = 6000
    batch_size: int = 6
    lr: float = 1e-3


@dataclass
class VqTrainConfig:
    embed_dim: int = 32
    base_channels: int = 48
    level_channels: tuple = DEFAULT_LEVEL_CHANNELS
    codebook_size: int = 1024
    small_codebook_size: int = 8
    steps: int = 8000
    small_steps: int = 2000
    batch_size: int = 6
    lr: float = 1e-3
    commitment_beta: float = 0.25
    dead_code_epochs: int = 2


@dataclass
class ModeTrainSection:
    gate_per_channel: bool = False
    anchor_mode: str = "both"
    steps: int = 20000
    batch_size: int = 6
    lr: float = 1e-4
    adversarial: bool = False
    disc_lr: float = 1e-4
    loss_weights: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    seed: int = 7
    token_mode: str = "fixed"
    out_dir: str = "artifacts"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    heldout: HeldoutConfig = field(default_factory=HeldoutConfig)
    sq: SqTrainConfig = field(default_factory=SqTrainConfig)
    vq: VqTrainConfig = field(default_factory=VqTrainConfig)
    mode: ModeTrainSection = field(default_factory=ModeTrainSection)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sq"]["level_channels"] = list(self.sq.level_channels)
        d["sq"]["lambdas"] = list(self.sq.lambdas)
        d["vq"]["level_channels"] = list(self.vq.level_channels)
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


_SECTIONS = {
    "dataset": DatasetConfig,
    "heldout": HeldoutConfig,
    "sq": SqTrainConfig,
    "vq": VqTrainConfig,
    "mode": ModeTrainSection,
}
_TUPLE_FIELDS = {"level_channels", "lambdas"}


def _apply(obj, data: dict, prefix: str):
    for key, value in data.items():
        if not hasattr(obj, key):
            raise ConfigError(f"{prefix}{key}: unknown field")
        if isinstance(value, dict) and key in _SECTIONS:
            _apply(getattr(obj, key), value, f"{prefix}{key}.")
        elif key in _TUPLE_FIELDS:
            setattr(obj, key, tuple(value))
        else:
            current = getattr(obj, key)
            if key != "loss_weights" and isinstance(current, (int, float, str, bool)):
                if isinstance(current, bool) and not isinstance(value, bool):
                    raise ConfigError(f"{prefix}{key}: expected a boolean")
                if isinstance(current, (int, float)) and not isinstance(value, (int, float)):
                    raise ConfigError(f"{prefix}{key}: expected a number")
                if isinstance(current, str) and not isinstance(value, str):
                    raise ConfigError(f"{prefix}{key}: expected a string")
            setattr(obj, key, value)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.dataset.kind not in ("synthetic", "folder"):
        raise ConfigError("dataset.kind: must be synthetic|folder")
    if cfg.dataset.kind == "folder" and not cfg.dataset.path:
        raise ConfigError("dataset.path: required when dataset.kind is folder")
    if cfg.dataset.size % 16 != 0:
        raise ConfigError("dataset.size: must be a multiple of 16")
    if cfg.heldout.size % 16 != 0:
        raise ConfigError("heldout.size: must be a multiple of 16")
    if cfg.dataset.count < 0:
        raise ConfigError("dataset.count: must be >= 0")
    if not cfg.sq.lambdas or any(l <= 0 for l in cfg.sq.lambdas):
        raise ConfigError("sq.lambdas: need at least one positive value")
    if len(cfg.sq.level_channels) != 4 or len(cfg.vq.level_channels) != 4:
        raise ConfigError("level_channels: exactly 4 decoder levels are supported")
    if not 2 <= cfg.vq.codebook_size <= 65536:
        raise ConfigError("vq.codebook_size: must be in [2, 65536]")
    if cfg.vq.codebook_size & (cfg.vq.codebook_size - 1):
        raise ConfigError("vq.codebook_size: must be a power of two (header stores log2)")
    if cfg.token_mode not in ("fixed", "entropy"):
        raise ConfigError("token_mode: must be fixed|entropy")
    if cfg.mode.anchor_mode not in ("both", "f", "p"):
        raise ConfigError("mode.anchor_mode: must be both|f|p")
    for section in ("sq", "vq", "mode"):
        sec = getattr(cfg, section)
        if sec.steps < 0 or sec.batch_size < 1 or sec.lr <= 0:
            raise ConfigError(f"{section}: steps >= 0, batch_size >= 1, lr > 0 required")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    cfg = ExperimentConfig()
    _apply(cfg, data, "")
    return validate(cfg)
