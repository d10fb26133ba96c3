"""Pipeline configuration.

Config files are YAML mappings of flat dotted keys to scalars::

    seed: 0
    data.family: ellipsoid
    cae.epochs: 200
    group.num_groups: 32

Unknown keys are rejected so a typo in a hyperparameter fails loudly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass
class DataConfig:
    family: str = "ellipsoid"
    train_count: int = 16
    test_count: int = 16
    points: int = 2048
    seed: int = 0


@dataclass
class CAEConfig:
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 8
    k: int = 20
    edge_width: int = 64
    feat_dim: int = 256
    latent_dim: int = 256
    hidden: int = 128
    decoder: str = "film"  # or "graph-attention"
    use_emd: bool = True
    seed: int = 0


@dataclass
class GroupConfig:
    method: str = "learned"  # or "uniform"
    num_groups: int = 128
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 8
    hidden: int = 128
    input: str = "sphere"  # or "concat"
    order: str = "spiral"  # "inverse" or "random"
    seed: int = 0


@dataclass
class VQConfig:
    epochs: int = 300
    lr: float = 1e-3
    batch_size: int = 8
    k: int = 20
    edge_width: int = 64
    feat_dim: int = 256
    hidden: int = 128
    codebook_size: int = 50
    code_dim: int = 4
    decay: float = 0.99
    eps: float = 1e-5
    shared_codebook: bool = False
    per_group_projection: bool = False
    dead_threshold: float = 1e-3
    dead_patience: int = 100
    use_emd: bool = True
    seed: int = 0


@dataclass
class TransformerConfig:
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 16
    n_layer: int = 4
    n_head: int = 4
    d_model: int = 128
    dropout: float = 0.0
    learned_pos: bool = True
    conditional: bool = False
    depth_res: int = 32
    seed: int = 0


@dataclass
class SampleConfig:
    top_p: float = 0.92
    temperature: float = 1.0
    top_k: int = 0
    resolution: int = 0  # 0: same as training resolution


@dataclass
class PipelineConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    cae: CAEConfig = field(default_factory=CAEConfig)
    group: GroupConfig = field(default_factory=GroupConfig)
    vq: VQConfig = field(default_factory=VQConfig)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)

    def validate(self):
        if self.group.num_groups < 1:
            raise ConfigError("group.num_groups must be >= 1")
        if self.vq.codebook_size < 2:
            raise ConfigError("vq.codebook_size must be >= 2")
        for section in ("data", "cae", "group", "vq", "transformer"):
            for f in dataclasses.fields(getattr(self, section)):
                value = getattr(getattr(self, section), f.name)
                if f.name in ("seed", "dropout", "lr", "decay", "eps", "dead_threshold"):
                    continue
                if isinstance(value, (int, float)) and not isinstance(value, bool) and value <= 0:
                    if not (f.name == "epochs" and value == 0):
                        raise ConfigError(f"{section}.{f.name} must be positive, got {value}")
        if not 0 < self.sample.top_p <= 1:
            raise ConfigError("sample.top_p must lie in (0, 1]")
        if self.sample.temperature <= 0:
            raise ConfigError("sample.temperature must be positive")
        return self

    def to_flat(self) -> dict:
        flat = {"seed": self.seed}
        for section in ("data", "cae", "group", "vq", "transformer", "sample"):
            for k, v in dataclasses.asdict(getattr(self, section)).items():
                flat[f"{section}.{k}"] = v
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> "PipelineConfig":
        cfg = cls()
        cfg.update(flat)
        return cfg

    def update(self, flat: dict):
        for key, value in flat.items():
            self.set(key, value)
        return self

    def set(self, key, value):
        if key == "seed":
            self.seed = _coerce(int, value, key)
            return
        section, _, name = key.partition(".")
        sub = getattr(self, section, None) if section in _SECTIONS else None
        if sub is None or not name or name not in {f.name for f in dataclasses.fields(sub)}:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(sub, name)
        setattr(sub, name, _coerce(type(current), value, key))


_SECTIONS = ("data", "cae", "group", "vq", "transformer", "sample")


def _coerce(kind, value, key):
    if isinstance(value, (dict, list)):
        raise ConfigError(f"{key}: expected a scalar, got {type(value).__name__}")
    try:
        if kind is bool:
            if isinstance(value, str):
                if value.lower() in ("true", "yes", "1"):
                    return True
                if value.lower() in ("false", "no", "0"):
                    return False
                raise ValueError(value)
            return bool(value)
        if kind is int and isinstance(value, float) and not value.is_integer():
            raise ValueError(value)
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {kind.__name__}") from None


def load_config(path=None, overrides=None) -> PipelineConfig:
    cfg = PipelineConfig()
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError("config file must be a mapping of dotted keys to scalars")
        cfg.update(raw)
    if overrides:
        cfg.update(overrides)
    return cfg.validate()


def save_config(cfg: PipelineConfig, path):
    Path(path).write_text(yaml.safe_dump(cfg.to_flat(), sort_keys=False))
