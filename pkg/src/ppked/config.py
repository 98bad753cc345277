"""Run configuration: one YAML file covering model, training, data and paths."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass
class ModelConfig:
    d: int = 512
    n_heads: int = 8
    n_patches: int = 49
    feature_dim: int = 2048
    feature_kind: str = "raw"
    n_retrieved: int = 100
    poke_depth: int = 1
    prke_depth: int = 1
    decoder_depth: int = 3
    gcn_layers: int = 2
    dropout: float = 0.1
    dtype: str = "float32"
    max_len: int = 60

    def validate(self) -> None:
        if self.d % self.n_heads:
            raise ConfigError(f"model.d={self.d} is not divisible by model.n_heads={self.n_heads}")
        if self.feature_kind not in ("raw", "projected"):
            raise ConfigError("model.feature_kind must be 'raw' or 'projected'")
        if self.feature_kind == "projected" and self.feature_dim != self.d:
            raise ConfigError("projected features must already have width model.d")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("model.dtype must be float32 or float64")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("model.dropout must be in [0, 1)")
        for name in ("poke_depth", "prke_depth", "decoder_depth", "gcn_layers", "n_retrieved", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 50
    patience: int = 10
    pretrain_epochs: int = 0
    pretrain_lr: float = 1e-3
    seed: int = 0
    eval_every: int = 1
    beam_width: int = 1


@dataclass
class DataConfig:
    num_records: int = 100
    abnormality_rate: float = 0.3
    noise: float = 0.3
    signal: float = 2.0
    styles: int = 2
    max_topics: int = 2
    records_per_patient: int = 1
    vocab_top_k: int | None = None
    vocab_min_freq: int | None = None
    embed_seed: int = 0


@dataclass
class PathsConfig:
    workdir: str = "run"
    corpus: str = "corpus.jsonl"
    features: str = "features.bin"
    embeddings: str = "embeddings.bin"
    manifest: str = "manifest.json"
    index: str = "index.bin"
    graph: str | None = None
    checkpoints: str = "checkpoints"
    log: str = "train_log.jsonl"
    generations: str = "generations.jsonl"

    def resolve(self, name: str) -> Path:
        value = getattr(self, name)
        p = Path(value)
        return p if p.is_absolute() else Path(self.workdir) / p


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        if self.train.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict | None) -> "RunConfig":
        raw = raw or {}
        sections = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(raw) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for f in dataclasses.fields(cls):
            sub_cls = f.default_factory
            values = raw.get(f.name) or {}
            if not isinstance(values, dict):
                raise ConfigError(f"config section {f.name!r} must be a mapping")
            names = {sf.name for sf in dataclasses.fields(sub_cls)}
            bad = set(values) - names
            if bad:
                raise ConfigError(f"unknown keys in {f.name}: {sorted(bad)}")
            kwargs[f.name] = sub_cls(**values)
        return cls(**kwargs).validate()

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls().validate()
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
        return cls.from_dict(raw)

    def dump(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)


def hyperparameters(model: ModelConfig) -> dict:
    """The architecture-defining fields compared when loading a checkpoint."""
    d = dataclasses.asdict(model)
    d.pop("dropout")
    d.pop("max_len")
    return d
