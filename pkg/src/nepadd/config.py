"""Run configuration file: every module config in one YAML document.

Every field has a default and unknown keys are rejected at any depth, so a
typo in a config file fails loudly instead of being silently ignored.
"""
from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from nepadd.classifier import ClassifierConfig
from nepadd.datagen import CorpusConfig
from nepadd.errors import ConfigError
from nepadd.model import ModelConfig
from nepadd.ner import NerBranchConfig
from nepadd.padd import PaddBranchConfig
from nepadd.training import PretrainConfig, TrainConfig

SEED_ENV = "NEPADD_SEED"


@dataclass(frozen=True)
class ModelSection:
    padd: PaddBranchConfig = field(default_factory=PaddBranchConfig)
    ner: NerBranchConfig = field(default_factory=NerBranchConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    gate_mode: str = "per-frame-scalar"

    def model_config(self, aggregation: str) -> ModelConfig:
        return ModelConfig(self.padd, self.ner, self.classifier, aggregation, self.gate_mode)


@dataclass(frozen=True)
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return _build(cls, data or {}, "")

    def with_seed(self, seed: int) -> RunConfig:
        return replace(self, corpus=replace(self.corpus, seed=seed),
                       pretrain=replace(self.pretrain, seed=seed),
                       train=replace(self.train, seed=seed))

    def model_config(self) -> ModelConfig:
        return self.model.model_config(self.train.aggregation)


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        where = path or "top level"
        raise ConfigError(f"unknown config key(s) at {where}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = hints[name]
        if dataclasses.is_dataclass(sub):
            kwargs[name] = _build(sub, value, f"{path}{name}.")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def parse_run_config(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    return RunConfig.from_dict(data)


def dump_run_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def load_run_config(path=None, env=None) -> RunConfig:
    """Defaults, then the YAML file (if any), then ``NEPADD_SEED`` from ``env``."""
    if path is None:
        cfg = RunConfig()
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cfg = parse_run_config(p.read_text())
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from exc
        cfg = cfg.with_seed(seed)
    return cfg
