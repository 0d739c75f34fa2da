"""Experiment configuration as sectioned ``key = value`` text.

Sections: ``[data]``, ``[model]``, ``[train]``, ``[run]`` and ``[sweep]``.
Every key has a default; unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

from .seqmodel import ModelConfig
from .synthdata import SynthConfig, SynthDataError
from .trainharness import TrainConfig, TrainConfigError


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    embed_dim: int = 64
    ffn_dim: int = 128
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 1
    max_len: int = 128

    def build(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size, **dataclasses.asdict(self))


@dataclass
class RunSection:
    run_id: str = ""
    threads: int = 1


@dataclass
class SweepSection:
    modes: str = "1,2,3,4,5"
    finetune_kind: str = "oaxe"
    xe_finetune: bool = False

    @property
    def mode_list(self) -> list[int]:
        return [int(m) for m in self.modes.split(",") if m.strip()]


@dataclass
class ExperimentConfig:
    data: SynthConfig = field(default_factory=SynthConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunSection = field(default_factory=RunSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def validate(self) -> None:
        try:
            self.data.validate()
            self.model.build(self.data.vocab_size)
            if self.train.loss_kind not in ("oaxe", "oaxe_trunc") or self.train.pretrain:
                self.train.validate()
        except (SynthDataError, TrainConfigError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.run.threads < 1:
            raise ConfigError("run.threads must be positive")
        for m in self.sweep.mode_list:
            if not 1 <= m <= 5:
                raise ConfigError(f"sweep mode counts must be in 1..5, got {m}")
        if self.sweep.finetune_kind not in ("oaxe", "oaxe_trunc"):
            raise ConfigError("sweep.finetune_kind must be oaxe or oaxe_trunc")

    @property
    def model_config(self) -> ModelConfig:
        return self.model.build(self.data.vocab_size)


SECTIONS = {"data": SynthConfig, "model": ModelSection, "train": TrainConfig,
            "run": RunSection, "sweep": SweepSection}


def _convert(raw: str, target_type, where: str):
    try:
        if target_type is bool:
            lowered = raw.strip().lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return lowered in ("true", "1", "yes")
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        if target_type is tuple:
            return tuple(float(p) for p in raw.split(",") if p.strip())
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from exc


_TYPES = {"int": int, "float": float, "str": str, "bool": bool, "tuple": tuple}


def _section_values(cls, items: dict[str, str], section: str) -> dict:
    known = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"unknown key {section}.{key}")
        declared = known[key].type
        type_name = declared if isinstance(declared, str) else declared.__name__
        out[key] = _convert(raw, _TYPES.get(type_name, str), f"{section}.{key}")
    return out


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    kwargs = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        values = _section_values(SECTIONS[section], dict(parser.items(section)), section)
        try:
            kwargs[section] = SECTIONS[section](**values)
        except (SynthDataError, ValueError) as exc:
            raise ConfigError(f"[{section}]: {exc}") from exc
    cfg = ExperimentConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def dump_config(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section in SECTIONS:
        values = dataclasses.asdict(getattr(cfg, section))
        parser[section] = {
            k: ",".join(repr(x) for x in v) if isinstance(v, tuple) else str(v)
            for k, v in values.items()
        }
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
