"""Experiment configuration: strict YAML schema over the dataclass configs.

One nested key-value file describes an experiment: arena, training, model,
and an optional list of evaluation-target arenas (each given as overrides of
the training arena). Unknown keys are errors, not warnings; every error names
the offending field.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import yaml

from .arena import ArenaConfig
from .policy import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    arena: ArenaConfig
    train: TrainConfig
    model: ModelConfig = field(default_factory=ModelConfig)
    eval_targets: List[ArenaConfig] = field(default_factory=list)

    def resolved(self) -> Dict[str, object]:
        return {
            "arena": dataclasses.asdict(self.arena),
            "train": dataclasses.asdict(self.train),
            "model": dataclasses.asdict(self.model),
            "eval": [dataclasses.asdict(e) for e in self.eval_targets],
        }


def _build(cls, section: dict, where: str):
    valid = {f.name for f in dataclasses.fields(cls)}
    for key in section:
        if key not in valid:
            raise ConfigError(f"unknown field '{where}.{key}'")
    try:
        return cls(**section)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid section '{where}': {e}") from e


def from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    known = {"arena", "train", "model", "eval"}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown field '{key}'")
    for required in ("arena", "train"):
        if required not in data:
            raise ConfigError(f"missing required field '{required}'")
    arena = _build(ArenaConfig, data["arena"] or {}, "arena")
    train = _build(TrainConfig, data["train"] or {}, "train")
    model = _build(ModelConfig, data.get("model") or {}, "model")
    eval_targets = []
    for i, entry in enumerate(data.get("eval") or []):
        merged = dict(data["arena"] or {})
        merged.update(entry or {})
        eval_targets.append(_build(ArenaConfig, merged, f"eval[{i}]"))
    return ExperimentConfig(arena=arena, train=train, model=model, eval_targets=eval_targets)


def load_experiment_config(path: Path) -> ExperimentConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is None:
        raise ConfigError(f"empty config file {path}")
    return from_dict(data)


def apply_overrides(data: dict, overrides: List[str]) -> dict:
    """Apply `section.key=value` command-line overrides onto the raw mapping."""
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in data.items()}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' must look like section.key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key '{dotted}' must be section.key")
        section, key = parts
        value = yaml.safe_load(raw)
        out.setdefault(section, {})
        if not isinstance(out[section], dict):
            raise ConfigError(f"cannot override non-mapping section '{section}'")
        out[section][key] = value
    return out


def dump_config(cfg: ExperimentConfig, path: Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.resolved(), fh, sort_keys=True)
