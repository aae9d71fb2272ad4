"""Run configuration: one YAML document with sections per subsystem.

Flag overrides are merged over file values, and the fully resolved result is
written into the output directory before a run starts, so every artifact can
be traced back to the exact configuration that produced it.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

from .data import EpochSpec
from .models import FreqBranchConfig, ModelConfig
from .preprocess import PreprocessConfig
from .seeding import derive_seed
from .training import (
    AmpConfig,
    OptimizerConfig,
    SchedulerConfig,
    TrainingConfig,
)

CONFIG_FORMAT = "dfdlab-config/1"


class ConfigError(Exception):
    """A config file or override set could not be interpreted."""


@dataclass(frozen=True)
class RunConfig:
    epoch_spec: EpochSpec
    preprocess: PreprocessConfig
    model: ModelConfig
    optimizer: OptimizerConfig
    scheduler: SchedulerConfig
    amp: AmpConfig
    train: TrainingConfig
    eval_threshold: float = 0.5
    eval_batch_size: int = 32


def default_config() -> RunConfig:
    return RunConfig(
        epoch_spec=EpochSpec(),
        preprocess=PreprocessConfig(),
        model=ModelConfig(),
        optimizer=OptimizerConfig(),
        scheduler=SchedulerConfig(),
        amp=AmpConfig(),
        train=TrainingConfig(),
    )


def _build(cls, raw: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(
            f"unknown key(s) in section '{section}': {sorted(unknown)}; "
            f"allowed: {sorted(names)}"
        )
    fixed = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    try:
        return cls(**fixed)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value in section '{section}': {e}") from e


def _build_model(raw: dict) -> ModelConfig:
    raw = dict(raw)
    fb = raw.get("freq_branch")
    if fb is not None:
        raw["freq_branch"] = _build(FreqBranchConfig, fb, "model.freq_branch")
    return _build(ModelConfig, raw, "model")


_SECTIONS = {
    "data": (EpochSpec, "epoch_spec"),
    "preprocess": (PreprocessConfig, "preprocess"),
    "model": (None, "model"),  # special-cased for the nested freq branch
    "optimizer": (OptimizerConfig, "optimizer"),
    "scheduler": (SchedulerConfig, "scheduler"),
    "amp": (AmpConfig, "amp"),
    "train": (TrainingConfig, "train"),
}


def from_dict(doc: dict) -> RunConfig:
    doc = dict(doc)
    doc.pop("format", None)
    eval_section = doc.pop("eval", {}) or {}
    unknown_eval = set(eval_section) - {"threshold", "batch_size"}
    if unknown_eval:
        raise ConfigError(
            f"unknown key(s) in section 'eval': {sorted(unknown_eval)}"
        )
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigError(
            f"unknown config section(s): {sorted(unknown)}; "
            f"allowed: {sorted(_SECTIONS) + ['eval']}"
        )
    kwargs = {}
    for section, (cls, attr) in _SECTIONS.items():
        raw = doc.get(section, {}) or {}
        if section == "model":
            kwargs[attr] = _build_model(raw)
        else:
            kwargs[attr] = _build(cls, raw, section)
    return RunConfig(
        eval_threshold=float(eval_section.get("threshold", 0.5)),
        eval_batch_size=int(eval_section.get("batch_size", 32)),
        **kwargs,
    )


def to_dict(cfg: RunConfig) -> dict:
    def plain(dc):
        return {
            k: (list(v) if isinstance(v, tuple) else v)
            for k, v in dataclasses.asdict(dc).items()
        }

    model = plain(cfg.model)
    return {
        "format": CONFIG_FORMAT,
        "data": plain(cfg.epoch_spec),
        "preprocess": plain(cfg.preprocess),
        "model": model,
        "optimizer": plain(cfg.optimizer),
        "scheduler": plain(cfg.scheduler),
        "amp": plain(cfg.amp),
        "train": plain(cfg.train),
        "eval": {"threshold": cfg.eval_threshold, "batch_size": cfg.eval_batch_size},
    }


def deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(
    path: str | os.PathLike | None = None, overrides: dict | None = None
) -> RunConfig:
    """Load a YAML config file (optional) and merge flag overrides over it."""
    doc: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        loaded = yaml.safe_load(text)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must be a mapping at top level")
        doc = loaded
    if overrides:
        doc = deep_merge(doc, overrides)
    return from_dict(doc)


def dump_config(cfg: RunConfig, path: str | os.PathLike) -> None:
    """Write the fully resolved config, version-stamped, as YAML."""
    Path(path).write_text(
        yaml.safe_dump(to_dict(cfg), sort_keys=True), encoding="utf-8"
    )


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """Re-key every seeded subsystem from one master seed."""
    return dataclasses.replace(
        cfg,
        epoch_spec=dataclasses.replace(cfg.epoch_spec, seed=seed),
        train=dataclasses.replace(cfg.train, seed=seed),
        model=dataclasses.replace(cfg.model, head_seed=derive_seed(seed, "head")),
    )
