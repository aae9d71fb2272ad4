"""Versioned training checkpoints with strict integrity checks.

A checkpoint carries everything needed to continue a run exactly: model
weights, optimizer moments, scheduler and loss-scaler state, the RNG state,
the epoch counter, the history so far, and every config used to assemble the
trainer. Loading verifies the format stamp and (optionally) that the model
config matches what the caller expects.
"""

from __future__ import annotations

import dataclasses
import os
import sys
from pathlib import Path

import torch

from .data import DatasetIndex, EpochSpec
from .models import FreqBranchConfig, ModelConfig, build_model
from .preprocess import PreprocessConfig
from .training import (
    AmpConfig,
    OptimizerConfig,
    SchedulerConfig,
    Trainer,
    TrainingConfig,
)

CHECKPOINT_FORMAT = "dfdlab-checkpoint/1"


class CheckpointError(Exception):
    """A checkpoint could not be written, read, or safely applied."""


def _model_config_dict(config: ModelConfig) -> dict:
    return dataclasses.asdict(config)


def _canonical(obj):
    """Rebuild containers with every string interned.

    Pickle memoizes by object identity, so the serialized bytes would
    otherwise depend on which equal strings happened to share an object —
    e.g. freshly built rows vs rows restored from an earlier checkpoint.
    Interning makes the byte stream a function of content alone.
    """
    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, dict):
        return {_canonical(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_canonical(v) for v in obj]
    if isinstance(obj, tuple):
        return tuple(_canonical(v) for v in obj)
    return obj


def save_checkpoint(trainer: Trainer, path: str | os.PathLike) -> None:
    """Write the trainer's complete state atomically (tmp file + rename)."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "epoch": trainer.epoch,
        "history": trainer.history,
        "best_val_loss": trainer.best_val_loss,
        "model_config": _model_config_dict(trainer.model_config),
        "model_state": trainer.model.state_dict(),
        "optimizer_state": trainer.optimizer.state_dict(),
        "scheduler_state": trainer.scheduler.state_dict(),
        "scaler_state": trainer.scaler.state_dict(),
        "optimizer_config": dataclasses.asdict(trainer.optimizer_config),
        "scheduler_config": dataclasses.asdict(trainer.scheduler_config),
        "amp_config": dataclasses.asdict(trainer.amp_config),
        "training_config": dataclasses.asdict(trainer.training_config),
        "epoch_spec": dataclasses.asdict(trainer.epoch_spec),
        "preprocess_config": dataclasses.asdict(trainer.preprocess_config),
        "torch_rng_state": trainer.rng_state,
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        torch.save(_canonical(payload), tmp)
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(
    path: str | os.PathLike, expected_model_config: ModelConfig | None = None
) -> dict:
    """Read and verify a checkpoint payload.

    Fails loudly on unreadable/corrupt files, on a format stamp other than
    the current one, and on a model-config mismatch when the caller states
    what it expects.
    """
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"corrupt or unreadable checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or "format" not in payload:
        raise CheckpointError(f"{path} is not a checkpoint (no format stamp)")
    if payload["format"] != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"checkpoint format mismatch: file has {payload['format']!r}, "
            f"this build reads {CHECKPOINT_FORMAT!r}"
        )
    if expected_model_config is not None:
        saved = payload["model_config"]
        expected = _model_config_dict(expected_model_config)
        if saved != expected:
            raise CheckpointError(
                f"model config mismatch: checkpoint has {saved}, expected {expected}"
            )
    return payload


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    fb = d.get("freq_branch")
    if fb is not None:
        d["freq_branch"] = FreqBranchConfig(**fb)
    return ModelConfig(**d)


def load_model(path: str | os.PathLike) -> tuple[torch.nn.Module, dict]:
    """Rebuild just the model from a checkpoint (for evaluate/infer/bench).

    The backbone is constructed without fetching pretrained weights; the
    checkpoint's weights overwrite every parameter anyway. Returns the model
    in evaluation mode plus the full checkpoint payload (for the configs
    recorded alongside the weights).
    """
    payload = load_checkpoint(path)
    config = model_config_from_dict(payload["model_config"])
    offline = dataclasses.replace(config, pretrained=False)
    model = build_model(offline)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, payload


def restore_trainer(
    path: str | os.PathLike,
    index: DatasetIndex,
    grad_hook=None,
) -> Trainer:
    """Rebuild a Trainer mid-run from a checkpoint plus the dataset index.

    The index is not serialized into checkpoints (it can be large and lives
    in its own versioned file); pass the same one the run started with.
    """
    payload = load_checkpoint(path)
    config = model_config_from_dict(payload["model_config"])
    offline = dataclasses.replace(config, pretrained=False)
    model = build_model(offline)
    model.load_state_dict(payload["model_state"])

    trainer = Trainer(
        model=model,
        model_config=config,
        index=index,
        epoch_spec=EpochSpec(**payload["epoch_spec"]),
        preprocess_config=_tupled(PreprocessConfig, payload["preprocess_config"]),
        optimizer_config=OptimizerConfig(**payload["optimizer_config"]),
        scheduler_config=SchedulerConfig(**payload["scheduler_config"]),
        amp_config=AmpConfig(**payload["amp_config"]),
        training_config=TrainingConfig(**payload["training_config"]),
        grad_hook=grad_hook,
    )
    trainer.optimizer.load_state_dict(payload["optimizer_state"])
    trainer.scheduler.load_state_dict(payload["scheduler_state"])
    trainer.scaler.load_state_dict(payload["scaler_state"])
    trainer.epoch = payload["epoch"]
    trainer.history = list(payload["history"])
    trainer.best_val_loss = payload["best_val_loss"]
    trainer.rng_state = payload["torch_rng_state"]
    return trainer


def _tupled(cls, d: dict):
    """Rebuild a config dataclass whose tuple fields torch.save turned into lists."""
    fixed = {
        k: tuple(v) if isinstance(v, list) else v for k, v in d.items()
    }
    return cls(**fixed)


def preprocess_config_from_dict(d: dict) -> PreprocessConfig:
    """PreprocessConfig from a checkpoint payload's 'preprocess_config'."""
    return _tupled(PreprocessConfig, d)
