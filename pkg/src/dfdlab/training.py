"""Training loop: loss, optimizer, plateau scheduler, loss scaling, epochs.

The loop is deliberately deterministic on CPU: every stochastic choice
(sampling, flips, dropout) is derived from explicit seeds, so two runs with
the same seed produce identical histories, and a checkpoint resume reproduces
the uninterrupted trajectory bitwise when mixed precision is off.
"""

from __future__ import annotations

import math
from contextlib import nullcontext
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .data import DatasetIndex, EpochSpec, SampleRecord, plan_epoch
from .metrics import metrics_report
from .models import HybridClassifier, ModelConfig
from .preprocess import PreprocessConfig, load_and_preprocess
from .seeding import derive_seed
from .spectral import spectral_stack


class TrainingDivergedError(Exception):
    """Training hit a non-finite loss with mixed precision disabled."""


def bce_with_logits(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy computed directly from logits.

    Uses the overflow-safe form
        loss_i = max(z, 0) - z*y + log(1 + exp(-|z|))
    so the result stays finite for logits of magnitude 100 and beyond.
    """
    if logits.ndim == 2 and logits.shape[-1] == 1:
        z = logits.reshape(-1)
    elif logits.ndim == 1:
        z = logits
    else:
        raise ValueError(
            f"logits must be shaped (B,) or (B, 1), got {tuple(logits.shape)}"
        )
    if z.numel() == 0:
        raise ValueError("empty logits batch")
    if not torch.isfinite(z).all():
        raise ValueError("logits contain non-finite values")
    y = targets.reshape(-1).to(z.dtype)
    if y.shape != z.shape:
        raise ValueError(
            f"shape mismatch: {tuple(z.shape)} logits vs {tuple(targets.shape)} targets"
        )
    if not ((y == 0) | (y == 1)).all():
        raise ValueError("targets must be 0 or 1")
    loss = z.clamp(min=0) - z * y + torch.log1p(torch.exp(-z.abs()))
    return loss.mean()


@dataclass(frozen=True)
class OptimizerConfig:
    initial_lr: float = 5e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    decoupled_weight_decay: bool = False

    def __post_init__(self) -> None:
        if self.initial_lr <= 0:
            raise ValueError(f"initial_lr must be positive, got {self.initial_lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 < b < 1.0:
                raise ValueError(f"{name} must be in (0, 1), got {b}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


def make_optimizer(params, config: OptimizerConfig) -> torch.optim.Optimizer:
    """Adaptive-moment optimizer; coupled L2 decay by default, decoupled by flag."""
    cls = torch.optim.AdamW if config.decoupled_weight_decay else torch.optim.Adam
    return cls(
        params,
        lr=config.initial_lr,
        betas=(config.beta1, config.beta2),
        eps=config.epsilon,
        weight_decay=config.weight_decay,
    )


@dataclass(frozen=True)
class SchedulerConfig:
    factor: float = 0.1
    patience: int = 3
    threshold: float = 1e-4
    min_lr: float = 1e-7

    def __post_init__(self) -> None:
        if not 0.0 < self.factor < 1.0:
            raise ValueError(f"factor must be in (0, 1), got {self.factor}")
        if self.patience < 0:
            raise ValueError(f"patience must be >= 0, got {self.patience}")
        if self.threshold < 0 or self.min_lr < 0:
            raise ValueError("threshold and min_lr must be >= 0")


class PlateauScheduler:
    """Cut the learning rate by ``factor`` once validation loss stalls.

    An epoch counts as an improvement when val_loss < best - threshold.
    After more than ``patience`` consecutive non-improving epochs the rate is
    multiplied by ``factor`` (floored at min_lr) and the counter resets. The
    rate never increases.
    """

    mode = "min"

    def __init__(self, initial_lr: float, config: SchedulerConfig):
        if initial_lr <= 0:
            raise ValueError(f"initial_lr must be positive, got {initial_lr}")
        self.config = config
        self.current_lr = initial_lr
        self.best_val_loss = math.inf
        self.epochs_since_improvement = 0

    def step(self, val_loss: float) -> bool:
        """Feed one epoch's validation loss; returns True if the lr dropped."""
        if not math.isfinite(val_loss):
            raise ValueError(f"val_loss must be finite, got {val_loss}")
        if val_loss < self.best_val_loss - self.config.threshold:
            self.best_val_loss = val_loss
            self.epochs_since_improvement = 0
            return False
        self.epochs_since_improvement += 1
        if self.epochs_since_improvement > self.config.patience:
            self.current_lr = max(self.current_lr * self.config.factor, self.config.min_lr)
            self.epochs_since_improvement = 0
            return True
        return False

    def state_dict(self) -> dict:
        return {
            "current_lr": self.current_lr,
            "best_val_loss": self.best_val_loss,
            "epochs_since_improvement": self.epochs_since_improvement,
        }

    def load_state_dict(self, state: dict) -> None:
        self.current_lr = state["current_lr"]
        self.best_val_loss = state["best_val_loss"]
        self.epochs_since_improvement = state["epochs_since_improvement"]


@dataclass(frozen=True)
class AmpConfig:
    enabled: bool = False
    init_scale: float = 65536.0
    growth_factor: float = 2.0
    backoff_factor: float = 0.5
    growth_interval: int = 2000

    def __post_init__(self) -> None:
        if self.init_scale <= 0:
            raise ValueError(f"init_scale must be positive, got {self.init_scale}")
        if self.growth_factor <= 1.0:
            raise ValueError(f"growth_factor must be > 1, got {self.growth_factor}")
        if not 0.0 < self.backoff_factor < 1.0:
            raise ValueError(f"backoff_factor must be in (0, 1), got {self.backoff_factor}")
        if self.growth_interval <= 0:
            raise ValueError(f"growth_interval must be positive, got {self.growth_interval}")


class DynamicLossScaler:
    """Dynamic loss scaling for reduced-precision training.

    The loss is multiplied by ``loss_scale`` before backward so small
    gradients survive the narrow format; gradients are divided back before
    the optimizer step. A non-finite gradient means the scale was too high:
    that step is skipped and the scale shrinks by backoff_factor. After
    growth_interval consecutive clean steps the scale doubles back up.
    """

    def __init__(self, config: AmpConfig):
        self.config = config
        self.loss_scale = config.init_scale if config.enabled else 1.0
        self.steps_since_overflow = 0

    @property
    def enabled(self) -> bool:
        return self.config.enabled

    def scale(self, loss: torch.Tensor) -> torch.Tensor:
        return loss * self.loss_scale if self.enabled else loss

    def unscale_and_check(self, parameters) -> bool:
        """Divide gradients by the scale in place; report any non-finite one."""
        if not self.enabled:
            return False
        found = False
        inv = 1.0 / self.loss_scale
        for p in parameters:
            if p.grad is None:
                continue
            p.grad.mul_(inv)
            if not torch.isfinite(p.grad).all():
                found = True
        return found

    def update(self, found_overflow: bool) -> None:
        if not self.enabled:
            return
        if found_overflow:
            self.loss_scale *= self.config.backoff_factor
            self.steps_since_overflow = 0
        else:
            self.steps_since_overflow += 1
            if self.steps_since_overflow >= self.config.growth_interval:
                self.loss_scale *= self.config.growth_factor
                self.steps_since_overflow = 0

    def state_dict(self) -> dict:
        return {
            "loss_scale": self.loss_scale,
            "steps_since_overflow": self.steps_since_overflow,
        }

    def load_state_dict(self, state: dict) -> None:
        self.loss_scale = state["loss_scale"]
        self.steps_since_overflow = state["steps_since_overflow"]


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 30
    seed: int = 0
    val_fraction: float = 0.05

    def __post_init__(self) -> None:
        if self.epochs <= 0:
            raise ValueError(f"epochs must be positive, got {self.epochs}")
        if not 0.0 < self.val_fraction <= 0.5:
            raise ValueError(
                f"val_fraction must be in (0, 0.5], got {self.val_fraction}"
            )


def _carve_validation(
    index: DatasetIndex, fraction: float, seed: int
) -> DatasetIndex:
    """Move a seeded, class-stratified slice of train into the val split.

    Used when the index has no val split of its own. Carved samples leave the
    training pool, so they are never trained on.
    """
    rng = np.random.default_rng(derive_seed(seed, "val-carve"))
    move: set[str] = set()
    for label in (0, 1):  # fixed order keeps the draw stream stable
        ids = index.class_ids("train", label)
        if len(ids) < 2:
            continue
        k = min(max(1, round(fraction * len(ids))), len(ids) - 1)
        pick = rng.permutation(len(ids))[:k]
        move.update(ids[i] for i in pick)
    records = [
        replace(r, split="val") if r.id in move else r for r in index.records
    ]
    return DatasetIndex(records)


GradHook = Callable[[torch.nn.Module, int, int], None]


class Trainer:
    """Owns one training run: model, optimizer, scheduler, scaler, history.

    ``grad_hook(model, epoch, batch_index)`` runs right after backward on
    every step; tests use it to inject gradient overflows.
    """

    def __init__(
        self,
        model: torch.nn.Module,
        model_config: ModelConfig,
        index: DatasetIndex,
        epoch_spec: EpochSpec,
        preprocess_config: PreprocessConfig,
        optimizer_config: OptimizerConfig | None = None,
        scheduler_config: SchedulerConfig | None = None,
        amp_config: AmpConfig | None = None,
        training_config: TrainingConfig | None = None,
        grad_hook: Optional[GradHook] = None,
    ):
        self.model = model
        self.model_config = model_config
        self.epoch_spec = epoch_spec
        self.preprocess_config = preprocess_config
        self.optimizer_config = optimizer_config or OptimizerConfig()
        self.scheduler_config = scheduler_config or SchedulerConfig()
        self.amp_config = amp_config or AmpConfig()
        self.training_config = training_config or TrainingConfig()
        self.grad_hook = grad_hook

        if index.split_records("val"):
            self.index = index
        else:
            self.index = _carve_validation(
                index, self.training_config.val_fraction, self.training_config.seed
            )
        self.val_records = self.index.split_records("val")

        # the trainer owns a private torch RNG stream (dropout masks), swapped
        # in around each epoch so unrelated torch use cannot perturb a run
        with torch.random.fork_rng():
            torch.manual_seed(derive_seed(self.training_config.seed, "trainer"))
            self.rng_state = torch.get_rng_state()
        self.optimizer = make_optimizer(self.model.parameters(), self.optimizer_config)
        self.scheduler = PlateauScheduler(
            self.optimizer_config.initial_lr, self.scheduler_config
        )
        self.scaler = DynamicLossScaler(self.amp_config)
        self.epoch = 0
        self.history: list[dict] = []
        self.best_val_loss = math.inf
        self._hybrid = isinstance(model, HybridClassifier)

    # -- batch assembly ----------------------------------------------------

    def _tensors(
        self,
        records: Sequence[SampleRecord],
        augment: bool,
        epoch_number: int,
        base_position: int,
    ):
        images, freq, targets = [], [], []
        for offset, rec in enumerate(records):
            draw_seed = derive_seed(
                self.epoch_spec.seed, "draw", epoch_number, base_position + offset
            )
            t = load_and_preprocess(rec, self.preprocess_config, augment, draw_seed)
            images.append(t.data)
            if self._hybrid:
                freq.append(spectral_stack(t.data))
            targets.append(float(rec.label))
        image_batch = torch.from_numpy(np.stack(images))
        freq_batch = torch.from_numpy(np.stack(freq)) if self._hybrid else None
        target_batch = torch.tensor(targets, dtype=torch.float32)
        return image_batch, freq_batch, target_batch

    def _forward(self, image_batch, freq_batch) -> torch.Tensor:
        if self._hybrid:
            return self.model(image_batch, freq_batch)
        return self.model(image_batch)

    def _autocast(self):
        if self.amp_config.enabled:
            return torch.autocast(device_type="cpu", dtype=torch.bfloat16)
        return nullcontext()

    # -- epoch loop ----------------------------------------------------------

    def train_epoch(self) -> dict:
        """Run one planned epoch; returns (and appends) the history row."""
        outer_rng = torch.get_rng_state()
        torch.set_rng_state(self.rng_state)
        try:
            return self._train_epoch_impl()
        finally:
            self.rng_state = torch.get_rng_state()
            torch.set_rng_state(outer_rng)

    def _train_epoch_impl(self) -> dict:
        e = self.epoch
        plan = plan_epoch(self.index, self.epoch_spec, e)
        self.model.train()
        batch_losses: list[float] = []
        skipped = 0
        position = 0

        for batch_index, ids in enumerate(plan.batches):
            records = [self.index.by_id[sid] for sid in ids]
            image_batch, freq_batch, target_batch = self._tensors(
                records, augment=True, epoch_number=e, base_position=position
            )
            position += len(ids)

            self.optimizer.zero_grad(set_to_none=True)
            with self._autocast():
                logits = self._forward(image_batch, freq_batch)
            if not torch.isfinite(logits).all():
                if self.amp_config.enabled:
                    # the forward itself overflowed: treat like a gradient overflow
                    self.scaler.update(True)
                    skipped += 1
                    continue
                raise TrainingDivergedError(
                    f"non-finite forward output at epoch {e}, batch {batch_index} "
                    f"(lr={self.scheduler.current_lr:g}, train_loss so far "
                    f"{np.mean(batch_losses) if batch_losses else math.nan:.4g}); "
                    "mixed precision is off, aborting"
                )
            loss = bce_with_logits(logits.float(), target_batch)
            loss_value = float(loss.detach())
            if not math.isfinite(loss_value) and not self.amp_config.enabled:
                raise TrainingDivergedError(
                    f"non-finite loss {loss_value} at epoch {e}, batch {batch_index} "
                    f"(lr={self.scheduler.current_lr:g}); mixed precision is off, aborting"
                )
            self.scaler.scale(loss).backward()
            if self.grad_hook is not None:
                self.grad_hook(self.model, e, batch_index)
            overflow = self.scaler.unscale_and_check(self.model.parameters())
            if overflow:
                skipped += 1
            else:
                self.optimizer.step()
            self.scaler.update(overflow)
            batch_losses.append(loss_value)

        train_loss = float(np.mean(batch_losses)) if batch_losses else math.nan
        val_loss, val_metrics = self._validate()
        self.scheduler.step(val_loss)
        for group in self.optimizer.param_groups:
            group["lr"] = self.scheduler.current_lr

        row = {
            "epoch": e,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "lr": self.scheduler.current_lr,
            "skipped_steps": skipped,
            "val_metrics": val_metrics,
        }
        self.history.append(row)
        self.epoch = e + 1
        return row

    def _validate(self, batch_size: int = 64) -> tuple[float, dict | None]:
        records = self.val_records
        if not records:
            raise RuntimeError("no validation records available")
        was_training = self.model.training
        self.model.eval()
        scores: list[np.ndarray] = []
        labels: list[int] = []
        loss_sum = 0.0
        with torch.no_grad():
            for start in range(0, len(records), batch_size):
                chunk = records[start : start + batch_size]
                image_batch, freq_batch, target_batch = self._tensors(
                    chunk, augment=False, epoch_number=0, base_position=0
                )
                logits = self._forward(image_batch, freq_batch).float()
                loss_sum += float(bce_with_logits(logits, target_batch)) * len(chunk)
                scores.append(torch.sigmoid(logits).reshape(-1).numpy())
                labels.extend(r.label for r in chunk)
        self.model.train(was_training)
        val_loss = loss_sum / len(records)
        y = np.asarray(labels)
        if 0 < y.sum() < y.size:
            rep = metrics_report(np.concatenate(scores), y)
            val_metrics = {
                "auc": rep.auc,
                "accuracy": rep.accuracy,
                "precision": rep.precision,
                "recall": rep.recall,
                "f1": rep.f1,
            }
        else:
            val_metrics = None  # single-class val split: headline metrics undefined
        return val_loss, val_metrics

    def fit(
        self,
        epochs: int | None = None,
        checkpoint_dir=None,
        log_fn: Callable[[dict], None] | None = None,
    ) -> list[dict]:
        """Train until ``epochs`` total epochs have run (counting resumed ones).

        With a checkpoint_dir, writes last.pt every epoch and best.pt whenever
        validation loss improves.
        """
        from pathlib import Path

        from .checkpoint import save_checkpoint

        target = self.training_config.epochs if epochs is None else epochs
        rows = []
        while self.epoch < target:
            row = self.train_epoch()
            rows.append(row)
            improved = row["val_loss"] < self.best_val_loss
            if improved:
                self.best_val_loss = row["val_loss"]
            if checkpoint_dir is not None:
                ckdir = Path(checkpoint_dir)
                ckdir.mkdir(parents=True, exist_ok=True)
                if improved:
                    save_checkpoint(self, ckdir / "best.pt")
                save_checkpoint(self, ckdir / "last.pt")
            if log_fn is not None:
                log_fn(row)
        return rows
