"""Whole-split evaluation, latency benchmarking, and report rendering."""

from __future__ import annotations

import platform
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from PIL import Image

from .data import DatasetIndex
from .metrics import MetricsReport, ROCCurve
from .models import HybridClassifier
from .preprocess import PreprocessConfig, load_and_preprocess, transform_image
from .seeding import derive_seed
from .spectral import spectral_stack

REPORT_FORMAT = "dfdlab-report/1"


def _score_batch(model, images: list[np.ndarray], hybrid: bool) -> np.ndarray:
    image_batch = torch.from_numpy(np.stack(images))
    if hybrid:
        freq_batch = torch.from_numpy(np.stack([spectral_stack(a) for a in images]))
        logits = model(image_batch, freq_batch)
    else:
        logits = model(image_batch)
    return torch.sigmoid(logits.float().reshape(-1)).numpy()


def evaluate(
    model: torch.nn.Module,
    index: DatasetIndex,
    split: str,
    config: PreprocessConfig,
    batch_size: int = 32,
) -> tuple[np.ndarray, np.ndarray]:
    """Score every record of a split, in index order, with no augmentation.

    Returns (scores, labels): sigmoid probabilities of "real" aligned with
    the integer labels. Deterministic, and never mutates the model.
    """
    records = index.split_records(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    if batch_size <= 0:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    hybrid = isinstance(model, HybridClassifier)
    was_training = model.training
    model.eval()
    scores: list[np.ndarray] = []
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start : start + batch_size]
            images = [
                load_and_preprocess(rec, config, False, 0).data for rec in chunk
            ]
            scores.append(_score_batch(model, images, hybrid))
    model.train(was_training)
    labels = np.asarray([r.label for r in records], dtype=np.int64)
    return np.concatenate(scores), labels


@dataclass(frozen=True)
class TimingReport:
    n_files: int
    total_seconds: float
    seconds_per_file: float
    preprocess_seconds: float
    forward_seconds: float
    batch_size: int
    warmup_batches: int
    hardware_descriptor: str

    def to_dict(self) -> dict:
        return {
            "n_files": self.n_files,
            "total_seconds": self.total_seconds,
            "seconds_per_file": self.seconds_per_file,
            "preprocess_seconds": self.preprocess_seconds,
            "forward_seconds": self.forward_seconds,
            "batch_size": self.batch_size,
            "warmup_batches": self.warmup_batches,
            "hardware_descriptor": self.hardware_descriptor,
        }


def _default_hardware() -> str:
    return f"cpu ({platform.machine()}, {torch.get_num_threads()} threads)"


def _synthetic_images(rng: np.random.Generator, n: int, side: int) -> list[Image.Image]:
    out = []
    for _ in range(n):
        arr = rng.integers(0, 256, size=(side, side, 3), dtype=np.uint8)
        out.append(Image.fromarray(arr, mode="RGB"))
    return out


def bench_timing(
    model: torch.nn.Module,
    n_files: int,
    batch_size: int,
    warmup_batches: int = 2,
    config: PreprocessConfig | None = None,
    seed: int = 0,
    timer: Callable[[], float] = time.perf_counter,
    hardware_descriptor: str | None = None,
) -> TimingReport:
    """Time preprocessing + forward over synthetic inputs.

    Runs ``warmup_batches`` full batches first and excludes them from every
    reported number, then times exactly ``n_files`` files. Preprocessing and
    forward are timed separately; total_seconds is their sum. The ``timer``
    is injectable so the exclusion logic itself is testable.
    """
    if batch_size <= 0:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    if n_files < batch_size:
        raise ValueError(
            f"n_files ({n_files}) must be >= batch_size ({batch_size})"
        )
    if warmup_batches < 0:
        raise ValueError(f"warmup_batches must be >= 0, got {warmup_batches}")
    config = config or PreprocessConfig(target_size=64)
    hybrid = isinstance(model, HybridClassifier)
    rng = np.random.default_rng(derive_seed(seed, "bench"))
    # source images are generated off the clock, at a different size than the
    # target so the resize actually does work
    src_side = config.target_size + config.target_size // 4

    sizes = [batch_size] * warmup_batches
    remaining = n_files
    while remaining > 0:
        take = min(batch_size, remaining)
        sizes.append(take)
        remaining -= take

    pre_seconds = 0.0
    fwd_seconds = 0.0
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for batch_index, size in enumerate(sizes):
            warm = batch_index < warmup_batches
            pil_images = _synthetic_images(rng, size, src_side)

            t0 = timer()
            images = [
                transform_image(img, config, augment=False, draw_seed=0).data
                for img in pil_images
            ]
            if hybrid:
                freq = [spectral_stack(a) for a in images]
            image_batch = torch.from_numpy(np.stack(images))
            freq_batch = torch.from_numpy(np.stack(freq)) if hybrid else None
            t1 = timer()
            if hybrid:
                model(image_batch, freq_batch)
            else:
                model(image_batch)
            t2 = timer()

            if not warm:
                pre_seconds += t1 - t0
                fwd_seconds += t2 - t1
    model.train(was_training)

    total = pre_seconds + fwd_seconds
    return TimingReport(
        n_files=n_files,
        total_seconds=total,
        seconds_per_file=total / n_files,
        preprocess_seconds=pre_seconds,
        forward_seconds=fwd_seconds,
        batch_size=batch_size,
        warmup_batches=warmup_batches,
        hardware_descriptor=hardware_descriptor or _default_hardware(),
    )


# --------------------------------------------------------------------------
# report rendering

_COLUMNS = ("auc", "accuracy", "f1", "precision", "recall")
_HEADERS = ("AUC", "ACC", "F1", "P", "R")


def render_report(reports: Sequence[tuple[str, MetricsReport]]) -> tuple[str, dict]:
    """Render an aligned text table plus a full-precision structured payload.

    Columns are ordered AUC, ACC, F1, P, R. With more than one row the best
    value per column is marked with '*'. Degeneracy flags become footnotes.
    """
    if not reports:
        raise ValueError("render_report needs at least one report")

    best: dict[str, float] = {}
    if len(reports) > 1:
        for col in _COLUMNS:
            best[col] = max(getattr(rep, col) for _, rep in reports)

    name_width = max(len("Model"), max(len(name) for name, _ in reports))
    lines = []
    header = f"{'Model':<{name_width}}  " + "  ".join(f"{h:>8}" for h in _HEADERS)
    lines.append(header)
    lines.append("-" * len(header))
    footnotes = []
    for name, rep in reports:
        cells = []
        for col in _COLUMNS:
            v = getattr(rep, col)
            mark = "*" if len(reports) > 1 and v == best[col] else " "
            cells.append(f"{v:>7.4f}{mark}")
        lines.append(f"{name:<{name_width}}  " + "  ".join(cells))
        if rep.flags:
            footnotes.append(f"note: {name}: " + ", ".join(rep.flags))
    lines.extend(footnotes)
    text = "\n".join(lines)

    payload = {
        "format": REPORT_FORMAT,
        "columns": list(_COLUMNS),
        "rows": [
            {"name": name, **rep.to_dict()} for name, rep in reports
        ],
    }
    return text, payload


def roc_to_csv(curve: ROCCurve) -> str:
    """Two-column comma-separated text (fpr, tpr) with a version comment."""
    lines = ["# dfdlab-roc/1", "fpr,tpr"]
    for fpr, tpr in curve.points:
        lines.append(f"{fpr:.10g},{tpr:.10g}")
    return "\n".join(lines) + "\n"
