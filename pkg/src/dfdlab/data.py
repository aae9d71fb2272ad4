"""Dataset indexing, split assignment, and balanced epoch planning.

A corpus lives on disk as ``<root>/real/**`` and ``<root>/fake/**``. Indexing
walks those trees, verifies each file decodes, and produces an immutable
:class:`DatasetIndex` that everything downstream (training, evaluation,
inference) consumes. Epochs are planned as explicit lists of sample ids so a
training run can be replayed exactly from (seed, epoch_number) alone.
"""

from __future__ import annotations

import hashlib
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from PIL import Image

from .seeding import derive_seed

log = logging.getLogger(__name__)

LABEL_FAKE = 0
LABEL_REAL = 1
LABEL_NAMES = {LABEL_FAKE: "fake", LABEL_REAL: "real"}
CLASS_DIRS = ("real", "fake")
SPLITS = ("train", "val", "test")

INDEX_FORMAT = "dfdlab-index/1"
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


class IndexingError(Exception):
    """Raised when a corpus cannot be indexed or an index file is invalid."""


class PlanError(Exception):
    """Raised when an epoch cannot be planned from the given index."""


@dataclass(frozen=True)
class SampleRecord:
    """One image: stable id, recorded path, class label, split assignment."""

    id: str
    path: str
    label: int
    split: str

    def __post_init__(self) -> None:
        if self.label not in LABEL_NAMES:
            raise ValueError(f"label must be 0 (fake) or 1 (real), got {self.label!r}")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if not self.id:
            raise ValueError("empty sample id")


def sample_id(path: str) -> str:
    """Stable short id for a recorded path (first 12 hex chars of SHA-1)."""
    return hashlib.sha1(path.encode("utf-8")).hexdigest()[:12]


@dataclass
class IndexReport:
    """What happened while building an index: inputs, exclusions, totals."""

    roots: list[str]
    excluded: list[tuple[str, str]] = field(default_factory=list)
    n_scanned: int = 0
    n_indexed: int = 0

    def to_dict(self) -> dict:
        return {
            "roots": list(self.roots),
            "excluded": [{"path": p, "reason": r} for p, r in self.excluded],
            "n_scanned": self.n_scanned,
            "n_indexed": self.n_indexed,
        }


class DatasetIndex:
    """Immutable collection of sample records with per-(split, class) counts.

    Counts are always recomputed from the records, so they cannot drift from
    the record list.
    """

    def __init__(self, records: Iterable[SampleRecord]):
        self.records: tuple[SampleRecord, ...] = tuple(records)
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            dup = next(i for i, c in Counter(ids).items() if c > 1)
            raise IndexingError(f"duplicate sample id {dup!r} in index")
        self.by_id: dict[str, SampleRecord] = {r.id: r for r in self.records}

    def __len__(self) -> int:
        return len(self.records)

    def counts(self) -> dict[tuple[str, int], int]:
        """Number of records per (split, label), recomputed on each call."""
        return dict(Counter((r.split, r.label) for r in self.records))

    def class_total(self, label: int) -> int:
        return sum(1 for r in self.records if r.label == label)

    def split_records(self, split: str) -> list[SampleRecord]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [r for r in self.records if r.split == split]

    def class_ids(self, split: str, label: int) -> list[str]:
        return [r.id for r in self.records if r.split == split and r.label == label]

    def save(self, path: str | os.PathLike) -> None:
        """Write the index as UTF-8 lines ``id|path|label|split`` plus a
        format-version header."""
        lines = [INDEX_FORMAT]
        for r in self.records:
            if "|" in r.path or "\n" in r.path:
                raise IndexingError(f"path not representable in index file: {r.path!r}")
            lines.append(f"{r.id}|{r.path}|{r.label}|{r.split}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetIndex":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise IndexingError(f"cannot read index file {path}: {e}") from e
        lines = text.splitlines()
        if not lines or lines[0] != INDEX_FORMAT:
            got = lines[0] if lines else "<empty file>"
            raise IndexingError(
                f"unsupported index format {got!r}, expected {INDEX_FORMAT!r}"
            )
        records = []
        for ln, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            parts = line.split("|")
            if len(parts) != 4:
                raise IndexingError(f"{path}:{ln}: expected 4 fields, got {len(parts)}")
            rid, rpath, raw_label, split = parts
            try:
                label = int(raw_label)
            except ValueError as e:
                raise IndexingError(f"{path}:{ln}: bad label {raw_label!r}") from e
            try:
                records.append(SampleRecord(rid, rpath, label, split))
            except ValueError as e:
                raise IndexingError(f"{path}:{ln}: {e}") from e
        return cls(records)


# --------------------------------------------------------------------------
# split rules


def fraction_split(
    train: float, val: float, test: float, seed: int = 0
) -> Callable[[str], str]:
    """Split rule assigning each id to train/val/test by hashed fraction.

    The assignment depends only on (seed, id), so re-indexing the same corpus
    reproduces the same split even if files were added elsewhere.
    """
    total = train + val + test
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {total}")
    if min(train, val, test) < 0:
        raise ValueError("split fractions must be non-negative")

    def rule(sid: str) -> str:
        h = hashlib.sha256(f"{seed}:{sid}".encode("utf-8")).digest()
        u = int.from_bytes(h[:8], "little") / 2.0**64
        if u < train:
            return "train"
        if u < train + val:
            return "val"
        return "test"

    return rule


def fixed_split(split: str) -> Callable[[str], str]:
    """Split rule assigning every sample to one split."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    return lambda _sid: split


# --------------------------------------------------------------------------
# index construction


def _decodable(path: Path) -> str | None:
    """Return None if the image decodes, else a reason string."""
    try:
        with Image.open(path) as img:
            img.verify()
        return None
    except Exception as e:  # Pillow raises a zoo of exception types here
        return f"{type(e).__name__}: {e}"


def build_index(
    roots: Sequence[str | os.PathLike],
    split_rule: Callable[[str], str],
    extensions: Sequence[str] = IMAGE_EXTENSIONS,
) -> tuple[DatasetIndex, IndexReport]:
    """Scan ``<root>/real/**`` and ``<root>/fake/**`` under each root.

    Undecodable files are excluded with a logged warning and listed in the
    report. A missing or unreadable root is fatal; a class with zero samples
    overall is fatal.
    """
    if not roots:
        raise IndexingError("no corpus roots given")
    report = IndexReport(roots=[os.fspath(r) for r in roots])
    exts = tuple(e.lower() for e in extensions)
    found: list[tuple[str, int]] = []

    for root in roots:
        root = Path(root)
        if not root.is_dir():
            raise IndexingError(f"corpus root {os.fspath(root)!r} is not a readable directory")
        for class_dir, label in (("real", LABEL_REAL), ("fake", LABEL_FAKE)):
            base = root / class_dir
            if not base.is_dir():
                continue
            for p in base.rglob("*"):
                if not p.is_file() or p.suffix.lower() not in exts:
                    continue
                report.n_scanned += 1
                reason = _decodable(p)
                if reason is not None:
                    log.warning("excluding undecodable file %s (%s)", p, reason)
                    report.excluded.append((os.fspath(p), reason))
                    continue
                found.append((os.fspath(p), label))

    found.sort(key=lambda t: t[0])
    records = [
        SampleRecord(id=sample_id(path), path=path, label=label, split=split_rule(sample_id(path)))
        for path, label in found
    ]
    index = DatasetIndex(records)
    report.n_indexed = len(index)
    for label, name in LABEL_NAMES.items():
        if index.class_total(label) == 0:
            raise IndexingError(f"class '{name}' has zero samples")
    return index, report


# --------------------------------------------------------------------------
# epoch planning


@dataclass(frozen=True)
class EpochSpec:
    """How much to draw per epoch and how to batch it."""

    images_per_epoch: int = 25_600
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self) -> None:
        if self.images_per_epoch <= 0 or self.batch_size <= 0:
            raise ValueError("images_per_epoch and batch_size must be positive")
        if self.batch_size % 2 != 0:
            raise ValueError(f"batch_size must be even, got {self.batch_size}")
        if self.images_per_epoch % self.batch_size != 0:
            raise ValueError(
                f"images_per_epoch ({self.images_per_epoch}) must be divisible "
                f"by batch_size ({self.batch_size})"
            )

    @property
    def n_batches(self) -> int:
        return self.images_per_epoch // self.batch_size


@dataclass(frozen=True)
class EpochPlan:
    """Fully materialized draw for one epoch: batches of sample ids."""

    batches: tuple[tuple[str, ...], ...]
    epoch_seed: int
    with_replacement: dict[int, bool] = field(default_factory=dict)


def plan_epoch(index: DatasetIndex, spec: EpochSpec, epoch_number: int) -> EpochPlan:
    """Plan one balanced epoch over the index's train split.

    Each batch holds batch_size/2 real and batch_size/2 fake ids. Per class,
    ids are drawn without replacement when the class has at least
    images_per_epoch/2 train members, otherwise with replacement. The plan is
    a pure function of (index, spec.seed, epoch_number).
    """
    if epoch_number < 0:
        raise ValueError(f"epoch_number must be >= 0, got {epoch_number}")
    need = spec.images_per_epoch // 2
    half = spec.batch_size // 2
    epoch_seed = derive_seed(spec.seed, "epoch", epoch_number)
    rng = np.random.default_rng(epoch_seed)

    chosen: dict[int, list[str]] = {}
    with_replacement: dict[int, bool] = {}
    for label in (LABEL_FAKE, LABEL_REAL):  # fixed order keeps the draw stream stable
        ids = index.class_ids("train", label)
        if not ids:
            raise PlanError(
                f"class '{LABEL_NAMES[label]}' has zero samples in the train split"
            )
        if len(ids) >= need:
            pick = rng.permutation(len(ids))[:need]
            with_replacement[label] = False
        else:
            pick = rng.integers(0, len(ids), size=need)
            with_replacement[label] = True
        chosen[label] = [ids[i] for i in pick]

    batches = []
    for b in range(spec.n_batches):
        ids_b = (
            chosen[LABEL_REAL][b * half : (b + 1) * half]
            + chosen[LABEL_FAKE][b * half : (b + 1) * half]
        )
        perm = rng.permutation(spec.batch_size)
        batches.append(tuple(ids_b[i] for i in perm))
    return EpochPlan(
        batches=tuple(batches),
        epoch_seed=epoch_seed,
        with_replacement=with_replacement,
    )
