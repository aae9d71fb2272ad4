"""Image decoding and tensor preparation.

Every image is stretch-resized to a square (aspect ratio is not preserved),
optionally flipped horizontally at train time, then normalized channel-wise
with (value/255 - mean) / std. Output is float32 CHW.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .data import SampleRecord

IMAGENET_MEANS = (0.485, 0.456, 0.406)
IMAGENET_STDS = (0.229, 0.224, 0.225)


class DecodeError(Exception):
    """An image file could not be decoded. Carries the sample id."""

    def __init__(self, sample_id: str, path: str, cause: str):
        super().__init__(f"cannot decode sample {sample_id} ({path}): {cause}")
        self.sample_id = sample_id
        self.path = path
        self.cause = cause


@dataclass(frozen=True)
class PreprocessConfig:
    target_size: int = 528
    flip_probability: float = 0.5
    channel_means: tuple[float, float, float] = IMAGENET_MEANS
    channel_stds: tuple[float, float, float] = IMAGENET_STDS

    def __post_init__(self) -> None:
        if self.target_size < 32:
            raise ValueError(f"target_size must be >= 32, got {self.target_size}")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError(f"flip_probability must be in [0, 1], got {self.flip_probability}")
        if len(self.channel_means) != 3 or len(self.channel_stds) != 3:
            raise ValueError("channel_means and channel_stds must have 3 entries")
        if any(s <= 0 for s in self.channel_stds):
            raise ValueError(f"channel_stds must be positive, got {self.channel_stds}")


@dataclass(frozen=True)
class ImageTensor:
    """Normalized image, float32 CHW, with provenance of how it was made."""

    data: np.ndarray
    sample_id: str
    transforms: tuple[str, ...] = field(default=())


def transform_image(
    img: Image.Image,
    config: PreprocessConfig,
    augment: bool,
    draw_seed: int,
    sample_id: str = "",
) -> ImageTensor:
    """Resize / flip / normalize an already-decoded PIL image.

    The flip decision comes from a generator seeded with draw_seed, so the
    same (sample, draw) pair always flips the same way. With augment False no
    stochastic transform is applied at all.
    """
    applied = []
    if img.mode != "RGB":  # grayscale gets replicated, alpha dropped
        img = img.convert("RGB")
        applied.append("to_rgb")
    s = config.target_size
    if img.size != (s, s):
        img = img.resize((s, s), Image.BILINEAR)
    applied.append(f"resize({s})")

    arr = np.asarray(img, dtype=np.float32) / 255.0  # HWC in [0, 1]
    if augment:
        rng = np.random.default_rng(draw_seed)
        if rng.random() < config.flip_probability:
            arr = arr[:, ::-1, :]
            applied.append("hflip")

    means = np.asarray(config.channel_means, dtype=np.float32)
    stds = np.asarray(config.channel_stds, dtype=np.float32)
    arr = (arr - means) / stds
    applied.append("normalize")

    chw = np.ascontiguousarray(arr.transpose(2, 0, 1), dtype=np.float32)
    return ImageTensor(data=chw, sample_id=sample_id, transforms=tuple(applied))


def load_and_preprocess(
    record: SampleRecord,
    config: PreprocessConfig,
    augment: bool,
    draw_seed: int,
) -> ImageTensor:
    """Decode the file behind a record and run the standard transform chain."""
    try:
        with Image.open(record.path) as img:
            img.load()  # pull pixels into memory so the fp can close
    except Exception as e:
        raise DecodeError(record.id, record.path, f"{type(e).__name__}: {e}") from e
    return transform_image(img, config, augment, draw_seed, sample_id=record.id)
