"""2-D discrete Fourier features for frequency-domain analysis.

Conventions used throughout:

* Forward transform is unnormalized, so the DC bin equals the plain pixel
  sum; the inverse carries the full 1/(H*W) factor. Round-tripping an image
  therefore reproduces it.
* A spectrum is either in "natural" layout (DC at [0, 0], straight from the
  transform) or "centered" layout (DC moved to [H//2, W//2] for viewing).
  Math happens in natural layout; human-facing features are centered.
* Amplitude features are log(1 + |X|), which keeps the huge DC peak on a
  comparable scale with the rest of the plane. Phase is in [-pi, pi].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LAYOUTS = ("natural", "centered")

LUMINANCE_WEIGHTS = (0.299, 0.587, 0.114)

# Below this, a log-amplitude plane is treated as constant and standardization
# is skipped (the zero image is the practical trigger).
TINY_STD = 1e-12


@dataclass(frozen=True)
class ComplexSpectrum:
    """Complex transform values plus which layout they are in."""

    values: np.ndarray
    layout: str = "natural"

    def __post_init__(self) -> None:
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}, got {self.layout!r}")
        if self.values.ndim != 2:
            raise ValueError(f"spectrum must be 2-D, got shape {self.values.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class SpectralFeatures:
    """Centered log-amplitude and phase planes for one image."""

    log_amplitude: np.ndarray
    phase: np.ndarray
    source_shape: tuple[int, int]


def _check_image(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D single-channel image, got shape {arr.shape}")
    if arr.shape[0] < 2 or arr.shape[1] < 2:
        raise ValueError(f"image too small for a meaningful transform: {arr.shape}")
    if not np.isfinite(arr).all():
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise ValueError(
            f"input contains non-finite values (first at row {bad[0]}, col {bad[1]})"
        )
    return arr


def fft2(image: np.ndarray) -> ComplexSpectrum:
    """Unnormalized forward 2-D transform of a single-channel image.

    The [0, 0] bin of the result is exactly image.sum().
    """
    arr = _check_image(image)
    return ComplexSpectrum(values=np.fft.fft2(arr), layout="natural")


def inverse_fft2(spectrum: ComplexSpectrum) -> np.ndarray:
    """Inverse transform back to a real-valued image.

    Refuses centered spectra: callers must undo the centering first, because
    silently inverting a shifted plane yields a garbage image.
    """
    if spectrum.layout != "natural":
        raise ValueError(
            "inverse transform requires natural layout; "
            "apply np.fft.ifftshift to the values first"
        )
    return np.fft.ifft2(spectrum.values).real


def amplitude_phase(spectrum: ComplexSpectrum) -> SpectralFeatures:
    """Centered log(1+|X|) and phase planes from a natural-layout spectrum."""
    if spectrum.layout != "natural":
        raise ValueError("amplitude_phase expects a natural-layout spectrum")
    v = spectrum.values
    log_amp = np.fft.fftshift(np.log1p(np.abs(v)))
    phase = np.fft.fftshift(np.angle(v))
    return SpectralFeatures(
        log_amplitude=log_amp, phase=phase, source_shape=v.shape
    )


def luminance(image_chw: np.ndarray) -> np.ndarray:
    """Collapse a 3-channel CHW image to single-channel luminance."""
    arr = np.asarray(image_chw, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {arr.shape}")
    r, g, b = LUMINANCE_WEIGHTS
    return r * arr[0] + g * arr[1] + b * arr[2]


def spectral_stack(image) -> np.ndarray:
    """Two-channel frequency feature map for a 3-channel image.

    Channel 0 is the per-image standardized centered log-amplitude (left as
    zeros when the plane is constant, e.g. for the all-zero image). Channel 1
    is phase scaled to [-1, 1]. Returns float32 (2, H, W).

    Accepts a raw (3, H, W) array or anything with a ``.data`` array
    attribute.
    """
    arr = getattr(image, "data", image)
    feats = amplitude_phase(fft2(luminance(arr)))
    la = feats.log_amplitude
    sd = la.std()
    if sd < TINY_STD:
        amp_channel = np.zeros_like(la)
    else:
        amp_channel = (la - la.mean()) / sd
    phase_channel = feats.phase / np.pi
    return np.stack([amp_channel, phase_channel]).astype(np.float32)


def to_grayscale_maps(feats: SpectralFeatures) -> tuple[np.ndarray, np.ndarray]:
    """Min-max scale the two feature planes to uint8 for writing as images."""

    def scale(plane: np.ndarray) -> np.ndarray:
        lo, hi = float(plane.min()), float(plane.max())
        if hi - lo < TINY_STD:
            return np.zeros(plane.shape, dtype=np.uint8)
        scaled = (plane - lo) / (hi - lo) * 255.0
        return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)

    return scale(feats.log_amplitude), scale(feats.phase)
