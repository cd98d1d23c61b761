"""Spatial-spectral prompt encoding.

A prompt region is described twice: by a ring-averaged Fourier magnitude
profile of its crop (orientation-invariant by construction) and by masked
attention over the prompt image's vision tokens. Two small MLPs map both codes
into the shared embedding space where they are summed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import map_coordinates

from .numcore import MLP, Module, Parameter, Tensor
from .numcore import ops

LUMA = np.array([0.299, 0.587, 0.114])
DEFAULT_BINS = 256
CROP_SIZE = 64


class DegenerateRoIError(ValueError):
    pass


@dataclass
class PromptEmbedding:
    vector: np.ndarray
    class_label: int
    source_id: str


def to_grayscale(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[-1] == 3:
        return image @ LUMA
    if image.ndim != 2:
        raise ValueError(f"expected HxW or HxWx3 image, got shape {image.shape}")
    return image


def check_patch(patch: np.ndarray) -> np.ndarray:
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 2 or patch.size == 0:
        raise ValueError(f"patch must be a non-empty 2-D array, got shape {patch.shape}")
    if patch.shape[0] < 2 or patch.shape[1] < 2:
        raise ValueError(f"patch must be at least 2x2, got {patch.shape}")
    return patch


def dft2_magnitude(patch: np.ndarray) -> np.ndarray:
    """|FFT2| with the zero frequency moved to index (H//2, W//2)."""
    patch = check_patch(patch)
    return np.abs(np.fft.fftshift(np.fft.fft2(patch)))


def _radius_grid(shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    y = np.arange(h) - h // 2
    x = np.arange(w) - w // 2
    return np.sqrt(y[:, None] ** 2 + x[None, :] ** 2)


def radial_bin_index(shape: tuple[int, int], bins: int) -> np.ndarray:
    """Bin id per cell: normalised radius split into ``bins`` half-open rings, last one closed."""
    r = _radius_grid(shape)
    rmax = r.max()
    rn = r / rmax if rmax > 0 else r
    return np.minimum((rn * bins).astype(np.int64), bins - 1)


def radial_bin(magnitude: np.ndarray, bins: int = DEFAULT_BINS) -> np.ndarray:
    """Ring-mean of a centred magnitude grid, L2-normalised. Empty rings read 0."""
    if bins < 1:
        raise ValueError("bin count must be >= 1")
    magnitude = np.asarray(magnitude, dtype=np.float64)
    if magnitude.ndim != 2 or magnitude.size == 0:
        raise ValueError("magnitude grid must be a non-empty 2-D array")
    idx = radial_bin_index(magnitude.shape, bins).ravel()
    sums = np.bincount(idx, weights=magnitude.ravel(), minlength=bins)
    counts = np.bincount(idx, minlength=bins)
    f = np.divide(sums, counts, out=np.zeros(bins), where=counts > 0)
    norm = np.linalg.norm(f)
    return f / norm if norm > 0 else f


def crop_resize(image: np.ndarray, box_xyxy: Sequence[float], size: int = CROP_SIZE) -> np.ndarray:
    """Bilinearly resample the pixel box (x0, y0, x1, y1) onto a size x size grid."""
    x0, y0, x1, y1 = map(float, box_xyxy)
    if x1 <= x0 or y1 <= y0:
        raise DegenerateRoIError(f"empty crop box {box_xyxy}")
    # pixel-centre sampling inside the box
    ys = y0 + (np.arange(size) + 0.5) * (y1 - y0) / size - 0.5
    xs = x0 + (np.arange(size) + 0.5) * (x1 - x0) / size - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return map_coordinates(image, [yy, xx], order=1, mode="nearest")


def radial_spectrum(image: np.ndarray, box_xyxy: Sequence[float], bins: int = DEFAULT_BINS,
                    crop_size: int = CROP_SIZE) -> np.ndarray:
    """Crop, grayscale, resize, DFT and ring-bin one prompt region."""
    gray = to_grayscale(image)
    return radial_bin(dft2_magnitude(crop_resize(gray, box_xyxy, crop_size)), bins)


def roi_token_mask(mask: np.ndarray, patch: int) -> np.ndarray:
    """Downsample a pixel mask to the token grid; a token is on if any pixel overlaps."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    if h % patch or w % patch:
        raise ValueError(f"mask {mask.shape} not divisible by patch size {patch}")
    return mask.reshape(h // patch, patch, w // patch, patch).any(axis=(1, 3)).ravel()


class RadialFrequencyEncoder(Module):
    """Two-layer perceptron from a J-bin spectrum to a d-dim spectral code."""

    def __init__(self, bins: int, d: int, rng: np.random.Generator, activation: str = "gelu"):
        self.bins = bins
        self.mlp = MLP([bins, d, d], rng, activation=activation)

    def forward(self, spectrum) -> Tensor:
        spectrum = ops.as_tensor(spectrum)
        if spectrum.shape[-1] != self.bins:
            raise ValueError(f"spectrum has {spectrum.shape[-1]} bins, encoder expects {self.bins}")
        return self.mlp(spectrum)


class SpatialPromptEncoder(Module):
    """A learned query attends over prompt-image tokens restricted to the RoI."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.query = Parameter(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d,)))
        self.key = Parameter(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d)))
        self.value = Parameter(np.eye(d) + rng.normal(0.0, 0.1 / np.sqrt(d), size=(d, d)))
        self.d = d

    def forward(self, tokens, roi_mask) -> Tensor:
        """tokens (..., N, d), roi_mask (..., N) -> (..., d)."""
        tokens = ops.as_tensor(tokens)
        roi_mask = np.asarray(roi_mask, dtype=bool)
        if roi_mask.shape != tokens.shape[:-1]:
            raise ValueError(f"roi mask shape {roi_mask.shape} does not match tokens {tokens.shape}")
        if not roi_mask.any(axis=-1).all():
            raise DegenerateRoIError("degenerate RoI: mask selects no token")
        keys = tokens @ self.key
        scores = (keys @ self.query.reshape(self.d, 1)).reshape(*roi_mask.shape) * (1.0 / np.sqrt(self.d))
        attn = ops.softmax(scores, axis=-1, mask=roi_mask)
        values = tokens @ self.value
        return (attn.reshape(*roi_mask.shape, 1) * values).sum(axis=-2)


class PromptFusion(Module):
    """e = f_align(z_spatial) + v_align(z_freq), both d -> d -> d perceptrons."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.f_align = MLP([d, d, d], rng)
        self.v_align = MLP([d, d, d], rng)
        self.d = d

    def forward(self, z_spatial, z_freq=None) -> Tensor:
        z_spatial = ops.as_tensor(z_spatial)
        if z_spatial.shape[-1] != self.d:
            raise ValueError(f"spatial code has width {z_spatial.shape[-1]}, expected {self.d}")
        e = self.f_align(z_spatial)
        if z_freq is None:
            return e
        z_freq = ops.as_tensor(z_freq)
        if z_freq.shape != z_spatial.shape:
            raise ValueError(f"code shapes differ: spatial {z_spatial.shape} vs spectral {z_freq.shape}")
        return e + self.v_align(z_freq)


class PromptEncoder(Module):
    """Full prompt path: spectral code + masked spatial code, fused.

    ``use_spectral=False`` drops the frequency branch (the spatial-only ablation).
    """

    def __init__(self, d: int, rng: np.random.Generator, bins: int = DEFAULT_BINS, use_spectral: bool = True):
        self.spectral = RadialFrequencyEncoder(bins, d, rng)
        self.spatial = SpatialPromptEncoder(d, rng)
        self.fusion = PromptFusion(d, rng)
        self.use_spectral = use_spectral
        self.bins = bins

    def forward(self, tokens, roi_masks, spectra) -> Tensor:
        z_spatial = self.spatial(tokens, roi_masks)
        z_freq = self.spectral(spectra) if self.use_spectral else None
        return self.fusion(z_spatial, z_freq)


def write_spectra_csv(path: str | Path, rows: Iterable[tuple[str, int, np.ndarray]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for source_id, label, bins in rows:
            writer.writerow([source_id, int(label), *(repr(float(b)) for b in bins)])


def read_spectra_csv(path: str | Path) -> list[tuple[str, int, np.ndarray]]:
    with open(path, newline="") as fh:
        return [(r[0], int(r[1]), np.array([float(v) for v in r[2:]])) for r in csv.reader(fh)]
