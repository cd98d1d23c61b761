"""Procedural defect imagery: textured backgrounds with rotated defect instances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_dilation, gaussian_filter

from .data import Dataset, Sample, masks_to_instances

FAMILIES = ("scratch", "spot", "crack", "ring", "dent-texture", "checker-patch")
N_BACKGROUNDS = 4


@dataclass(frozen=True)
class SyntheticSpec:
    defect_family: str
    rotation_deg: float
    scale: float
    intensity: float
    background_id: int
    seed: int

    def __post_init__(self):
        if self.defect_family not in FAMILIES:
            raise ValueError(f"unknown defect family {self.defect_family!r}; expected one of {FAMILIES}")
        if not 0.0 <= self.rotation_deg < 360.0:
            raise ValueError("rotation_deg must lie in [0, 360)")
        if not 0.25 <= self.scale <= 2.0:
            raise ValueError("scale must lie in [0.25, 2.0]")


def background(background_id: int, size: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.42, 0.58)
    noise = rng.normal(size=(size, size))
    if background_id == 0:  # smooth ramp
        yy, xx = np.mgrid[0:size, 0:size] / size
        ang = rng.uniform(0, 2 * np.pi)
        img = base + 0.08 * (np.cos(ang) * xx + np.sin(ang) * yy - 0.5) + 0.015 * noise
    elif background_id == 1:  # brushed metal
        img = base + 0.05 * gaussian_filter(noise, sigma=(0.3, 4.0)) * 4 + 0.01 * rng.normal(size=(size, size))
    elif background_id == 2:  # mottled
        img = base + 0.25 * gaussian_filter(noise, sigma=5.0) + 0.01 * rng.normal(size=(size, size))
    elif background_id == 3:  # fine grain
        img = base + 0.035 * noise
    else:
        raise ValueError(f"unknown background id {background_id}")
    return img


def _local_frame(size: int, center: tuple[float, float], rotation_deg: float):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    t = np.deg2rad(rotation_deg)
    c, s = np.cos(t), np.sin(t)
    return c * dx + s * dy, -s * dx + c * dy


def render_instance(spec: SyntheticSpec, size: int, center: tuple[float, float]) -> tuple[np.ndarray, np.ndarray]:
    """Intensity offset and exact binary mask of one defect centred at (row, col)."""
    u, v = _local_frame(size, center, spec.rotation_deg)
    s, amp = spec.scale, spec.intensity
    fam = spec.defect_family
    if fam == "spot":
        a, b = 5.0 * s, 4.0 * s
        prof = np.exp(-((u / a) ** 2 + (v / b) ** 2))
        return amp * prof, prof > 0.3
    if fam == "scratch":
        half = 12.0 * s
        along = np.clip(1.0 - (np.abs(u) - half) / 1.5, 0.0, 1.0)
        prof = np.exp(-(v**2) / (2 * 0.9**2)) * along
        return amp * prof, prof > 0.35
    if fam == "crack":
        half = 12.0 * s
        rng = np.random.default_rng(spec.seed)
        knots = np.linspace(-half, half, 7)
        offsets = np.cumsum(rng.normal(0.0, 1.3, size=7))
        offsets -= offsets.mean()
        path = np.interp(u, knots, offsets)
        along = np.clip(1.0 - (np.abs(u) - half) / 1.5, 0.0, 1.0)
        prof = np.exp(-((v - path) ** 2) / (2 * 0.9**2)) * along
        return amp * prof, prof > 0.35
    if fam == "ring":
        radius = 7.0 * s
        rho = np.sqrt(u**2 + (v / 0.85) ** 2)
        prof = np.exp(-((rho - radius) ** 2) / (2 * 0.9**2))
        return amp * prof, prof > 0.3
    if fam == "dent-texture":
        a, b = 8.0 * s, 5.5 * s
        window = np.exp(-(((u / a) ** 2 + (v / b) ** 2) ** 2))
        ripple = np.cos(2 * np.pi * u / 3.0)
        return amp * window * ripple, window > 0.3
    # checker-patch
    half = 7.0 * s
    inside = (np.abs(u) < half) & (np.abs(v) < half)
    cells = np.sign(np.sin(np.pi * (u + 0.01) / 2.0) * np.sin(np.pi * (v + 0.01) / 2.0))
    return amp * cells * inside, inside


def random_spec(family: str, rng: np.random.Generator, background_id: int) -> SyntheticSpec:
    sign = 1.0 if family in ("scratch", "checker-patch", "dent-texture") else -1.0
    if family in ("spot", "ring") and rng.random() < 0.3:
        sign = -sign
    return SyntheticSpec(
        defect_family=family,
        rotation_deg=float(rng.uniform(0.0, 360.0)),
        scale=float(rng.uniform(0.8, 1.25)),
        intensity=float(sign * rng.uniform(0.25, 0.4)),
        background_id=background_id,
        seed=int(rng.integers(0, 2**63 - 1)),
    )


def _place(spec: SyntheticSpec, size: int, occupied: np.ndarray, rng: np.random.Generator, tries: int = 60):
    margin = 4
    for _ in range(tries):
        center = (float(rng.integers(margin, size - margin)), float(rng.integers(margin, size - margin)))
        delta, mask = render_instance(spec, size, center)
        if mask.sum() < 4:
            continue
        if (binary_dilation(mask, iterations=2) & occupied).any():
            continue
        return delta, mask
    return None


def render_image(family_ids: list[int], families: list[str], size: int, rng: np.random.Generator):
    """Image plus per-class defect maps for the requested instance classes."""
    bg = int(rng.integers(0, N_BACKGROUNDS))
    img = background(bg, size, rng)
    occupied = np.zeros((size, size), dtype=bool)
    class_maps: dict[int, np.ndarray] = {}
    specs = []
    for cid in family_ids:
        spec = random_spec(families[cid], rng, bg)
        placed = _place(spec, size, occupied, rng)
        if placed is None:
            continue
        delta, mask = placed
        img = img + delta
        occupied |= mask
        class_maps.setdefault(cid, np.zeros((size, size), dtype=bool))
        class_maps[cid] |= mask
        specs.append(spec)
    # 8-bit quantisation keeps the in-memory and on-disk datasets identical
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return img, class_maps, specs


def generate_dataset(
    families: list[str] | tuple[str, ...] = FAMILIES,
    n_images: int = 600,
    image_size: int = 64,
    seed: int = 42,
    multi_label_rate: float = 0.1,
    patch: int = 8,
) -> Dataset:
    """Deterministic synthetic benchmark; class id = position in ``families``."""
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    if image_size % patch:
        raise ValueError(f"image size {image_size} not divisible by patch size {patch}")
    families = list(families)
    for f in families:
        if f not in FAMILIES:
            raise ValueError(f"unknown defect family {f!r}; expected one of {FAMILIES}")
    n_cls = len(families)
    rng = np.random.default_rng(seed)
    primaries = np.resize(np.arange(n_cls), n_images)
    rng.shuffle(primaries)
    samples = []
    for i, primary in enumerate(primaries):
        ids = [int(primary)] * int(rng.integers(1, 4))
        if n_cls > 1 and rng.random() < multi_label_rate:
            other = int(rng.integers(0, n_cls - 1))
            other += other >= primary
            if len(ids) > 1:
                ids[-1] = other
            else:
                ids.append(other)
        img, class_maps, specs = render_image(ids, families, image_size, rng)
        instances = []
        for cid in sorted(class_maps):
            instances.extend(masks_to_instances(class_maps[cid], cid))
        if not instances:
            # placement can fail on a crowded canvas; retry with a single instance
            img, class_maps, specs = render_image([int(primary)], families, image_size, rng)
            instances = [inst for cid in sorted(class_maps) for inst in masks_to_instances(class_maps[cid], cid)]
        samples.append(Sample(i, img, instances, f"{i:06d}.pgm", specs))
    return Dataset(samples, families, image_size)
