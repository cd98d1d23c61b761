"""Prompt corruptions for robustness sweeps, and training-time photometric augmentation."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

from ..detector.boxes import BBox, box_iou

IOU_TOLERANCE = 0.02
MAX_ATTEMPTS = 10_000

FLIP_PROBABILITY = 0.5
CONTRAST_RANGE = (0.8, 1.1)
BRIGHTNESS_RANGE = (0.5, 1.3)


class UnreachableTargetError(ValueError):
    pass


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel radius ceil(3 sigma), mirror padding about the edge."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    image = np.asarray(image, dtype=np.float64)
    if sigma == 0:
        return image.copy()
    k = gaussian_kernel(sigma)
    out = image
    for axis in range(image.ndim):
        out = correlate1d(out, k, axis=axis, mode="reflect")
    return out


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    return float(box_iou(a[None], b[None])[0, 0])


def perturb_box_to_iou(box: BBox, target_iou: float, rng: np.random.Generator,
                       tolerance: float = IOU_TOLERANCE, max_attempts: int = MAX_ATTEMPTS) -> BBox:
    """Random shift + rescale whose IoU with ``box`` is within ``tolerance`` of the target.

    Each attempt draws a random direction in (dx, dy, log w, log h) space and
    bisects along it for the target IoU; the result is clipped to the unit square.
    """
    if not 0.0 < target_iou <= 1.0:
        raise ValueError("target_iou must lie in (0, 1]")
    if target_iou == 1.0:
        return box
    ref = box.xyxy()

    def candidate(direction, t):
        cx = box.cx + t * direction[0] * box.w
        cy = box.cy + t * direction[1] * box.h
        w = box.w * math.exp(t * direction[2])
        h = box.h * math.exp(t * direction[3])
        x0, y0 = max(cx - w / 2, 0.0), max(cy - h / 2, 0.0)
        x1, y1 = min(cx + w / 2, 1.0), min(cy + h / 2, 1.0)
        if x1 - x0 <= 1e-9 or y1 - y0 <= 1e-9:
            return None
        return np.array([x0, y0, x1, y1])

    for _ in range(max_attempts):
        direction = rng.normal(size=4)
        direction /= np.linalg.norm(direction)
        lo, hi = 0.0, 8.0
        far = candidate(direction, hi)
        if far is not None and _iou(ref, far) > target_iou:
            continue
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            cand = candidate(direction, mid)
            if cand is None or _iou(ref, cand) < target_iou:
                hi = mid
            else:
                lo = mid
        cand = candidate(direction, lo)
        if cand is not None and abs(_iou(ref, cand) - target_iou) <= tolerance:
            return BBox.from_xyxy(cand)
    raise UnreachableTargetError(f"could not reach IoU {target_iou} within {max_attempts} attempts")


def box_to_mask(box: BBox, height: int, width: int) -> np.ndarray:
    """Pixels whose centres fall inside the box (at least one pixel)."""
    x0, y0, x1, y1 = box.to_pixels_xyxy(width, height)
    cols = (np.arange(width) + 0.5 >= x0) & (np.arange(width) + 0.5 <= x1)
    rows = (np.arange(height) + 0.5 >= y0) & (np.arange(height) + 0.5 <= y1)
    mask = rows[:, None] & cols[None, :]
    if not mask.any():
        cy = min(int((y0 + y1) / 2), height - 1)
        cx = min(int((x0 + x1) / 2), width - 1)
        mask[cy, cx] = True
    return mask


def augment(image: np.ndarray, masks: list[np.ndarray], rng: np.random.Generator):
    """Horizontal flip (p=0.5), contrast and brightness jitter; masks follow the flip."""
    out = np.asarray(image, dtype=np.float64)
    if rng.random() < FLIP_PROBABILITY:
        out = out[:, ::-1]
        masks = [m[:, ::-1] for m in masks]
    contrast = rng.uniform(*CONTRAST_RANGE)
    brightness = rng.uniform(*BRIGHTNESS_RANGE)
    mean = out.mean()
    out = np.clip(((out - mean) * contrast + mean) * brightness, 0.0, 1.0)
    return out, [np.ascontiguousarray(m) for m in masks], (contrast, brightness)
