"""Box types and overlap measures (numpy for evaluation, Tensor for losses)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numcore import Tensor
from ..numcore import ops


class DegenerateBoxError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    """Normalised centre-format box."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise DegenerateBoxError(f"box must have positive extent, got w={self.w} h={self.h}")

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])

    def xyxy(self) -> np.ndarray:
        return cxcywh_to_xyxy(self.as_array())

    def clamped(self) -> BBox:
        x0, y0, x1, y1 = np.clip(self.xyxy(), 0.0, 1.0)
        return BBox.from_xyxy((x0, y0, x1, y1))

    def to_pixels_xyxy(self, width: int, height: int) -> np.ndarray:
        return self.xyxy() * np.array([width, height, width, height])

    def to_pixels_xywh(self, width: int, height: int) -> list[float]:
        x0, y0, x1, y1 = self.to_pixels_xyxy(width, height)
        return [float(x0), float(y0), float(x1 - x0), float(y1 - y0)]

    @classmethod
    def from_xyxy(cls, xyxy) -> BBox:
        x0, y0, x1, y1 = map(float, xyxy)
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    @classmethod
    def from_pixels_xyxy(cls, xyxy, width: int, height: int) -> BBox:
        x0, y0, x1, y1 = map(float, xyxy)
        return cls.from_xyxy((x0 / width, y0 / height, x1 / width, y1 / height))


@dataclass
class InstanceAnnotation:
    bbox: BBox
    mask: np.ndarray  # (H, W) bool at image resolution
    class_id: int

    @classmethod
    def from_mask(cls, mask: np.ndarray, class_id: int) -> InstanceAnnotation:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError("instance mask has no positive pixel")
        return cls(BBox.from_pixels_xyxy(mask_to_box(mask), mask.shape[1], mask.shape[0]), mask, int(class_id))


def mask_to_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Tight pixel box (x0, y0, x1, y1) with exclusive upper corners."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("empty mask")
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    cx, cy, w, h = np.moveaxis(b, -1, 0)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def _check(b: np.ndarray) -> None:
    if np.any(b[..., 2] <= b[..., 0]) or np.any(b[..., 3] <= b[..., 1]):
        raise DegenerateBoxError("zero-area box")


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of xyxy boxes: (N, 4) x (M, 4) -> (N, M)."""
    a, b = np.atleast_2d(a).astype(np.float64), np.atleast_2d(b).astype(np.float64)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def generalized_box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise GIoU of xyxy boxes: (N, 4) x (M, 4) -> (N, M)."""
    a, b = np.atleast_2d(a).astype(np.float64), np.atleast_2d(b).astype(np.float64)
    _check(a)
    _check(b)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    hull_wh = np.maximum(a[:, None, 2:], b[None, :, 2:]) - np.minimum(a[:, None, :2], b[None, :, :2])
    hull = hull_wh[..., 0] * hull_wh[..., 1]
    return inter / union - (hull - union) / hull


def giou(a: BBox, b: BBox) -> float:
    return float(generalized_box_iou(a.xyxy(), b.xyxy())[0, 0])


def giou_tensor(pred_cxcywh: Tensor, gt_xyxy: np.ndarray) -> Tensor:
    """Row-wise GIoU between predicted centre boxes (N, 4) and fixed xyxy boxes (N, 4)."""
    cx, cy, w, h = (pred_cxcywh[:, i] for i in range(4))
    x0, y0, x1, y1 = cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5
    g = np.asarray(gt_xyxy, dtype=np.float64)
    gx0, gy0, gx1, gy1 = (g[:, i] for i in range(4))
    iw = ops.relu(ops.minimum(x1, gx1) - ops.maximum(x0, gx0))
    ih = ops.relu(ops.minimum(y1, gy1) - ops.maximum(y0, gy0))
    inter = iw * ih
    union = w * h + (gx1 - gx0) * (gy1 - gy0) - inter
    hull = (ops.maximum(x1, gx1) - ops.minimum(x0, gx0)) * (ops.maximum(y1, gy1) - ops.minimum(y0, gy0))
    return inter / union - (hull - union) / hull


def mask_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of boolean masks: (N, H, W) x (M, H, W) -> (N, M)."""
    a = np.asarray(a, dtype=bool).reshape(len(a), -1).astype(np.float64)
    b = np.asarray(b, dtype=bool).reshape(len(b), -1).astype(np.float64)
    inter = a @ b.T
    union = a.sum(1)[:, None] + b.sum(1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
