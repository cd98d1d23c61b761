"""AP at IoU 0.5 and embedding-similarity statistics."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np

from ..cpe import cosine_sim
from ..detector.boxes import box_iou, mask_iou


@dataclass
class Prediction:
    image_id: int
    class_id: int
    score: float
    box: np.ndarray  # xyxy pixels
    mask: np.ndarray | None = None


@dataclass
class GroundTruth:
    image_id: int
    class_id: int
    box: np.ndarray  # xyxy pixels
    mask: np.ndarray | None = None


@dataclass
class APResult:
    per_class: dict[int, float]
    mean: float


def _validate_box(box) -> np.ndarray:
    box = np.asarray(box, dtype=np.float64)
    if box.shape != (4,) or not np.isfinite(box).all() or box[2] <= box[0] or box[3] <= box[1]:
        raise ValueError(f"malformed box {box}")
    return box


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated area under the precision/recall curve of a ranked list."""
    if n_gt == 0:
        raise ValueError("average precision needs at least one ground-truth instance")
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    # precision envelope: max precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def ap50(predictions: Sequence[Prediction], ground_truth: Sequence[GroundTruth], iou_kind: str = "box",
         iou_threshold: float = 0.5) -> APResult:
    """Per-class AP over classes with ground truth, and their mean."""
    if iou_kind not in ("box", "mask"):
        raise ValueError("iou_kind must be 'box' or 'mask'")
    gts: dict[int, dict[int, list[GroundTruth]]] = {}
    for g in ground_truth:
        _validate_box(g.box)
        if iou_kind == "mask" and g.mask is None:
            raise ValueError("mask AP needs ground-truth masks")
        gts.setdefault(g.class_id, {}).setdefault(g.image_id, []).append(g)
    preds: dict[int, list[tuple[int, Prediction]]] = {}
    for idx, p in enumerate(predictions):
        _validate_box(p.box)
        if iou_kind == "mask" and p.mask is None:
            raise ValueError("mask AP needs predicted masks")
        preds.setdefault(p.class_id, []).append((idx, p))
    per_class = {}
    for c in sorted(gts):
        by_image = gts[c]
        n_gt = sum(len(v) for v in by_image.values())
        ranked = sorted(preds.get(c, []), key=lambda ip: (-ip[1].score, ip[0]))
        used = {img: np.zeros(len(v), dtype=bool) for img, v in by_image.items()}
        tp = np.zeros(len(ranked))
        for r, (_, p) in enumerate(ranked):
            cands = by_image.get(p.image_id)
            if not cands:
                continue
            if iou_kind == "box":
                ious = box_iou(p.box[None], np.stack([g.box for g in cands]))[0]
            else:
                if any(g.mask.shape != p.mask.shape for g in cands):
                    raise ValueError("mask shapes differ between prediction and ground truth")
                ious = mask_iou(p.mask[None], np.stack([g.mask for g in cands]))[0]
            ious = np.where(used[p.image_id], -1.0, ious)
            best = int(np.argmax(ious))
            if ious[best] >= iou_threshold:
                used[p.image_id][best] = True
                tp[r] = 1.0
        per_class[c] = average_precision(tp, n_gt)
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return APResult(per_class, mean)


@dataclass
class SimilarityReport:
    per_class: dict[int, float]
    flagged: list[int]  # classes omitted for having a single embedding


def intra_class_similarity(groups: Mapping[int, Sequence[np.ndarray]], clamp_epsilon: float = 1e-7) -> SimilarityReport:
    per_class, flagged = {}, []
    for c in sorted(groups):
        vecs = list(groups[c])
        if len(vecs) < 2:
            flagged.append(c)
            continue
        sims = [cosine_sim(a, b, clamp_epsilon) for a, b in combinations(vecs, 2)]
        per_class[c] = float(np.mean(sims))
    return SimilarityReport(per_class, flagged)


def inter_class_similarity(groups: Mapping[int, Sequence[np.ndarray]], clamp_epsilon: float = 1e-7) -> float:
    """Mean cosine over all pairs drawn from different classes."""
    sims = []
    keys = sorted(groups)
    for i, a in enumerate(keys):
        for b in keys[i + 1 :]:
            sims.extend(cosine_sim(x, y, clamp_epsilon) for x in groups[a] for y in groups[b])
    if not sims:
        raise ValueError("need at least two classes")
    return float(np.mean(sims))
