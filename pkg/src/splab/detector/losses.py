"""Set-prediction objective: matching, focal classification, box and mask terms."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from ..numcore import Tensor
from ..numcore import ops
from .boxes import cxcywh_to_xyxy, giou_tensor
from .matching import hungarian_match, matching_cost
from .model import LayerOutput

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
TERMS = ("cls", "l1", "giou", "bce", "dice")


@dataclass(frozen=True)
class LossWeights:
    cls: float = 4.0
    l1: float = 5.0
    giou: float = 2.0
    bce: float = 5.0
    dice: float = 5.0
    cpe: float = 1.0
    # denoising queries are not built; the weight exists only to document that
    dn: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) >= 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")

    def scaled(self, factor: float) -> LossWeights:
        return LossWeights(**{f.name: getattr(self, f.name) * factor for f in fields(self)})


@dataclass
class Target:
    """Ground truth for one image; class indices refer to the prompted prototype order."""

    classes: np.ndarray  # (n,) int
    boxes: np.ndarray  # (n, 4) cxcywh
    masks: np.ndarray  # (n, P) soft coverage in [0, 1]

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.masks = np.asarray(self.masks, dtype=np.float64).reshape(len(self.classes), -1)
        if len(self.boxes) != len(self.classes):
            raise ValueError("targets need one box per class entry")


@dataclass
class LossBreakdown:
    per_layer: list[dict[str, float]]  # unweighted terms per decoder layer
    layer_totals: list[float]  # weighted sum per layer
    cpe: float
    total: float


def soft_area_targets(mask: np.ndarray, stride: int) -> np.ndarray:
    """Fraction of each stride x stride block covered by a pixel mask, flattened."""
    mask = np.asarray(mask, dtype=np.float64)
    h, w = mask.shape
    return mask.reshape(h // stride, stride, w // stride, stride).mean(axis=(1, 3)).ravel()


def sigmoid_focal(logits: Tensor, targets: np.ndarray, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> Tensor:
    """Elementwise focal loss on logits; returns the unreduced tensor."""
    t = np.asarray(targets, dtype=np.float64)
    p = ops.sigmoid(logits)
    # softplus(x) - x t, written through log-sigmoid for stability
    ce = -ops.log_sigmoid(logits) * t - ops.log_sigmoid(-logits) * (1.0 - t)
    p_t = p * t + (1.0 - p) * (1.0 - t)
    w = alpha * t + (1.0 - alpha) * (1.0 - t)
    return ce * (1.0 - p_t) ** gamma * w


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    t = np.asarray(targets, dtype=np.float64)
    return -ops.log_sigmoid(logits) * t - ops.log_sigmoid(-logits) * (1.0 - t)


def dice_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row 1 - (2|p t| + 1) / (|p| + |t| + 1)."""
    t = np.asarray(targets, dtype=np.float64)
    p = ops.sigmoid(logits)
    num = (p * t).sum(axis=-1) * 2.0 + 1.0
    den = p.sum(axis=-1) + t.sum(axis=-1) + 1.0
    return 1.0 - num / den


def match_layer(layer: LayerOutput, targets: list[Target], weights: LossWeights) -> list[list[tuple[int, int]]]:
    """Hungarian assignment per image, on detached predictions."""
    out = []
    for b, tgt in enumerate(targets):
        if len(tgt.classes) == 0:
            out.append([])
            continue
        cost = matching_cost(
            layer.class_logits.data[b],
            layer.boxes.data[b],
            layer.mask_logits.data[b],
            tgt.classes,
            tgt.boxes,
            tgt.masks,
            weights,
        )
        out.append(hungarian_match(cost))
    return out


def layer_terms(layer: LayerOutput, targets: list[Target], matches: list[list[tuple[int, int]]]) -> dict[str, Tensor]:
    """Unweighted loss terms for one decoder layer, each normalised by the GT count."""
    bsz, k, n_cls = layer.class_logits.shape
    if len(targets) != bsz or len(matches) != bsz:
        raise ValueError(f"batch of {bsz} predictions but {len(targets)} targets and {len(matches)} assignments")
    num_gt = max(sum(len(t.classes) for t in targets), 1)
    cls_target = np.zeros((bsz, k, n_cls))
    rows, cols, gt_boxes, gt_masks = [], [], [], []
    for b, (tgt, pairs) in enumerate(zip(targets, matches)):
        for q, g in pairs:
            if not (0 <= q < k and 0 <= g < len(tgt.classes)):
                raise ValueError(f"assignment ({q}, {g}) out of range for image {b}")
            cls_target[b, q, tgt.classes[g]] = 1.0
            rows.append(b)
            cols.append(q)
            gt_boxes.append(tgt.boxes[g])
            gt_masks.append(tgt.masks[g])
    terms = {"cls": sigmoid_focal(layer.class_logits, cls_target).sum() / num_gt}
    if not rows:
        zero = layer.boxes.sum() * 0.0
        terms.update(l1=zero, giou=zero, bce=zero, dice=zero)
        return terms
    idx = (np.asarray(rows), np.asarray(cols))
    pred_boxes = layer.boxes[idx]
    pred_masks = layer.mask_logits[idx]
    gt_boxes, gt_masks = np.asarray(gt_boxes), np.asarray(gt_masks)
    terms["l1"] = ops.tabs(pred_boxes - gt_boxes).sum() / num_gt
    terms["giou"] = (1.0 - giou_tensor(pred_boxes, cxcywh_to_xyxy(gt_boxes))).sum() / num_gt
    terms["bce"] = bce_with_logits(pred_masks, gt_masks).mean(axis=-1).sum() / num_gt
    terms["dice"] = dice_loss(pred_masks, gt_masks).sum() / num_gt
    return terms


def weighted(terms: dict[str, Tensor], weights: LossWeights) -> Tensor:
    total = None
    for name in TERMS:
        part = terms[name] * getattr(weights, name)
        total = part if total is None else total + part
    return total


def total_loss(
    layers: list[LayerOutput],
    targets: list[Target],
    weights: LossWeights = LossWeights(),
    prompt_loss: Tensor | None = None,
    matches: list[list[list[tuple[int, int]]]] | None = None,
) -> tuple[Tensor, LossBreakdown]:
    """Deep-supervised objective: every decoder layer gets the full weighted set loss,
    plus the weighted prompt-structuring loss when given."""
    if not layers:
        raise ValueError("no decoder layer outputs")
    if matches is None:
        matches = [match_layer(layer, targets, weights) for layer in layers]
    elif len(matches) != len(layers):
        raise ValueError(f"{len(layers)} decoder layers but {len(matches)} assignments")
    total = None
    per_layer, layer_totals = [], []
    for layer, layer_matches in zip(layers, matches):
        terms = layer_terms(layer, targets, layer_matches)
        lt = weighted(terms, weights)
        per_layer.append({name: float(terms[name].data) for name in TERMS})
        layer_totals.append(float(lt.data))
        total = lt if total is None else total + lt
    cpe = 0.0
    if prompt_loss is not None and weights.cpe > 0:
        cpe = float(prompt_loss.data)
        total = total + prompt_loss * weights.cpe
    return total, LossBreakdown(per_layer, layer_totals, cpe, float(total.data))
