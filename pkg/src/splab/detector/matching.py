"""One-to-one assignment between predictions and ground truth."""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

from .boxes import cxcywh_to_xyxy, generalized_box_iou


def hungarian_match(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost assignment of min(n_pred, n_gt) pairs, sorted by prediction index."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    if np.isnan(cost).any():
        raise ValueError("cost matrix contains NaN")
    if cost.size == 0:
        return []
    rows, cols = linear_sum_assignment(cost)
    return sorted(zip(rows.tolist(), cols.tolist()))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def matching_cost(
    class_logits: np.ndarray,
    boxes: np.ndarray,
    mask_logits: np.ndarray | None,
    gt_classes: np.ndarray,
    gt_boxes: np.ndarray,
    gt_masks: np.ndarray | None,
    weights,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> np.ndarray:
    """Pairwise cost (k, n_gt) built from the same terms as the training loss.

    class_logits (k, C), boxes (k, 4) cxcywh, mask_logits (k, P); gt_boxes
    (n, 4) cxcywh, gt_masks (n, P) soft targets in [0, 1].
    """
    p = _sigmoid(class_logits[:, gt_classes])
    eps = 1e-12
    pos = alpha * (1 - p) ** gamma * -np.log(p + eps)
    neg = (1 - alpha) * p**gamma * -np.log(1 - p + eps)
    cost = weights.cls * (pos - neg)
    cost = cost + weights.l1 * np.abs(boxes[:, None, :] - gt_boxes[None, :, :]).sum(-1)
    cost = cost + weights.giou * (1.0 - generalized_box_iou(cxcywh_to_xyxy(boxes), cxcywh_to_xyxy(gt_boxes)))
    if mask_logits is not None and gt_masks is not None and (weights.bce or weights.dice):
        m = _sigmoid(mask_logits)
        npix = mask_logits.shape[1]
        # BCE(x, t) = softplus(x) - x t
        sp = np.logaddexp(0.0, mask_logits)
        bce = (sp.sum(1)[:, None] - mask_logits @ gt_masks.T) / npix
        num = 2.0 * m @ gt_masks.T + 1.0
        den = m.sum(1)[:, None] + gt_masks.sum(1)[None, :] + 1.0
        cost = cost + weights.bce * bce + weights.dice * (1.0 - num / den)
    return cost
