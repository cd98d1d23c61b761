from .boxes import BBox, DegenerateBoxError, InstanceAnnotation, box_iou, giou, mask_iou, mask_to_box
from .losses import LossBreakdown, LossWeights, Target, soft_area_targets, total_loss
from .matching import hungarian_match, matching_cost
from .model import DetectionResult, Detector, ForwardOutput, LayerOutput, ModelConfig, class_logits

__all__ = [
    "BBox",
    "DegenerateBoxError",
    "DetectionResult",
    "Detector",
    "ForwardOutput",
    "InstanceAnnotation",
    "LayerOutput",
    "LossBreakdown",
    "LossWeights",
    "ModelConfig",
    "Target",
    "box_iou",
    "class_logits",
    "giou",
    "hungarian_match",
    "mask_iou",
    "mask_to_box",
    "matching_cost",
    "soft_area_targets",
    "total_loss",
]
