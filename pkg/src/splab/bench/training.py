"""Episodic training of the detector and prompt-based evaluation on a split."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from ..cpe import ClassPrototype, CpeConfig, class_prototypes, cpe_loss, prototype_tensor
from ..detector import Detector, LossWeights, ModelConfig, Target, soft_area_targets, total_loss
from ..detector.boxes import BBox, cxcywh_to_xyxy
from ..numcore import AdamW, no_grad
from ..sspe import PromptEmbedding
from .data import Dataset, Sample
from .metrics import GroundTruth, Prediction, ap50
from .perturb import augment, blur, box_to_mask, perturb_box_to_iou

REFERENCE_LEARNING_RATE = 1e-4


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    prompt_images_per_class: int = 2
    min_prompted_classes: int = 2
    learning_rate: float = 2e-3
    weight_decay: float = 0.05
    warmup_steps: int = 10
    linear_decay: bool = True
    use_cpe: bool = True
    augment: bool = True
    seed: int = 42
    weights: LossWeights = field(default_factory=LossWeights)
    cpe: CpeConfig = field(default_factory=CpeConfig)

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.prompt_images_per_class < 1:
            raise ValueError("invalid training schedule")
        if self.min_prompted_classes < 1:
            raise ValueError("min_prompted_classes must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    seconds: float = 0.0


def prompt_regions(samples: list[Sample], classes: list[int]):
    """(image index, mask, class) for every instance of a prompted class."""
    out = []
    for i, s in enumerate(samples):
        for inst in s.instances:
            if inst.class_id in classes:
                out.append((i, inst.mask, inst.class_id))
    return out


def make_target(sample_instances, class_index: dict[int, int], image_size: int, stride: int) -> Target:
    cls, boxes, masks = [], [], []
    for inst in sample_instances:
        if inst.class_id not in class_index:
            continue  # unprompted classes count as background
        cls.append(class_index[inst.class_id])
        boxes.append(BBox.from_pixels_xyxy(_tight(inst.mask), image_size, image_size).as_array())
        masks.append(soft_area_targets(inst.mask, stride))
    n_pix = (image_size // stride) ** 2
    return Target(np.array(cls, dtype=np.int64), np.array(boxes).reshape(-1, 4), np.array(masks).reshape(-1, n_pix))


def _tight(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return cols[0], rows[0], cols[-1] + 1, rows[-1] + 1


class _Inst:
    __slots__ = ("mask", "class_id")

    def __init__(self, mask, class_id):
        self.mask, self.class_id = mask, class_id


def _augmented(sample: Sample, rng: np.random.Generator, enabled: bool) -> Sample:
    if not enabled:
        return sample
    img, masks, _ = augment(sample.image, [i.mask for i in sample.instances], rng)
    return Sample(sample.image_id, img, [_Inst(m, i.class_id) for m, i in zip(masks, sample.instances)])


def train_detector(
    dataset: Dataset,
    train_ids: list[int],
    seen_classes: list[int],
    model_config: ModelConfig = ModelConfig(),
    config: TrainConfig = TrainConfig(),
    progress: Callable[[int, float], None] | None = None,
) -> tuple[Detector, TrainLog]:
    """Episodes: sample a subset of seen classes, build their prototypes from prompt
    images, detect them in other images of those classes."""
    if len(seen_classes) < 1:
        raise ValueError("training needs at least one seen class")
    model = Detector(model_config)
    rng = np.random.default_rng(config.seed)
    opt = AdamW(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay,
                warmup_steps=config.warmup_steps)
    by_id = dataset.by_id()
    train = [by_id[i] for i in train_ids]
    single = {c: [s for s in train if s.labels == {c}] for c in seen_classes}
    usable = [c for c in seen_classes if len(single[c]) >= config.prompt_images_per_class + 1]
    if not usable:
        raise ValueError("no seen class has enough single-label images for prompting")
    stride = model_config.mask_stride
    log = TrainLog()
    weights = config.weights if config.use_cpe else LossWeights(**{**config.weights.__dict__, "cpe": 0.0})
    start = time.perf_counter()
    for step in range(config.steps):
        if config.linear_decay:
            opt.state.learning_rate = config.learning_rate * (1.0 - step / config.steps)
        n_cls = int(rng.integers(min(config.min_prompted_classes, len(usable)), len(usable) + 1))
        classes = sorted(rng.choice(usable, size=n_cls, replace=False).tolist())
        prompt_samples = []
        for c in classes:
            pick = rng.choice(len(single[c]), size=config.prompt_images_per_class, replace=False)
            prompt_samples.extend(single[c][j] for j in pick)
        prompt_ids = {s.image_id for s in prompt_samples}
        pool = [s for s in train if s.labels & set(classes) and s.image_id not in prompt_ids]
        targets_s = [pool[j] for j in rng.choice(len(pool), size=min(config.batch_size, len(pool)), replace=False)]

        prompt_aug = [_augmented(s, rng, config.augment) for s in prompt_samples]
        target_aug = [_augmented(s, rng, config.augment) for s in targets_s]
        regions = prompt_regions(prompt_aug, classes)
        emb = model.embed_prompts(np.stack([s.image for s in prompt_aug]), [(i, m) for i, m, _ in regions])
        labels = [c for _, _, c in regions]
        _, protos = prototype_tensor(emb, labels, classes)
        index = {c: j for j, c in enumerate(classes)}
        targets = [make_target(s.instances, index, dataset.image_size, stride) for s in target_aug]
        out = model.forward(np.stack([s.image for s in target_aug]), protos, rng)
        prompt_loss = cpe_loss(emb, labels, config.cpe) if weights.cpe > 0 else None
        loss, _ = total_loss(out.layers, targets, weights, prompt_loss)
        loss.backward()
        opt.step()
        log.losses.append(float(loss.data))
        if progress is not None:
            progress(step, float(loss.data))
    log.seconds = time.perf_counter() - start
    return model, log


# -- prompts and evaluation ----------------------------------------------------


@dataclass(frozen=True)
class PromptCorruption:
    blur_sigma: float = 0.0
    jitter_iou: float | None = None
    seed: int = 0


def extract_embeddings(
    model: Detector,
    dataset: Dataset,
    exemplars: dict[int, list[int]],
    corruption: PromptCorruption = PromptCorruption(),
) -> list[PromptEmbedding]:
    """One embedding per prompt instance; blur and box jitter corrupt the prompts only."""
    by_id = dataset.by_id()
    rng = np.random.default_rng(corruption.seed)
    out = []
    with no_grad():
        for c in sorted(exemplars):
            for image_id in exemplars[c]:
                s = by_id[image_id]
                image = blur(s.image, corruption.blur_sigma) if corruption.blur_sigma > 0 else s.image
                regions = []
                for n, inst in enumerate(s.instances):
                    if inst.class_id != c:
                        continue
                    mask = inst.mask
                    if corruption.jitter_iou is not None:
                        h, w = mask.shape
                        box = perturb_box_to_iou(inst.bbox.clamped(), corruption.jitter_iou, rng)
                        mask = box_to_mask(box, h, w)
                    regions.append((n, mask))
                if not regions:
                    continue
                emb = model.embed_prompts(image[None], [(0, m) for _, m in regions]).data
                for (n, _), vec in zip(regions, emb):
                    out.append(PromptEmbedding(vec.copy(), c, f"{image_id}:{n}"))
    return out


def extract_prototypes(model: Detector, dataset: Dataset, exemplars: dict[int, list[int]],
                       corruption: PromptCorruption = PromptCorruption()) -> list[ClassPrototype]:
    return class_prototypes(extract_embeddings(model, dataset, exemplars, corruption))


@dataclass
class EvalResult:
    ap_box: float
    ap_mask: float
    per_class_box: dict[int, float]
    per_class_mask: dict[int, float]
    n_images: int
    n_predictions: int


def detect(model: Detector, dataset: Dataset, image_ids: list[int], prototypes: list[ClassPrototype],
           score_threshold: float = 0.05) -> list[Prediction]:
    by_id = dataset.by_id()
    size = dataset.image_size
    preds = []
    for i in image_ids:
        det = model.predict(by_id[i].image, prototypes, score_threshold)
        xyxy = cxcywh_to_xyxy(det.boxes) * size if len(det) else np.zeros((0, 4))
        for j in range(len(det)):
            preds.append(Prediction(i, int(det.labels[j]), float(det.scores[j]), xyxy[j], det.masks[j]))
    return preds


def ground_truth(dataset: Dataset, image_ids: list[int], classes: list[int]) -> list[GroundTruth]:
    by_id = dataset.by_id()
    size = dataset.image_size
    out = []
    for i in image_ids:
        for inst in by_id[i].instances:
            if inst.class_id in classes:
                out.append(GroundTruth(i, inst.class_id, inst.bbox.to_pixels_xyxy(size, size), inst.mask))
    return out


def evaluate(model: Detector, dataset: Dataset, image_ids: list[int], prototypes: list[ClassPrototype],
             score_threshold: float = 0.05) -> EvalResult:
    classes = [p.class_id for p in prototypes]
    preds = detect(model, dataset, image_ids, prototypes, score_threshold)
    gts = ground_truth(dataset, image_ids, classes)
    box = ap50(preds, gts, "box")
    mask = ap50(preds, gts, "mask")
    return EvalResult(box.mean, mask.mean, box.per_class, mask.per_class, len(image_ids), len(preds))
