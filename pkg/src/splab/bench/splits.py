"""Seeded seen/unseen class splits and prompt exemplar allocation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset

PROTOCOL_SEEDS = (42, 82, 777)


class ProtocolViolationError(ValueError):
    pass


@dataclass(frozen=True)
class SplitConfig:
    class_split_seed: int = 42
    prompt_seed: int = 42
    unseen_fraction: float = 0.25

    def __post_init__(self):
        for name in ("class_split_seed", "prompt_seed"):
            if getattr(self, name) not in PROTOCOL_SEEDS:
                raise ValueError(f"{name} must be one of {PROTOCOL_SEEDS}")
        if not 0.0 < self.unseen_fraction < 1.0:
            raise ValueError("unseen_fraction must lie in (0, 1)")


@dataclass
class PromptAllocation:
    exemplars: dict[int, list[int]]  # class id -> image ids
    default_count: int = 5
    tail_count: int = 1
    tail_threshold: int = 10

    def all_ids(self) -> set[int]:
        return {i for ids in self.exemplars.values() for i in ids}


@dataclass
class Split:
    seen: list[int]
    unseen: list[int]
    train_ids: list[int]  # images whose labels are all seen
    query_ids: list[int]  # unseen-only images that are not prompt exemplars
    allocation: PromptAllocation
    config: SplitConfig = field(default_factory=SplitConfig)

    def seen_query_ids(self) -> list[int]:
        prompts = self.allocation.all_ids()
        return [i for i in self.train_ids if i not in prompts]


def choose_unseen(n_classes: int, seed: int, fraction: float) -> list[int]:
    n_unseen = min(max(int(np.floor(n_classes * fraction + 0.5)), 1), n_classes - 1)
    rng = np.random.default_rng(seed)
    return sorted(rng.permutation(n_classes)[:n_unseen].tolist())


def allocate_prompts(dataset: Dataset, classes: list[int], seed: int, default_count: int = 5,
                     tail_count: int = 1, tail_threshold: int = 10) -> PromptAllocation:
    rng = np.random.default_rng(seed)
    exemplars = {}
    for c in classes:
        pool = dataset.single_label_with(c)
        if not pool:
            raise ProtocolViolationError(f"class {c} has no single-label image to use as a prompt")
        total = len(dataset.images_with(c))
        want = tail_count if total <= tail_threshold else default_count
        picks = rng.permutation(len(pool))[: min(want, len(pool))]
        exemplars[c] = sorted(pool[i] for i in picks)
    return PromptAllocation(exemplars, default_count, tail_count, tail_threshold)


def make_splits(dataset: Dataset, config: SplitConfig = SplitConfig(), default_count: int = 5) -> Split:
    n = dataset.num_classes
    if n < 4:
        raise ValueError("the protocol needs at least 4 classes")
    unseen = choose_unseen(n, config.class_split_seed, config.unseen_fraction)
    seen = [c for c in range(n) if c not in unseen]
    allocation = allocate_prompts(dataset, list(range(n)), config.prompt_seed, default_count)
    prompts = allocation.all_ids()
    unseen_set, seen_set = set(unseen), set(seen)
    train_ids = [s.image_id for s in dataset.samples if s.labels and s.labels <= seen_set]
    query_ids = [
        s.image_id for s in dataset.samples if s.labels and s.labels <= unseen_set and s.image_id not in prompts
    ]
    return Split(seen, unseen, train_ids, query_ids, allocation, config)
