"""The 3 (class splits) x 3 (prompt seeds) evaluation protocol and its reports."""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from ..detector import Detector
from .data import Dataset
from .splits import PROTOCOL_SEEDS, SplitConfig, make_splits
from .training import EvalResult, PromptCorruption, evaluate, extract_prototypes


def worker_count() -> int:
    """Worker cap from SPL_THREADS (default 1)."""
    raw = os.environ.get("SPL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"SPL_THREADS must be an integer, got {raw!r}") from exc
    return max(n, 1)


@dataclass
class EvalReport:
    model_seeds: list[int]
    prompt_seeds: list[int]
    box: list[list[float]]  # [model seed][prompt seed]
    mask: list[list[float]]
    per_class: list[dict] = field(default_factory=list)  # flat rows
    mean_box: float = 0.0
    mean_mask: float = 0.0

    @classmethod
    def from_cells(cls, model_seeds, prompt_seeds, cells: Mapping[tuple[int, int], EvalResult]) -> EvalReport:
        box = [[cells[(m, p)].ap_box for p in prompt_seeds] for m in model_seeds]
        mask = [[cells[(m, p)].ap_mask for p in prompt_seeds] for m in model_seeds]
        rows = []
        for m in model_seeds:
            for p in prompt_seeds:
                r = cells[(m, p)]
                for c in sorted(r.per_class_box):
                    rows.append({"seed_model": m, "seed_prompt": p, "class": c,
                                 "ap50_box": r.per_class_box[c], "ap50_mask": r.per_class_mask[c]})
        return cls(list(model_seeds), list(prompt_seeds), box, mask, rows,
                   float(np.mean(box)), float(np.mean(mask)))

    def to_dict(self) -> dict:
        return {
            "model_seeds": self.model_seeds,
            "prompt_seeds": self.prompt_seeds,
            "ap50_box": self.box,
            "ap50_mask": self.mask,
            "mean_ap50_box": self.mean_box,
            "mean_ap50_mask": self.mean_mask,
            "per_class": self.per_class,
        }

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        return cls(d["model_seeds"], d["prompt_seeds"], d["ap50_box"], d["ap50_mask"], d.get("per_class", []),
                   d["mean_ap50_box"], d["mean_ap50_mask"])


def write_report_json(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))


def read_report_json(path: str | Path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def write_report_csv(report: EvalReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed_model", "seed_prompt", "class", "ap50_box", "ap50_mask"])
        for r in report.per_class:
            w.writerow([r["seed_model"], r["seed_prompt"], r["class"], repr(r["ap50_box"]), repr(r["ap50_mask"])])


def evaluate_cell(model: Detector, dataset: Dataset, model_seed: int, prompt_seed: int,
                  corruption: PromptCorruption = PromptCorruption(), score_threshold: float = 0.05,
                  prompt_count: int = 5) -> EvalResult:
    """Unseen-class AP for one (class split, prompt seed) pair; prompts come only from held-out exemplars."""
    split = make_splits(dataset, SplitConfig(model_seed, prompt_seed), default_count=prompt_count)
    exemplars = {c: split.allocation.exemplars[c] for c in split.unseen}
    prototypes = extract_prototypes(model, dataset, exemplars, corruption)
    return evaluate(model, dataset, split.query_ids, prototypes, score_threshold)


def run_protocol(
    dataset: Dataset,
    models: Mapping[int, Detector] | Callable[[int], Detector],
    model_seeds=PROTOCOL_SEEDS,
    prompt_seeds=PROTOCOL_SEEDS,
    corruption: PromptCorruption = PromptCorruption(),
    score_threshold: float = 0.05,
    prompt_count: int = 5,
) -> EvalReport:
    """Evaluate one trained model per class split under every prompt seed."""
    resolved = {}
    for m in model_seeds:
        if callable(models) and not isinstance(models, Mapping):
            resolved[m] = models(m)
        elif m in models:
            resolved[m] = models[m]
        else:
            raise KeyError(f"missing checkpoint for class-split seed {m}")
        if resolved[m] is None:
            raise KeyError(f"missing checkpoint for class-split seed {m}")
    jobs = [(m, p) for m in model_seeds for p in prompt_seeds]

    def run(job):
        m, p = job
        return job, evaluate_cell(resolved[m], dataset, m, p, corruption, score_threshold, prompt_count)

    workers = min(worker_count(), len(jobs))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cells = dict(pool.map(run, jobs))
    else:
        cells = dict(map(run, jobs))
    return EvalReport.from_cells(model_seeds, prompt_seeds, cells)
