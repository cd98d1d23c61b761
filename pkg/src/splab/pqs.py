"""Prompt-guided query selection: Gumbel-perturbed top-K over token relevance.

The forward pass takes the k highest perturbed scores as a hard mask; the
backward pass substitutes the gradient of ``softmax((S + g) / tau)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cpe import ClassPrototype, cosine_matrix
from .numcore import Tensor
from .numcore import ops

REFERENCE_NUM_QUERIES = 300
_TINY = np.nextafter(0.0, 1.0)


@dataclass(frozen=True)
class SelectionConfig:
    k: int = 16
    tau: float = 1.0
    noise_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be positive")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")


@dataclass
class SelectionResult:
    hard_mask: np.ndarray  # (..., N_s) bool, exactly k True per row
    soft_weights: Tensor  # (..., N_s), rows sum to 1
    selected_indices: np.ndarray  # (..., k), ascending
    perturbed: np.ndarray  # S + g


def relevance_scores(tokens, prototypes, clamp_epsilon: float = 1e-7) -> Tensor:
    """Per-token max cosine similarity over class prototypes: (..., N_s, d) -> (..., N_s)."""
    tokens = ops.as_tensor(tokens)
    if isinstance(prototypes, Sequence) and prototypes and isinstance(prototypes[0], ClassPrototype):
        prototypes = Tensor(np.stack([p.vector for p in prototypes]))
    prototypes = ops.as_tensor(prototypes)
    if prototypes.ndim < 2 or prototypes.shape[-2] == 0:
        raise ValueError("relevance_scores needs at least one prototype")
    if tokens.shape[-2] == 0:
        raise ValueError("relevance_scores needs at least one token")
    return ops.tmax(cosine_matrix(tokens, prototypes, clamp_epsilon), axis=-1)


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    u = np.maximum(rng.random(shape), _TINY)
    return -np.log(-np.log(u))


def topk_mask(values: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Hard top-k along the last axis; ties go to the lower index."""
    order = np.argsort(-values, axis=-1, kind="stable")[..., :k]
    idx = np.sort(order, axis=-1)
    mask = np.zeros(values.shape, dtype=bool)
    np.put_along_axis(mask, idx, True, axis=-1)
    return mask, idx


def gumbel_topk(scores, config: SelectionConfig, rng: np.random.Generator | None = None) -> SelectionResult:
    scores = ops.as_tensor(scores)
    n = scores.shape[-1]
    if config.k > n:
        raise ValueError(f"k={config.k} exceeds the token count {n}")
    if not config.tau > 0:
        raise ValueError("tau must be > 0")
    if config.noise_enabled:
        if rng is None:
            raise ValueError("noise is enabled but no generator was supplied")
        g = gumbel_noise(scores.shape, rng)
    else:
        g = np.zeros(scores.shape)
    perturbed = scores.data + g
    soft = ops.softmax((scores + g) * (1.0 / config.tau), axis=-1)
    mask, idx = topk_mask(perturbed, config.k)
    return SelectionResult(mask, soft, idx, perturbed)


def select_queries(tokens, result: SelectionResult, mode: str = "gather") -> Tensor:
    """Rows of ``tokens`` at the selected indices, with straight-through gradients.

    ``mode="gather"`` returns (..., k, d); ``mode="mask"`` keeps all N_s rows and
    zeroes the unselected ones. Either way the forward value is exactly the
    token data, and d(output)/d(soft weight i) is token i.
    """
    tokens = ops.as_tensor(tokens)
    if result.hard_mask.shape != tokens.shape[:-1]:
        raise ValueError(f"selection over {result.hard_mask.shape} does not match tokens {tokens.shape}")
    idx = result.selected_indices
    n = tokens.shape[-2]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError("selected index out of range")
    gate = ops.straight_through(result.hard_mask.astype(np.float64), result.soft_weights)
    gated = tokens * ops.reshape(gate, gate.shape + (1,))
    if mode == "mask":
        return gated
    if mode != "gather":
        raise ValueError(f"unknown selection mode {mode!r}")
    if tokens.ndim == 2:
        return ops.gather(gated, idx, axis=0)
    lead = np.indices(idx.shape)[:-1]
    return gated[(*lead, idx)]
