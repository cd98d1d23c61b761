"""Central finite-difference check of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    errors: list[float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors, default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def __bool__(self) -> bool:
        return self.passed


def numeric_grad(fn: Callable[..., Tensor], inputs: Sequence[Tensor], index: int, epsilon: float) -> np.ndarray:
    x = inputs[index]
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + epsilon
        f_plus = _scalar(fn(*inputs))
        flat[j] = orig - epsilon
        f_minus = _scalar(fn(*inputs))
        flat[j] = orig
        gflat[j] = (f_plus - f_minus) / (2.0 * epsilon)
    return grad


def _scalar(out) -> float:
    data = out.data if isinstance(out, Tensor) else np.asarray(out)
    if data.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {data.shape}")
    value = float(data.reshape(()))
    if not np.isfinite(value):
        raise ValueError("grad_check: function returned a non-finite value")
    return value


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare ``fn``'s reverse-mode gradient with central differences.

    The error per input is ``max|analytic - numeric| / max(max|analytic|,
    max|numeric|, floor)``; the check passes iff every input's error is within
    ``tolerance``. Inputs are modified in place while probing and restored.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    out = fn(*inputs)
    _scalar(out)
    if out.requires_grad:
        out.backward()
    analytic = [x.grad if x.grad is not None else np.zeros_like(x.data) for x in inputs]
    errors = []
    for i, a in enumerate(analytic):
        n = numeric_grad(fn, inputs, i, epsilon)
        scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
        errors.append(float(np.abs(a - n).max(initial=0.0) / scale))
    for x in inputs:
        x.grad = None
    return GradCheckReport(errors, tolerance)
