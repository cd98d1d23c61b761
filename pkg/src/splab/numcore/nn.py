"""Parameters, modules and the small set of layers the models are built from."""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name


class Module:
    """Container that discovers Parameters / sub-Modules held as attributes or in lists."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list[Parameter]:
        params = []
        for name, p in self.named_parameters():
            p.name = name
            params.append(p)
        return params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = own.keys() - state.keys()
            extra = state.keys() - own.keys()
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, arr in state.items():
            if name not in own:
                continue
            p = own[name]
            if p.data.shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match parameter {p.data.shape}")
            p.data = np.array(arr, dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, name: str):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


def _init_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, zero: bool = False):
        w = np.zeros((d_in, d_out)) if zero else _init_uniform(rng, d_in, (d_in, d_out))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out)) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def forward(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.shape[-1] != self.d_in:
            raise ValueError(f"shape mismatch: Linear expects last axis {self.d_in}, got {x.shape}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(d))
        self.shift = Parameter(np.zeros(d))
        self.eps = eps

    def forward(self, x) -> Tensor:
        return T.layer_norm(x, self.eps) * self.gain + self.shift


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": T.relu,
    "gelu": T.gelu,
    "tanh": T.tanh,
    "linear": lambda x: x,
}


class MLP(Module):
    """Stack of Linear layers with an activation between (not after) them."""

    def __init__(self, dims: list[int], rng: np.random.Generator, activation: str = "gelu", zero_last: bool = False):
        if len(dims) < 2:
            raise ValueError("MLP needs at least input and output widths")
        self.layers = [
            Linear(a, b, rng, zero=zero_last and i == len(dims) - 2)
            for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))
        ]
        self.activation = activation

    def forward(self, x) -> Tensor:
        act = ACTIVATIONS[self.activation]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x


def attend(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """Scaled dot-product attention; ``mask`` marks keys that may be attended."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q @ k.mT) * scale
    return T.softmax(scores, axis=-1, mask=mask) @ v


class CrossAttention(Module):
    """Single-head attention from a set of queries onto a set of tokens."""

    def __init__(self, d: int, rng: np.random.Generator, zero_out: bool = False):
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng, zero=zero_out)

    def forward(self, x, tokens, mask=None) -> Tensor:
        return self.o(attend(self.q(x), self.k(tokens), self.v(tokens), mask))
