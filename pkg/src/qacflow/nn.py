"""Small network building blocks on top of :mod:`qacflow.tensor`."""
from __future__ import annotations

import math
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

Activation = Callable[[Tensor], Tensor]

ACTIVATIONS: dict[str, Activation] = {
    "silu": T.silu,
    "relu": T.relu,
    "tanh": T.tanh,
}


class Module:
    """Parameter container; parameters are discovered from attributes in definition order."""

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Tensor, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    out[full] = value
            else:
                out.update(value.named_parameters(full + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} does not match parameter {p.shape}")
            p.data = arr.copy()


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, *, zero: bool = False):
        bound = 1.0 / math.sqrt(n_in)
        if zero:
            w = np.zeros((n_in, n_out))
            b = np.zeros(n_out)
        else:
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
            b = rng.uniform(-bound, bound, size=n_out)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(b, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add_bias(T.matmul(x, self.weight), self.bias)


class MLP(Module):
    def __init__(self, sizes: list[int], rng: np.random.Generator, *,
                 activation: str = "silu", zero_last: bool = False):
        self.layers = [Linear(a, b, rng, zero=zero_last and i == len(sizes) - 2)
                       for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        self._act = ACTIVATIONS[activation]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = self._act(layer(x))
        return self.layers[-1](x)


class Conv2d(Module):
    """2D convolution as im2col followed by a matrix product."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, *,
                 stride: int = 1, pad: int = 0):
        bound = 1.0 / math.sqrt(c_in * k * k)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(c_in * k * k, c_out)), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, size=c_out), requires_grad=True)
        self._k, self._stride, self._pad = k, stride, pad

    def __call__(self, x: Tensor) -> Tensor:
        b, _, h, w = x.shape
        k, s, p = self._k, self._stride, self._pad
        oh = (h + 2 * p - k) // s + 1
        ow = (w + 2 * p - k) // s + 1
        cols = T.unfold2d(x, k, s, p)
        y = T.add_bias(T.matmul(cols, self.weight), self.bias)
        return T.transpose(T.reshape(y, (b, oh, ow, -1)), (0, 3, 1, 2))
