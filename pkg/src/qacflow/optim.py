"""Gradient-descent optimizers and parameter EMA."""
from __future__ import annotations

import logging
from typing import Mapping

import numpy as np

from .tensor import Tensor

log = logging.getLogger(__name__)


class Optimizer:
    def __init__(self, params: Mapping[str, Tensor], lr: float):
        self.params = dict(params)
        self.lr = float(lr)
        self.skipped = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _grads(self) -> dict[str, np.ndarray] | None:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in self.params.items()}
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            self.skipped += 1
            log.warning("non-finite gradient; optimizer step skipped (%d so far)", self.skipped)
            return None
        return grads

    def step(self) -> bool:
        """Apply one update in place. Returns False when the step was skipped."""
        raise NotImplementedError

    def state_dict(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        pass


class SGD(Optimizer):
    def step(self) -> bool:
        grads = self._grads()
        if grads is None:
            return False
        for k, p in self.params.items():
            p.data = p.data - self.lr * grads[k]
        return True


class Adam(Optimizer):
    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> bool:
        grads = self._grads()
        if grads is None:
            return False
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return True

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([float(self.t)])}
        out.update({f"m/{k}": v.copy() for k, v in self.m.items()})
        out.update({f"v/{k}": v.copy() for k, v in self.v.items()})
        return out

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        self.t = int(state["t"][0])
        for k in self.params:
            self.m[k] = np.array(state[f"m/{k}"], dtype=np.float64)
            self.v[k] = np.array(state[f"v/{k}"], dtype=np.float64)


def make_optimizer(kind: str, params: Mapping[str, Tensor], lr: float) -> Optimizer:
    if kind == "adam":
        return Adam(params, lr)
    if kind == "sgd":
        return SGD(params, lr)
    raise ValueError(f"unknown optimizer {kind!r}")


def ema_update(shadow: dict[str, np.ndarray], live: Mapping[str, Tensor | np.ndarray],
               mu: float) -> dict[str, np.ndarray]:
    """shadow <- mu * shadow + (1 - mu) * live, elementwise and in place."""
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"EMA decay must lie in [0, 1], got {mu}")
    if shadow.keys() != live.keys():
        raise ValueError(f"EMA layout mismatch: {sorted(shadow)} vs {sorted(live)}")
    for k, v in live.items():
        arr = v.data if isinstance(v, Tensor) else np.asarray(v)
        if arr.shape != shadow[k].shape:
            raise ValueError(f"EMA layout mismatch at {k}: {shadow[k].shape} vs {arr.shape}")
        if mu == 1.0:
            continue
        shadow[k] = mu * shadow[k] + (1.0 - mu) * arr
    return shadow
