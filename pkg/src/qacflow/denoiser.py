"""Conditional denoising network with time and condition-code embeddings."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from . import tensor as T
from .flows import FlowSpec
from .fsq import CodebookConfig, Encoded, code_digits
from .tensor import Tensor

PARAMETERIZATIONS = ("denoiser", "velocity")


@dataclass(frozen=True)
class Preconditioning:
    """EDM-style input/output scalings; ``identity`` leaves the raw network alone."""

    kind: str = "edm"
    sigma_data: float = 0.5

    def c_skip(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "identity":
            return np.zeros_like(t)
        sd2 = self.sigma_data ** 2
        return sd2 / (t * t + sd2)

    def c_out(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "identity":
            return np.ones_like(t)
        return t * self.sigma_data / np.sqrt(t * t + self.sigma_data ** 2)

    def c_in(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "identity":
            return np.ones_like(t)
        return 1.0 / np.sqrt(t * t + self.sigma_data ** 2)

    def c_noise(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "identity":
            return t.copy()
        return 0.25 * np.log(t)


def sinusoidal_features(c: np.ndarray, dim: int = 64, max_freq: float = 64.0) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, math.log(max_freq), half))
    arg = np.asarray(c, dtype=np.float64).reshape(-1, 1) * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


class DenoiserNet(nn.Module):
    """MLP trunk; the time embedding plus condition embedding is added in every block.

    ``parameterization="denoiser"`` predicts clean data through the
    preconditioning; ``"velocity"`` predicts dX_t/dt directly.
    """

    def __init__(self, data_shape: tuple[int, ...], rng: np.random.Generator, *,
                 codebook: CodebookConfig | None = None, hidden: int = 128, depth: int = 3,
                 temb_dim: int = 64, parameterization: str = "velocity",
                 precond: Preconditioning | None = None, zero_out: bool = True):
        if parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"parameterization must be one of {PARAMETERIZATIONS}")
        self.data_shape = tuple(data_shape)
        self._dim = int(np.prod(self.data_shape))
        self._temb_dim = temb_dim
        self.codebook = codebook if codebook is not None and codebook.d > 0 else None
        self.parameterization = parameterization
        if precond is None:
            precond = Preconditioning("edm" if parameterization == "denoiser" else "identity")
        self.precond = precond

        self.time_embed = nn.Linear(temb_dim, hidden, rng)
        if self.codebook is not None:
            self.cond_embed = [nn.Linear(self.codebook.d, hidden, rng), nn.Linear(hidden, hidden, rng)]
        self.blocks = [nn.Linear(self._dim if i == 0 else hidden, hidden, rng) for i in range(depth)]
        self.out = nn.Linear(hidden, self._dim, rng, zero=zero_out)

    @property
    def conditional(self) -> bool:
        return self.codebook is not None

    def cond_tensor(self, cond, batch: int) -> Tensor | None:
        """Real-cast digits ``(B, d)``; accepts Encoded, a digit tensor/array or code indices."""
        if self.codebook is None:
            return None
        if cond is None:
            raise ValueError("conditional network needs condition codes")
        if isinstance(cond, Encoded):
            cond = cond.ste
        if not isinstance(cond, Tensor):
            arr = np.asarray(cond)
            if arr.ndim <= 1:
                arr = code_digits(np.broadcast_to(arr, (batch,)), self.codebook)
            cond = Tensor(arr.astype(np.float64))
        if cond.shape != (batch, self.codebook.d):
            raise T.ShapeError(f"condition shape {cond.shape} != {(batch, self.codebook.d)}")
        return cond

    def raw(self, x_in: Tensor, c_noise: np.ndarray, cond: Tensor | None) -> Tensor:
        b = x_in.shape[0]
        emb = T.silu(self.time_embed(Tensor(sinusoidal_features(c_noise, self._temb_dim))))
        if cond is not None:
            centred = T.sub(cond, float(self.codebook.centre))
            emb = T.add(emb, self.cond_embed[1](T.silu(self.cond_embed[0](centred))))
        h = T.reshape(x_in, (b, self._dim))
        for block in self.blocks:
            h = T.silu(T.add(block(h), emb))
        return self.out(h)


def _times(t, batch: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,)).copy()


def _flat(x, dim: int) -> Tensor:
    x = T.as_tensor(x)
    return T.reshape(x, (x.shape[0], dim)) if x.shape[1:] != (dim,) else x


def denoise(net: DenoiserNet, x_t, t, cond=None, flow: FlowSpec | None = None) -> Tensor:
    """Clean-data estimate D(x_t, t, y), returned flattened to ``(B, D)``."""
    x = _flat(x_t, net._dim)
    b = x.shape[0]
    t = _times(t, b)
    c = net.cond_tensor(cond, b)
    if net.parameterization == "denoiser":
        p = net.precond
        f = net.raw(T.scale_rows(x, p.c_in(t)), p.c_noise(t), c)
        return T.add(T.scale_rows(x, p.c_skip(t)), T.scale_rows(f, p.c_out(t)))
    if flow is None:
        raise ValueError("a velocity-parameterized net needs the flow to produce a denoised estimate")
    v = net.raw(x, net.precond.c_noise(t), c)
    ratio = flow.d_noise_scale(t) / flow.noise_scale(t)
    denom = flow.d_mean_scale(t) - flow.mean_scale(t) * ratio
    return T.scale_rows(T.sub(v, T.scale_rows(x, ratio)), 1.0 / denom)


def velocity(net: DenoiserNet, flow: FlowSpec, x_t, t, cond=None) -> Tensor:
    """Vector field fed to the ODE solvers, flattened to ``(B, D)``."""
    x = _flat(x_t, net._dim)
    b = x.shape[0]
    t = _times(t, b)
    if net.parameterization == "velocity":
        return net.raw(x, net.precond.c_noise(t), net.cond_tensor(cond, b))
    if np.any(t <= 0):
        raise ValueError("denoiser parameterization has no velocity at t = 0")
    d = denoise(net, x, t, cond)
    ratio = flow.d_noise_scale(t) / flow.noise_scale(t)
    coef = flow.d_mean_scale(t) - flow.mean_scale(t) * ratio
    return T.add(T.scale_rows(x, ratio), T.scale_rows(d, coef))


VelocityField = Callable[[np.ndarray, np.ndarray], np.ndarray]


def velocity_field(net: DenoiserNet, flow: FlowSpec, cond=None) -> VelocityField:
    """Numpy ``f(x, t)`` with the condition held fixed; no graph is recorded.

    ``cond`` may be per-sample (length B) and is matched to the batch passed in.
    """
    shape = net.data_shape

    def field(x: np.ndarray, t) -> np.ndarray:
        with T.no_grad():
            v = velocity(net, flow, x.reshape(len(x), -1), t, cond).data
        return v.reshape((len(x),) + shape)

    return field


def denoise_field(net: DenoiserNet, flow: FlowSpec | None = None):
    shape = net.data_shape

    def field(x: np.ndarray, t, cond=None) -> np.ndarray:
        with T.no_grad():
            d = denoise(net, x.reshape(len(x), -1), t, cond, flow).data
        return d.reshape((len(x),) + shape)

    return field


def loss_weight_edm(t, sigma_data: float = 0.5) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return (t * t + sigma_data ** 2) / (t * sigma_data) ** 2
