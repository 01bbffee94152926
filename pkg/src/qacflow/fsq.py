"""Finite scalar quantization of encoder outputs into base-L condition codes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import NonFiniteError, Tensor


@dataclass(frozen=True)
class CodebookConfig:
    L: int = 2
    d: int = 12

    def __post_init__(self):
        if self.L < 2 or self.d < 0:
            raise ValueError(f"need L >= 2 and d >= 0, got L={self.L}, d={self.d}")
        if self.d * np.log2(self.L) >= 63:
            raise ValueError(f"codebook L^d = {self.L}^{self.d} does not fit in int64")

    @property
    def size(self) -> int:
        return self.L ** self.d

    @property
    def centre(self) -> float:
        return (self.L - 1) / 2.0


@dataclass(frozen=True)
class ConditionCode:
    digits: tuple[int, ...]
    index: int


def _sigmoid(y: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(y))
    return np.where(y >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def quantize(y, config: CodebookConfig) -> np.ndarray:
    """min(floor(L * sigmoid(y)), L - 1) per channel, as int64."""
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise NonFiniteError("quantize: non-finite encoder output")
    q = np.floor(config.L * _sigmoid(y))
    return np.minimum(q, config.L - 1).astype(np.int64)


def ste_quantize(y: Tensor, config: CodebookConfig) -> Tensor:
    """Quantized values forward, identity Jacobian backward.

    Written as ``(y - sg(y)) + sg(q)``: the same map as ``y + sg(q - y)``,
    but ``y - y`` is exactly zero in floating point so the forward value is
    bitwise ``q``.
    """
    q = quantize(y.data, config).astype(np.float64)
    return T.add(T.sub(y, T.stop_gradient(y)), T.stop_gradient(Tensor(q)))


def _powers(config: CodebookConfig) -> np.ndarray:
    return config.L ** np.arange(config.d, dtype=np.int64)


def code_index(digits, config: CodebookConfig) -> np.ndarray | int:
    """Little-endian base-L index: sum_i digits_i * L**i."""
    arr = np.asarray(digits, dtype=np.int64)
    if arr.shape[-1:] != (config.d,):
        raise ValueError(f"expected {config.d} digits, got shape {arr.shape}")
    if np.any(arr < 0) or np.any(arr >= config.L):
        raise ValueError(f"digit outside [0, {config.L - 1}]")
    idx = arr @ _powers(config)
    return int(idx) if arr.ndim == 1 else idx


def code_digits(index, config: CodebookConfig) -> np.ndarray:
    idx = np.asarray(index, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= config.size):
        raise ValueError(f"code index outside [0, {config.size})")
    return (idx[..., None] // _powers(config)) % config.L


def make_code(digits, config: CodebookConfig) -> ConditionCode:
    digits = tuple(int(v) for v in digits)
    return ConditionCode(digits, code_index(digits, config))


class EncoderNet(nn.Module):
    """Maps clean data to a length-d real vector.

    Vectors go through an MLP with two hidden layers; images ``(C, H, W)`` go
    through two conv blocks and a linear head.
    """

    def __init__(self, input_shape: tuple[int, ...], d: int, rng: np.random.Generator, *,
                 hidden: int = 16, channels: tuple[int, int] = (4, 8), zero_last: bool = False):
        self.input_shape = tuple(input_shape)
        self.d = d
        if len(self.input_shape) == 1:
            self.mlp = nn.MLP([self.input_shape[0], hidden, hidden, d], rng, zero_last=zero_last)
        elif len(self.input_shape) == 3:
            c, h, w = self.input_shape
            self.conv1 = nn.Conv2d(c, channels[0], 3, rng, pad=1)
            self.conv2 = nn.Conv2d(channels[0], channels[1], 3, rng, stride=2, pad=1)
            flat = channels[1] * ((h + 1) // 2) * ((w + 1) // 2)
            self.head = nn.Linear(flat, d, rng, zero=zero_last)
        else:
            raise ValueError(f"encoder input must be (D,) or (C, H, W), got {self.input_shape}")

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.shape[1:] != self.input_shape:
            raise T.ShapeError(f"encoder expects inputs shaped {self.input_shape}, got {x.shape[1:]}")
        if len(self.input_shape) == 1:
            return self.mlp(x)
        h = T.silu(self.conv1(x))
        h = T.silu(self.conv2(h))
        return self.head(T.reshape(h, (x.shape[0], -1)))


@dataclass
class Encoded:
    digits: np.ndarray   # (B, d) int64
    index: np.ndarray    # (B,) int64
    ste: Tensor          # (B, d) quantized values with straight-through gradient

    def codes(self) -> list[ConditionCode]:
        return [ConditionCode(tuple(int(v) for v in row), int(i)) for row, i in zip(self.digits, self.index)]


def encode(net: EncoderNet, x, config: CodebookConfig) -> Encoded:
    if net.d != config.d:
        raise ValueError(f"encoder emits {net.d} channels, codebook expects {config.d}")
    y = net(x)
    q = ste_quantize(y, config)
    digits = q.data.astype(np.int64)
    return Encoded(digits, np.asarray(code_index(digits, config)).reshape(-1), q)


def encode_indices(net: EncoderNet, x, config: CodebookConfig) -> np.ndarray:
    """Code indices only, without recording a graph."""
    with T.no_grad():
        return encode(net, x, config).index
