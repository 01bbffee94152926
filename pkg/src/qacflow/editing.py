"""Zero-shot editing: inpainting, super-resolution and colorization by conditional renoising.

Images are batches shaped ``(B, C, H, W)``. The mask ``omega`` lives in the
degraded domain: 1 marks entries to synthesize, 0 entries to preserve.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .denoiser import DenoiserNet, denoise_field
from .flows import FlowSpec
from .fsq import CodebookConfig, EncoderNet, encode_indices
from .samplers import TimeSchedule
from .tensor import NonFiniteError

OP_KINDS = ("mask", "downsample", "channel-average")


class EditError(RuntimeError):
    pass


@dataclass(frozen=True)
class DegradationOp:
    """Linear degradation A and its pseudo-inverse.

    ``downsample`` averages ``factor x factor`` blocks (factor a power of two,
    applied as repeated 2x2 means so that A(A+(y)) == y holds bitwise) and
    upsamples by repetition. ``channel-average`` averages channels and
    broadcasts back; exact round trips need a power-of-two channel count.
    """

    kind: str = "mask"
    factor: int = 2

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise ValueError(f"unknown degradation {self.kind!r}; expected one of {OP_KINDS}")
        if self.factor < 2 or self.factor & (self.factor - 1):
            raise ValueError("downsample factor must be a power of two >= 2")

    def degraded_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        b, c, h, w = _check4(shape)
        if self.kind == "downsample":
            if h % self.factor or w % self.factor:
                raise ValueError(f"image {h}x{w} is not divisible by factor {self.factor}")
            return (b, c, h // self.factor, w // self.factor)
        if self.kind == "channel-average":
            return (b, 1, h, w)
        return (b, c, h, w)


def _check4(shape) -> tuple[int, int, int, int]:
    if len(shape) != 4:
        raise ValueError(f"images must be shaped (B, C, H, W), got {tuple(shape)}")
    return tuple(shape)  # type: ignore[return-value]


def _block_mean2(x: np.ndarray) -> np.ndarray:
    a, b = x[..., 0::2, 0::2], x[..., 0::2, 1::2]
    c, d = x[..., 1::2, 0::2], x[..., 1::2, 1::2]
    return ((a + b) + (c + d)) * 0.25


def apply_degradation(op: DegradationOp, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    op.degraded_shape(x.shape)
    if op.kind == "mask":
        return x.copy()
    if op.kind == "downsample":
        f = op.factor
        while f > 1:
            x = _block_mean2(x)
            f //= 2
        return x
    return x.sum(axis=1, keepdims=True) / x.shape[1]


def pseudo_invert(op: DegradationOp, y: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Map a degraded tensor back to data space (``shape`` is the data-space shape)."""
    y = np.asarray(y, dtype=np.float64)
    expect = op.degraded_shape(tuple(shape))
    if y.shape != expect:
        raise ValueError(f"degraded tensor shaped {y.shape}, expected {expect}")
    if op.kind == "mask":
        return y.copy()
    if op.kind == "downsample":
        return np.repeat(np.repeat(y, op.factor, axis=2), op.factor, axis=3)
    return np.broadcast_to(y, tuple(shape)).copy()


def project(op: DegradationOp, x: np.ndarray, z: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """A+[(Az)(1 - omega) + (Ax) omega], selecting entries instead of blending."""
    keep = np.broadcast_to(omega, op.degraded_shape(z.shape)) == 0
    return pseudo_invert(op, np.where(keep, apply_degradation(op, z), apply_degradation(op, x)), z.shape)


def preserved_consistent(op: DegradationOp, x: np.ndarray, z: np.ndarray, omega: np.ndarray) -> bool:
    keep = np.broadcast_to(omega, op.degraded_shape(z.shape)) == 0
    return bool(np.array_equal(apply_degradation(op, x)[keep], apply_degradation(op, z)[keep]))


@dataclass
class EditTask:
    z: np.ndarray                 # reference images (B, C, H, W)
    op: DegradationOp
    omega: np.ndarray             # 0/1 mask in the degraded domain, broadcastable
    steps: int = 40
    seed: int = 0
    rho: float = 7.0

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        if self.z.ndim == 3:
            self.z = self.z[None]
        self.omega = np.asarray(self.omega, dtype=np.float64)
        if not np.all((self.omega == 0) | (self.omega == 1)):
            raise ValueError("mask entries must be 0 or 1")
        try:
            np.broadcast_to(self.omega, self.op.degraded_shape(self.z.shape))
        except ValueError as exc:
            raise ValueError(f"mask shaped {self.omega.shape} does not fit the degraded image: {exc}") from None
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    def times(self, flow: FlowSpec) -> np.ndarray:
        """Decreasing noise levels from t_max to the flow's floor."""
        if self.steps == 1:
            return np.array([flow.t_max])
        return TimeSchedule("polynomial", self.steps, self.rho, flow.t_floor, flow.t_max).times()


@dataclass
class EditResult:
    x: np.ndarray
    code_trace: np.ndarray        # (steps, B) code indices used at each step
    times: np.ndarray
    consistent: list[bool] = field(default_factory=list)

    def trace_changes(self) -> np.ndarray:
        """Per image: did the code change at least once along the run."""
        return np.any(self.code_trace != self.code_trace[:1], axis=0)


def zero_shot_edit(net: DenoiserNet, encoder: EncoderNet | None, codebook: CodebookConfig | None,
                   flow: FlowSpec, task: EditTask) -> EditResult:
    """Per step: re-encode the estimate, renoise to level t, denoise, project."""
    rng = np.random.default_rng(task.seed)
    op, z, omega = task.op, task.z, task.omega
    if net.conditional and (encoder is None or codebook is None):
        raise ValueError("a conditional model needs its encoder and codebook")
    times = task.times(flow)
    denoise = denoise_field(net, flow)
    x = project(op, np.zeros_like(z), z, omega)
    trace, consistent = [], []
    for i, t in enumerate(times):
        codes = encode_indices(encoder, x, codebook) if net.conditional else np.zeros(len(x), dtype=np.int64)
        trace.append(codes)
        noisy = x + float(flow.noise_scale(t)) * rng.standard_normal(x.shape)
        try:
            x = denoise(noisy, t, codes if net.conditional else None)
        except NonFiniteError as exc:
            raise EditError(f"non-finite state at step {i}: {exc}") from None
        if not np.all(np.isfinite(x)):
            raise EditError(f"non-finite state at step {i}")
        x = project(op, x, z, omega)
        consistent.append(preserved_consistent(op, x, z, omega))
    return EditResult(x, np.array(trace), times, consistent)


# --------------------------------------------------------------------------
# plain-text grids

def write_grid(path: str | Path, img: np.ndarray) -> None:
    """One row per image row; channels separated by a blank line."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    blocks = ["\n".join(" ".join(repr(float(v)) for v in row) for row in ch) for ch in img]
    Path(path).write_text("\n\n".join(blocks) + "\n")


def read_grid(path: str | Path) -> np.ndarray:
    """Inverse of :func:`write_grid`; returns ``(C, H, W)``."""
    text = Path(path).read_text().strip()
    chans = []
    for lineno_block in text.split("\n\n"):
        rows = [r.split() for r in lineno_block.strip().splitlines() if r.strip()]
        try:
            chans.append(np.array(rows, dtype=np.float64))
        except ValueError:
            raise ValueError(f"{path}: ragged or non-numeric grid") from None
    if len({c.shape for c in chans}) != 1 or chans[0].ndim != 2:
        raise ValueError(f"{path}: channels have inconsistent shapes")
    return np.stack(chans)


def half_mask(shape_hw: tuple[int, int], side: str = "right") -> np.ndarray:
    h, w = shape_hw
    m = np.zeros((h, w))
    if side == "right":
        m[:, w // 2:] = 1
    elif side == "left":
        m[:, :w // 2] = 1
    elif side == "bottom":
        m[h // 2:, :] = 1
    else:
        m[:h // 2, :] = 1
    return m


def random_box_mask(shape_hw: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    h, w = shape_hw
    m = np.zeros((h, w))
    bh, bw = int(rng.integers(2, h // 2 + 2)), int(rng.integers(2, w // 2 + 2))
    r, c = int(rng.integers(0, h - bh + 1)), int(rng.integers(0, w - bw + 1))
    m[r:r + bh, c:c + bw] = 1
    return m
