"""Deterministic toy datasets: Gaussian rings, checkerboard, two moons and tiny procedural images."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .flows import FiniteDataset

KINDS = ("gaussian-ring", "checkerboard", "two-moons", "tiny-shapes")
SHAPES = ("square", "disk", "cross", "hbar", "vbar", "triangle")


@dataclass(frozen=True)
class ToySpec:
    kind: str = "gaussian-ring"
    n: int = 1024
    seed: int = 0
    k: int = 8              # ring modes
    radius: float = 2.0
    std: float = 0.1        # ring mode std / moons noise
    size: int = 8           # tiny-shapes side length
    channels: int = 1       # tiny-shapes channels

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}; expected one of {KINDS}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.kind == "gaussian-ring" and (self.k < 1 or self.std < 0 or self.radius < 0):
            raise ValueError("gaussian-ring needs k >= 1, radius >= 0, std >= 0")
        if self.kind == "tiny-shapes" and (self.size < 4 or self.channels < 1):
            raise ValueError("tiny-shapes needs size >= 4 and channels >= 1")


def ring_centres(k: int, radius: float) -> np.ndarray:
    ang = 2 * np.pi * np.arange(k) / k
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def ring_modes(points: np.ndarray, k: int) -> np.ndarray:
    """Index of the nearest ring mode, by angle."""
    ang = np.arctan2(points[:, 1], points[:, 0])
    return np.round(ang / (2 * np.pi / k)).astype(np.int64) % k


def _ring(spec: ToySpec, rng: np.random.Generator) -> np.ndarray:
    modes = rng.integers(0, spec.k, size=spec.n)
    return ring_centres(spec.k, spec.radius)[modes] + spec.std * rng.standard_normal((spec.n, 2))


def _checkerboard(spec: ToySpec, rng: np.random.Generator) -> np.ndarray:
    # 4x4 board on [-2, 2]^2, points on the "black" squares only
    x = rng.uniform(-2, 2, size=spec.n)
    y = rng.uniform(0, 1, size=spec.n) - 2 * rng.integers(0, 2, size=spec.n) + np.floor(x) % 2
    return np.stack([x, y], axis=1)


def _moons(spec: ToySpec, rng: np.random.Generator) -> np.ndarray:
    upper = rng.random(spec.n) < 0.5
    theta = rng.uniform(0, np.pi, size=spec.n)
    x = np.where(upper, np.cos(theta), 1 - np.cos(theta))
    y = np.where(upper, np.sin(theta), 0.5 - np.sin(theta))
    pts = np.stack([x - 0.5, y - 0.25], axis=1) * 1.5
    return pts + spec.std * rng.standard_normal(pts.shape)


def draw_shape(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Binary ``size x size`` mask of one randomly placed shape."""
    yy, xx = np.mgrid[0:size, 0:size]
    s = int(rng.integers(size // 3, size // 2 + 2))
    r0 = int(rng.integers(0, size - s + 1))
    c0 = int(rng.integers(0, size - s + 1))
    box = (yy >= r0) & (yy < r0 + s) & (xx >= c0) & (xx < c0 + s)
    cy, cx = r0 + (s - 1) / 2, c0 + (s - 1) / 2
    if kind == "square":
        return box
    if kind == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= (s / 2) ** 2
    if kind == "cross":
        return box & ((np.abs(yy - cy) < 1) | (np.abs(xx - cx) < 1))
    if kind == "hbar":
        return box & (np.abs(yy - cy) < 1)
    if kind == "vbar":
        return box & (np.abs(xx - cx) < 1)
    if kind == "triangle":
        return box & ((xx - c0) <= (yy - r0))
    raise ValueError(f"unknown shape {kind!r}")


def _shapes(spec: ToySpec, rng: np.random.Generator) -> np.ndarray:
    out = np.empty((spec.n, spec.channels, spec.size, spec.size))
    for i in range(spec.n):
        mask = draw_shape(SHAPES[int(rng.integers(len(SHAPES)))], spec.size, rng)
        if spec.channels == 1:
            colour = np.array([1.0])
        else:
            colour = rng.choice([-0.5, 0.0, 0.5, 1.0], size=spec.channels)
        out[i] = np.where(mask[None], colour[:, None, None], -1.0)
    return out


def generate(spec: ToySpec) -> FiniteDataset:
    """Deterministic dataset for ``spec`` (same spec, same bits)."""
    rng = np.random.default_rng([spec.seed, 17])
    maker = {"gaussian-ring": _ring, "checkerboard": _checkerboard,
             "two-moons": _moons, "tiny-shapes": _shapes}[spec.kind]
    return FiniteDataset(maker(spec, rng), meta={"kind": spec.kind, "seed": spec.seed})


def eight_ring(n: int = 1024, seed: int = 0) -> FiniteDataset:
    return generate(ToySpec("gaussian-ring", n, seed, k=8, radius=2.0, std=0.1))


def mode_fraction_bounds(n: int, k: int, z: float = 3.0) -> tuple[float, float]:
    p = 1.0 / k
    sigma = math.sqrt(p * (1 - p) / n)
    return p - z * sigma, p + z * sigma
