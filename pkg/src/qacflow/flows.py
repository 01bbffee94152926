"""Forward flows and exact posterior-velocity oracles over finite datasets.

Every family here has the form ``X_t = a(t) X_0 + s(t) N`` with ``N`` standard
normal, so ``X_t | X_0`` is Gaussian and ``E[dX_t/dt | X_t]`` can be computed
exactly by enumerating a finite support.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FAMILIES = ("vp", "ve", "edm", "rf")


class TimeRangeError(ValueError):
    pass


@dataclass(frozen=True)
class FlowSpec:
    """One forward-flow family.

    ``t_min``/``t_max`` bound the interpolant; ``t_floor`` is the smallest time
    solvers integrate down to (oracles refuse anything below
    ``ORACLE_FLOOR * t_max``).
    """

    family: str
    t_min: float = 0.0
    t_max: float = 1.0
    t_floor: float = 1e-3
    sigma_data: float = 0.5

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown flow family {self.family!r}; expected one of {FAMILIES}")
        if not 0.0 <= self.t_min < self.t_max:
            raise ValueError(f"need 0 <= t_min < t_max, got [{self.t_min}, {self.t_max}]")
        if self.family in ("vp", "rf") and (self.t_min, self.t_max) != (0.0, 1.0):
            raise ValueError(f"{self.family} flow is defined on [0, 1]")

    @classmethod
    def rectified(cls) -> "FlowSpec":
        return cls("rf", 0.0, 1.0, t_floor=1e-3)

    @classmethod
    def edm(cls, t_max: float = 80.0, sigma_data: float = 0.5) -> "FlowSpec":
        return cls("edm", 0.0, t_max, t_floor=0.002, sigma_data=sigma_data)

    @classmethod
    def vp(cls) -> "FlowSpec":
        return cls("vp", 0.0, 1.0, t_floor=1e-3)

    @classmethod
    def ve(cls, t_max: float = 100.0) -> "FlowSpec":
        return cls("ve", 0.0, t_max, t_floor=1e-3 * t_max)

    @property
    def is_linear(self) -> bool:
        return self.family in ("edm", "rf")

    # schedule pieces: X_t = mean_scale(t) * X_0 + noise_scale(t) * N
    def mean_scale(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.family == "vp":
            return np.cos(0.5 * math.pi * t)
        if self.family == "rf":
            return 1.0 - t
        return np.ones_like(t)

    def noise_scale(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.family == "vp":
            return np.sin(0.5 * math.pi * t)
        if self.family == "ve":
            return np.sqrt(t)
        return t.copy()

    def d_mean_scale(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.family == "vp":
            return -0.5 * math.pi * np.sin(0.5 * math.pi * t)
        if self.family == "rf":
            return -np.ones_like(t)
        return np.zeros_like(t)

    def d_noise_scale(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.family == "vp":
            return 0.5 * math.pi * np.cos(0.5 * math.pi * t)
        if self.family == "ve":
            if np.any(t <= 0):
                raise TimeRangeError("VE velocity is singular at t = 0")
            return 0.5 / np.sqrt(t)
        return np.ones_like(t)

    @property
    def prior_std(self) -> float:
        """Std of the Gaussian the sampler starts from, ``N(0, s(t_max)^2 I)``."""
        return float(self.noise_scale(self.t_max))

    def sample_prior(self, rng: np.random.Generator, shape) -> np.ndarray:
        return self.prior_std * rng.standard_normal(shape)

    def check_time(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < self.t_min) or np.any(t > self.t_max) or not np.all(np.isfinite(t)):
            raise TimeRangeError(f"time outside [{self.t_min}, {self.t_max}] for {self.family} flow")
        return t

    def prior_velocity(self, x: np.ndarray, t) -> np.ndarray:
        """Exact velocity when the data distribution is a point mass at the origin."""
        t = _rows(self.check_time(t), x)
        return x * (self.d_noise_scale(t) / self.noise_scale(t))


def _rows(t: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Shape a scalar or per-row time so it broadcasts against ``x``."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return t
    return t.reshape((-1,) + (1,) * (x.ndim - 1))


def interpolate(flow: FlowSpec, x0: np.ndarray, noise: np.ndarray, t) -> np.ndarray:
    t = _rows(flow.check_time(t), x0)
    return flow.mean_scale(t) * x0 + flow.noise_scale(t) * noise


def flow_velocity(flow: FlowSpec, x0: np.ndarray, noise: np.ndarray, t) -> np.ndarray:
    t = _rows(flow.check_time(t), x0)
    return flow.d_mean_scale(t) * x0 + flow.d_noise_scale(t) * noise


# --------------------------------------------------------------------------
# finite datasets

@dataclass
class FiniteDataset:
    """Empirical data support, optionally with one condition code per point."""

    points: np.ndarray
    codes: np.ndarray | None = None
    weights: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim < 2 or len(self.points) == 0:
            raise ValueError("dataset must hold at least one point, shaped (N, ...)")
        if self.codes is not None:
            self.codes = np.asarray(self.codes, dtype=np.int64).reshape(-1)
            if len(self.codes) != len(self.points):
                raise ValueError("one code per point required")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
            if len(w) != len(self.points) or np.any(w < 0) or w.sum() <= 0:
                raise ValueError("weights must be nonnegative, one per point, not all zero")
            self.weights = w / w.sum()

    def __len__(self) -> int:
        return len(self.points)

    @property
    def point_shape(self) -> tuple[int, ...]:
        return self.points.shape[1:]

    @property
    def dim(self) -> int:
        return int(np.prod(self.point_shape))

    def probabilities(self) -> np.ndarray:
        if self.weights is None:
            return np.full(len(self), 1.0 / len(self))
        return self.weights

    def with_codes(self, codes) -> "FiniteDataset":
        return FiniteDataset(self.points, codes, self.weights, dict(self.meta))

    def subset(self, mask) -> "FiniteDataset":
        mask = np.asarray(mask)
        codes = None if self.codes is None else self.codes[mask]
        weights = None if self.weights is None else self.weights[mask]
        return FiniteDataset(self.points[mask], codes, weights, dict(self.meta))

    def sample_indices(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.weights is None:
            return rng.integers(0, len(self), size=n)
        return rng.choice(len(self), size=n, p=self.weights)


def save_points(path: str | Path, data: FiniteDataset) -> None:
    """Write ``# dim=D shape=AxB codes=0|1 n=N`` then one comma-separated row per point."""
    flat = data.points.reshape(len(data), -1)
    has_codes = data.codes is not None
    shape = "x".join(str(s) for s in data.point_shape)
    lines = [f"# dim={flat.shape[1]} shape={shape} codes={int(has_codes)} n={len(data)}"]
    for i, row in enumerate(flat):
        cells = [repr(float(v)) for v in row]
        if has_codes:
            cells.append(str(int(data.codes[i])))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def load_points(path: str | Path) -> FiniteDataset:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("#"):
        raise ValueError(f"{path}: missing '# dim=...' header line")
    header = dict(tok.split("=", 1) for tok in text[0][1:].split())
    dim = int(header["dim"])
    has_codes = header.get("codes", "0") == "1"
    shape = tuple(int(s) for s in header.get("shape", str(dim)).split("x"))
    rows, codes = [], []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != dim + has_codes:
            raise ValueError(f"{path}:{lineno}: expected {dim + has_codes} columns, got {len(cells)}")
        rows.append([float(c) for c in cells[:dim]])
        if has_codes:
            codes.append(int(cells[dim]))
    pts = np.asarray(rows, dtype=np.float64).reshape((-1,) + shape)
    return FiniteDataset(pts, np.asarray(codes) if has_codes else None)


# --------------------------------------------------------------------------
# oracles

ORACLE_FLOOR = 1e-3
_CHUNK_ELEMS = 4_000_000


def _oracle_times(flow: FlowSpec, t, n: int) -> np.ndarray:
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).copy()
    floor = ORACLE_FLOOR * flow.t_max
    if np.any(t < floor) or np.any(t > flow.t_max):
        raise TimeRangeError(f"oracle needs t in [{floor}, {flow.t_max}] "
                             f"(posterior degenerates as t -> 0)")
    return t


def posterior_mean(flow: FlowSpec, data: FiniteDataset, x_t: np.ndarray, t,
                   codes=None) -> np.ndarray:
    """E[X_0 | X_t = x_t] (optionally also conditioning on the code) by enumeration."""
    x = np.asarray(x_t, dtype=np.float64)
    n = len(x)
    xf = x.reshape(n, -1)
    pts = data.points.reshape(len(data), -1)
    t = _oracle_times(flow, t, n)
    a = flow.mean_scale(t)
    s = flow.noise_scale(t)
    logp = np.log(np.maximum(data.probabilities(), 1e-300))
    if codes is not None:
        if data.codes is None:
            raise ValueError("conditional oracle needs a dataset with codes")
        codes = np.broadcast_to(np.asarray(codes, dtype=np.int64), (n,))
        present = set(np.unique(data.codes).tolist())
        missing = [int(c) for c in np.unique(codes) if int(c) not in present]
        if missing:
            raise ValueError(f"no dataset point carries code {missing[0]}")
    out = np.empty_like(xf)
    step = max(1, _CHUNK_ELEMS // (len(pts) * xf.shape[1]))
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        diff = xf[lo:hi, None, :] - a[lo:hi, None, None] * pts[None, :, :]
        logw = logp[None, :] - 0.5 * np.einsum("bnd,bnd->bn", diff, diff) / (s[lo:hi, None] ** 2)
        if codes is not None:
            logw = np.where(data.codes[None, :] == codes[lo:hi, None], logw, -np.inf)
        logw -= logw.max(axis=1, keepdims=True)
        w = np.exp(logw)
        w /= w.sum(axis=1, keepdims=True)
        out[lo:hi] = w @ pts
    return out.reshape(x.shape)


def velocity_from_mean(flow: FlowSpec, x_t: np.ndarray, x0_hat: np.ndarray, t) -> np.ndarray:
    """Velocity implied by a clean-data estimate: a' x0 + s' (x_t - a x0) / s."""
    t = _rows(np.asarray(t, dtype=np.float64), x_t)
    ratio = flow.d_noise_scale(t) / flow.noise_scale(t)
    return ratio * x_t + (flow.d_mean_scale(t) - flow.mean_scale(t) * ratio) * x0_hat


def mean_from_velocity(flow: FlowSpec, x_t: np.ndarray, v: np.ndarray, t) -> np.ndarray:
    """Inverse of :func:`velocity_from_mean` (defined wherever a' s - a s' != 0)."""
    t = _rows(np.asarray(t, dtype=np.float64), x_t)
    ratio = flow.d_noise_scale(t) / flow.noise_scale(t)
    return (v - ratio * x_t) / (flow.d_mean_scale(t) - flow.mean_scale(t) * ratio)


def oracle_velocity(flow: FlowSpec, data: FiniteDataset, x_t: np.ndarray, t) -> np.ndarray:
    """Exact E[dX_t/dt | X_t = x_t] for the empirical data distribution."""
    m = posterior_mean(flow, data, x_t, t)
    return velocity_from_mean(flow, np.asarray(x_t, dtype=np.float64), m, _oracle_times(flow, t, len(x_t)))


def oracle_velocity_conditional(flow: FlowSpec, data: FiniteDataset, x_t: np.ndarray, t,
                                code) -> np.ndarray:
    """As :func:`oracle_velocity`, restricting the posterior to points carrying ``code``."""
    m = posterior_mean(flow, data, x_t, t, codes=code)
    return velocity_from_mean(flow, np.asarray(x_t, dtype=np.float64), m, _oracle_times(flow, t, len(x_t)))
