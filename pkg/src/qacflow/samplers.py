"""Backward ODE solvers, time grids and the conditional sampling procedure.

All solvers integrate a numpy velocity field ``f(x, t)`` from ``t_max`` down to
``t_min`` and return a :class:`TrajectoryRecord`. NFE is counted by wrapping
the field, one evaluation per call on the whole batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .denoiser import DenoiserNet, denoise_field, velocity_field
from .flows import FlowSpec

Field = Callable[[np.ndarray, float], np.ndarray]

SOLVERS = ("euler", "heun", "rk45", "ipndm")


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class TimeSchedule:
    kind: str = "polynomial"   # polynomial | uniform
    n: int = 18
    rho: float = 7.0
    t_min: float = 0.002
    t_max: float = 80.0

    def __post_init__(self):
        if self.kind not in ("polynomial", "uniform"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.n < 2:
            raise ValueError("a schedule needs at least two grid points")
        if not 0 <= self.t_min < self.t_max:
            raise ValueError(f"need 0 <= t_min < t_max, got [{self.t_min}, {self.t_max}]")

    def times(self) -> np.ndarray:
        i = np.arange(self.n) / (self.n - 1)
        if self.kind == "uniform":
            t = self.t_max + i * (self.t_min - self.t_max)
        else:
            a, b = self.t_max ** (1 / self.rho), self.t_min ** (1 / self.rho)
            t = (a + i * (b - a)) ** self.rho
        t[0], t[-1] = self.t_max, self.t_min
        return t

    @classmethod
    def for_flow(cls, flow: FlowSpec, n: int, kind: str | None = None, rho: float = 7.0) -> "TimeSchedule":
        kind = kind or ("polynomial" if flow.family in ("edm", "ve") else "uniform")
        return cls(kind, n, rho, flow.t_floor, flow.t_max)


@dataclass
class TrajectoryRecord:
    times: np.ndarray
    states: list[np.ndarray]
    velocities: list[np.ndarray | None] = field(default_factory=list)
    nfe: int = 0
    solver: str = ""

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    @property
    def initial(self) -> np.ndarray:
        return self.states[0]


class CountingField:
    def __init__(self, f: Field):
        self.f = f
        self.calls = 0

    def __call__(self, x, t):
        self.calls += 1
        return self.f(x, t)


def _as_times(schedule) -> np.ndarray:
    t = schedule.times() if isinstance(schedule, TimeSchedule) else np.asarray(schedule, dtype=np.float64)
    if t.ndim != 1 or len(t) < 2 or not np.all(np.diff(t) < 0):
        raise ValueError("time grid must be strictly decreasing with at least two points")
    return t


def _check(x: np.ndarray, step: int) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise SolverError(f"non-finite state at step {step}")
    return x


def euler_solve(f: Field, schedule, x_init: np.ndarray) -> TrajectoryRecord:
    times = _as_times(schedule)
    cf = CountingField(f)
    x = np.asarray(x_init, dtype=np.float64)
    states, vels = [x], []
    for i in range(len(times) - 1):
        d = cf(x, times[i])
        x = _check(x + (times[i + 1] - times[i]) * d, i)
        states.append(x)
        vels.append(d)
    vels.append(None)
    return TrajectoryRecord(times, states, vels, cf.calls, "euler")


def heun_solve(f: Field, schedule, x_init: np.ndarray, *, final_corrector: bool = False) -> TrajectoryRecord:
    """Euler predictor plus trapezoidal corrector.

    The last interval is a plain Euler step unless ``final_corrector``, so a
    grid of N points costs 2(N - 1) - 1 evaluations by default.
    """
    times = _as_times(schedule)
    cf = CountingField(f)
    x = np.asarray(x_init, dtype=np.float64)
    states, vels = [x], []
    last = len(times) - 2
    for i in range(len(times) - 1):
        h = times[i + 1] - times[i]
        d = cf(x, times[i])
        x_pred = x + h * d
        if i < last or final_corrector:
            d2 = cf(x_pred, times[i + 1])
            x = x + h * (0.5 * d + 0.5 * d2)
        else:
            x = x_pred
        states.append(_check(x, i))
        vels.append(d)
    vels.append(None)
    return TrajectoryRecord(times, states, vels, cf.calls, "heun")


# Dormand-Prince 5(4) tableau
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_DP_E = _DP_B5 - _DP_B4


def rk45_solve(f: Field, x_init: np.ndarray, t_start: float, t_end: float, *,
               rtol: float = 1e-5, atol: float = 1e-5, max_steps: int = 100_000,
               h_init: float | None = None) -> TrajectoryRecord:
    """Adaptive Dormand-Prince integration from ``t_start`` to ``t_end`` (either direction).

    The first trial step spans the whole interval and is shrunk on rejection.
    """
    if rtol <= 0 or atol <= 0:
        raise ValueError("tolerances must be positive")
    cf = CountingField(f)
    x = np.asarray(x_init, dtype=np.float64)
    t = float(t_start)
    span = float(t_end) - t
    direction = np.sign(span)
    h = span if h_init is None else direction * abs(h_init)
    times, states, vels = [t], [x], []
    k1 = cf(x, t)
    steps = 0
    while direction * (t_end - t) > 0:
        if steps >= max_steps:
            raise SolverError(f"rk45: exceeded {max_steps} steps at t={t}")
        if direction * (t + h - t_end) > 0:
            h = t_end - t
        if abs(h) < 1e-14 * max(1.0, abs(t)):
            raise SolverError(f"rk45: step size underflow (h={h:.3e}) at t={t}")
        ks = [k1]
        for s in range(1, 7):
            xs = x + h * sum(a * k for a, k in zip(_DP_A[s], ks))
            ks.append(cf(xs, t + _DP_C[s] * h))
        x_new = xs  # stage 7 sits at the 5th-order solution
        err = h * sum(e * k for e, k in zip(_DP_E, ks) if e != 0.0)
        scale = atol + rtol * np.maximum(np.abs(x), np.abs(x_new))
        err_norm = float(np.sqrt(np.mean((err / scale) ** 2)))
        if err_norm <= 1.0:
            t_new = t_end if abs(t_end - (t + h)) < 1e-15 * max(1.0, abs(t_end)) else t + h
            vels.append(k1)
            t, x, k1 = t_new, _check(x_new, steps), ks[6]
            times.append(t)
            states.append(x)
            steps += 1
            factor = 5.0 if err_norm == 0 else min(5.0, max(0.2, 0.9 * err_norm ** -0.2))
        else:
            factor = max(0.2, 0.9 * err_norm ** -0.2)
        h *= factor
    vels.append(k1)
    return TrajectoryRecord(np.array(times), states, vels, cf.calls, "rk45")


_AB = {
    1: (1.0,),
    2: (3 / 2, -1 / 2),
    3: (23 / 12, -16 / 12, 5 / 12),
    4: (55 / 24, -59 / 24, 37 / 24, -9 / 24),
}


def ipndm_solve(f: Field, schedule, x_init: np.ndarray, *, order: int = 4, afs: bool = False,
                flow: FlowSpec | None = None) -> TrajectoryRecord:
    """Improved pseudo-numerical multistep (Adams-Bashforth on past velocities).

    Step ``i`` uses order ``min(order, i + 1)``. With ``afs`` the first velocity
    is the analytic prior direction ``flow.prior_velocity`` and costs no NFE.
    """
    if order not in _AB:
        raise ValueError("iPNDM order must be 1, 2, 3 or 4")
    if afs and flow is None:
        raise ValueError("analytical first step needs the flow")
    times = _as_times(schedule)
    cf = CountingField(f)
    x = np.asarray(x_init, dtype=np.float64)
    states, vels, history = [x], [], []
    for i in range(len(times) - 1):
        d = flow.prior_velocity(x, times[i]) if (afs and i == 0) else cf(x, times[i])
        history.append(d)
        k = min(order, len(history))
        if k == 1:
            x = x + (times[i + 1] - times[i]) * d
        else:
            coef = _AB[k]
            slope = sum(c * history[-1 - j] for j, c in enumerate(coef))
            x = x + (times[i + 1] - times[i]) * slope
        history = history[-(order - 1):] if order > 1 else []
        states.append(_check(x, i))
        vels.append(d)
    vels.append(None)
    return TrajectoryRecord(times, states, vels, cf.calls, "ipndm")


# --------------------------------------------------------------------------
# configured solves

@dataclass(frozen=True)
class SolverConfig:
    kind: str = "euler"
    steps: int = 4                 # grid intervals (ignored by rk45)
    schedule: str | None = None    # polynomial | uniform; default per flow
    rho: float = 7.0
    order: int = 4
    afs: bool = False
    final_corrector: bool = False
    rtol: float = 1e-5
    atol: float = 1e-5

    def __post_init__(self):
        if self.kind not in SOLVERS:
            raise ValueError(f"unknown solver {self.kind!r}; expected one of {SOLVERS}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    @classmethod
    def for_nfe(cls, kind: str, nfe: int, **kw) -> "SolverConfig":
        """Grid size giving ``nfe`` evaluations (default Heun: even NFE rounds down to odd)."""
        if kind == "euler":
            steps = nfe
        elif kind == "heun":
            steps = (nfe + 1) // 2 if not kw.get("final_corrector") else max(1, nfe // 2)
        elif kind == "ipndm":
            steps = nfe + (1 if kw.get("afs") else 0)
        else:
            steps = 1
        return cls(kind=kind, steps=max(1, steps), **kw)

    def expected_nfe(self) -> int | None:
        n = self.steps
        if self.kind == "euler":
            return n
        if self.kind == "heun":
            return 2 * n if self.final_corrector else 2 * n - 1
        if self.kind == "ipndm":
            return n - 1 if self.afs else n
        return None

    def schedule_for(self, flow: FlowSpec) -> TimeSchedule:
        return TimeSchedule.for_flow(flow, self.steps + 1, self.schedule, self.rho)


def solve(f: Field, flow: FlowSpec, x_init: np.ndarray, config: SolverConfig) -> TrajectoryRecord:
    if config.kind == "rk45":
        return rk45_solve(f, x_init, flow.t_max, flow.t_floor, rtol=config.rtol, atol=config.atol)
    sched = config.schedule_for(flow)
    if config.kind == "euler":
        return euler_solve(f, sched, x_init)
    if config.kind == "heun":
        return heun_solve(f, sched, x_init, final_corrector=config.final_corrector)
    return ipndm_solve(f, sched, x_init, order=config.order, afs=config.afs, flow=flow)


@dataclass
class SampleResult:
    samples: np.ndarray
    codes: np.ndarray
    record: TrajectoryRecord
    seed: int


def conditional_sample(net: DenoiserNet, weights, flow: FlowSpec, config: SolverConfig,
                       count: int, seed: int) -> SampleResult:
    """Draw codes from the sampling weights, draw prior noise, solve backward.

    The code of each sample is held fixed along its whole trajectory.
    """
    rng = np.random.default_rng(seed)
    if net.conditional:
        codes = weights.sample(rng, count)
    else:
        codes = np.zeros(count, dtype=np.int64)
    x_init = flow.sample_prior(rng, (count,) + net.data_shape)
    f = velocity_field(net, flow, codes if net.conditional else None)
    rec = solve(f, flow, x_init, config)
    return SampleResult(rec.final, codes, rec, seed)


def sde_renoise_step(net: DenoiserNet, x: np.ndarray, t: float, code, rng: np.random.Generator,
                     flow: FlowSpec | None = None) -> np.ndarray:
    """x' = D(x + s(t) * eps, t, code): perturb to noise level t, then denoise."""
    scale = t if flow is None else float(flow.noise_scale(t))
    noisy = x + scale * rng.standard_normal(x.shape)
    return denoise_field(net, flow)(noisy, t, code)
