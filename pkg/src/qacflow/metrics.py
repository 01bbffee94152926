"""Exact 2-Wasserstein, trajectory curvature, per-time CFM loss and the one-step error bound."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .flows import ORACLE_FLOOR, FiniteDataset, FlowSpec, flow_velocity, interpolate
from .samplers import TrajectoryRecord, euler_solve

EXACT_LIMIT = 1024


def cost_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def wasserstein2(a: np.ndarray, b: np.ndarray) -> float:
    """Exact W2 between two equal-size empirical measures (uniform weights)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) != len(b):
        raise ValueError(f"exact W2 needs equal sizes, got {len(a)} and {len(b)}")
    if len(a) > EXACT_LIMIT:
        raise ValueError(f"exact W2 is limited to {EXACT_LIMIT} points, got {len(a)}")
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"dimension mismatch: {a.shape[1:]} vs {b.shape[1:]}")
    c = cost_matrix(a, b)
    rows, cols = linear_sum_assignment(c)
    # exactly rounded sum: independent of matching order, so W2(a, b) == W2(b, a) bitwise
    return math.sqrt(math.fsum(c[rows, cols].tolist()) / len(a))


def wasserstein2_stats(samples: Sequence[np.ndarray], reference: np.ndarray) -> tuple[float, float]:
    """Mean and standard error of W2 over several sample sets against one reference."""
    vals = np.array([wasserstein2(s, reference) for s in samples])
    se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return float(vals.mean()), se


# --------------------------------------------------------------------------
# curvature

@dataclass
class CurvatureReport:
    values: np.ndarray
    mean: float
    solver: str = ""
    nfe: int = 0


def curvature(records: TrajectoryRecord | Sequence[TrajectoryRecord],
              field: Callable[[np.ndarray, float], np.ndarray] | None = None) -> CurvatureReport:
    """Mean over interior grid points of ||v(Z_t, t) - chord||^2, per trajectory.

    ``chord = (Z_end - Z_start) / (t_end - t_start)``. Velocities come from the
    record; missing ones are evaluated with ``field``.
    """
    if isinstance(records, TrajectoryRecord):
        records = [records]
    values = []
    for rec in records:
        times = np.asarray(rec.times)
        if len(times) < 3:
            raise ValueError("curvature needs at least three grid points")
        span = times[-1] - times[0]
        if span == 0:
            raise ValueError("degenerate trajectory: start and end times coincide")
        z0, z1 = rec.states[0], rec.states[-1]
        chord = (z1 - z0) / span
        axes = tuple(range(1, z0.ndim))
        acc = np.zeros(len(z0))
        for j in range(1, len(times) - 1):
            v = rec.velocities[j] if j < len(rec.velocities) else None
            if v is None:
                if field is None:
                    raise ValueError(f"no velocity recorded at grid point {j} and no field given")
                v = field(rec.states[j], times[j])
            acc += np.sum((v - chord) ** 2, axis=axes)
        values.append(acc / (len(times) - 2))
    vals = np.concatenate(values)
    rec0 = records[0]
    return CurvatureReport(vals, float(vals.mean()), rec0.solver, rec0.nfe)


# --------------------------------------------------------------------------
# per-time loss profile

@dataclass
class LossProfile:
    times: np.ndarray
    l_cfm: np.ndarray          # [E ||dX/dt - v||^2]^(1/2) per time
    l_cfm_se: np.ndarray
    sq_mean: np.ndarray        # E ||dX/dt - v||^2 per time
    sq_se: np.ndarray
    integral: float            # trapezoid of density(t) * sq_mean
    integral_se: float
    quadrature_err: float


def l_cfm_profile(model, flow: FlowSpec, data: FiniteDataset, times, *, n_mc: int = 2000,
                  seed: int = 0, density: Callable[[np.ndarray], np.ndarray] | None = None,
                  conditional: bool | None = None) -> LossProfile:
    """MC estimate of l_CFM(t) on a time grid and its weighted time integral.

    ``density`` is the time weighting in the integral; by default uniform over
    the grid's span, so the integral is the average loss over that interval.
    """
    if n_mc < 1000:
        raise ValueError(f"l_cfm_profile needs at least 1000 MC samples per time, got {n_mc}")
    times = np.asarray(times, dtype=np.float64)
    use_codes = data.codes is not None if conditional is None else conditional
    rng = np.random.default_rng(seed)
    sq, sq_se = [], []
    for t in times:
        idx = data.sample_indices(rng, n_mc)
        x0 = data.points[idx]
        noise = rng.standard_normal(x0.shape)
        tt = np.full(n_mc, t)
        xt = interpolate(flow, x0, noise, tt)
        target = flow_velocity(flow, x0, noise, tt)
        v = model(xt, tt, data.codes[idx] if use_codes else None)
        e = np.sum((target - v) ** 2, axis=tuple(range(1, x0.ndim)))
        sq.append(e.mean())
        sq_se.append(e.std(ddof=1) / math.sqrt(n_mc))
    sq = np.array(sq)
    sq_se = np.array(sq_se)
    l = np.sqrt(sq)
    l_se = np.where(l > 0, sq_se / (2 * np.maximum(l, 1e-300)), np.sqrt(sq_se))
    if len(times) > 1:
        if density is None:
            dens = np.full(len(times), 1.0 / abs(times[-1] - times[0]))
        else:
            dens = np.asarray(density(times), dtype=np.float64)
        f = dens * sq
        integral = float(np.trapezoid(f, times)) if hasattr(np, "trapezoid") else float(np.trapz(f, times))
        integral = abs(integral)
        w = _trapezoid_weights(times) * dens
        integral_se = float(np.sqrt(np.sum((w * sq_se) ** 2)))
        quad = 0.0
        if len(times) >= 5 and len(times) % 2 == 1:
            coarse = abs(float(np.sum(_trapezoid_weights(times[::2]) * f[::2])))
            quad = abs(integral - coarse) / 3.0
    else:
        integral, integral_se, quad = float(sq[0]), float(sq_se[0]), 0.0
    return LossProfile(times, l, l_se, sq, sq_se, integral, integral_se, quad)


def _trapezoid_weights(times: np.ndarray) -> np.ndarray:
    h = np.abs(np.diff(times))
    w = np.zeros(len(times))
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w


# --------------------------------------------------------------------------
# one-step Wasserstein bound

@dataclass
class BoundCheckReport:
    t: float
    dt: float
    lhs: float                       # W(simulated one step, true X_{t-dt})
    middle: float                    # [E_Y W^2 per condition at t - dt]^(1/2)
    per_condition_w: dict[int, float]
    l_cfm: float
    l_cfm_se: float
    lipschitz: float
    rhs: float
    error: float
    valid: bool = True
    passed: bool | None = None
    note: str = ""
    conditions: list[int] = field(default_factory=list)


def _lipschitz_probe(step_map, pools: dict[int, np.ndarray], rng: np.random.Generator,
                     n_pairs: int) -> float:
    codes = list(pools)
    best = 0.0
    pick = rng.integers(0, len(codes), size=n_pairs)
    for ci, c in enumerate(codes):
        m = int(np.sum(pick == ci))
        if m == 0:
            continue
        pool = pools[c]
        flat = pool.reshape(len(pool), -1)
        scale = float(np.std(flat)) or 1.0
        x = pool[rng.integers(0, len(pool), size=m)]
        near = rng.random(m) < 0.5
        other = pool[rng.integers(0, len(pool), size=m)]
        local = x + 1e-3 * scale * rng.standard_normal(x.shape)
        xp = np.where(near.reshape((-1,) + (1,) * (x.ndim - 1)), local, other)
        dx = np.sqrt(np.sum((x - xp).reshape(m, -1) ** 2, axis=1))
        keep = dx > 1e-12
        if not np.any(keep):
            continue
        dy = np.sqrt(np.sum((step_map(x, c) - step_map(xp, c)).reshape(m, -1) ** 2, axis=1))
        best = max(best, float(np.max(dy[keep] / dx[keep])))
    return best


def check_theorem_bound(model, flow: FlowSpec, data: FiniteDataset, t: float, dt: float, *,
                        n_per_condition: int = 64, max_conditions: int = 8, seed: int = 0,
                        init: str = "simulate", sim_steps: int = 8, n_probe: int = 10_000,
                        n_mc: int = 2000) -> BoundCheckReport:
    """Estimate both sides of the one-Euler-step Wasserstein bound at (t, dt).

    ``model(x, t, codes)`` is the learned velocity. Conditions are drawn from
    the dataset's codes (all points share one condition when it has none) and
    weighted equally. ``init`` chooses the simulated X_t: ``simulate`` runs the
    model's Euler solver from the prior, ``exact`` draws fresh true samples and
    ``exact_paired`` reuses the very samples the truth is built from.
    """
    if n_per_condition < 32:
        raise ValueError("per-condition sample sizes must be >= 32")
    if not (0 < dt <= t <= flow.t_max) or t - dt < 0:
        raise ValueError(f"need 0 < dt <= t <= t_max, got t={t}, dt={dt}")
    rng = np.random.default_rng(seed)
    codes_all = data.codes if data.codes is not None else np.zeros(len(data), dtype=np.int64)
    uniq, counts = np.unique(codes_all, return_counts=True)
    k = min(max_conditions, len(uniq), EXACT_LIMIT // n_per_condition)
    chosen = rng.choice(uniq, size=k, replace=False, p=counts / counts.sum())
    conditional = data.codes is not None

    sim, truth_t, truth_next = {}, {}, {}
    for c in chosen.tolist():
        pts = data.points[codes_all == c]
        x0 = pts[rng.integers(0, len(pts), size=n_per_condition)]
        noise = rng.standard_normal(x0.shape)
        truth_t[c] = interpolate(flow, x0, noise, t)
        truth_next[c] = interpolate(flow, x0, noise, t - dt)
        cc = np.full(n_per_condition, c)
        if init == "exact_paired":
            sim[c] = truth_t[c].copy()
        elif init == "exact":
            x0b = pts[rng.integers(0, len(pts), size=n_per_condition)]
            sim[c] = interpolate(flow, x0b, rng.standard_normal(x0.shape), t)
        elif init == "simulate":
            x_init = flow.sample_prior(rng, x0.shape)
            if t >= flow.t_max:
                sim[c] = x_init
            else:
                grid = np.linspace(flow.t_max, t, sim_steps + 1)
                f = (lambda x, s, cc=cc: model(x, np.full(len(x), s), cc if conditional else None))
                sim[c] = euler_solve(f, grid, x_init).final
        else:
            raise ValueError(f"unknown init {init!r}")

    def step_map(x, c):
        cc = np.full(len(x), c) if conditional else None
        return x - dt * model(x, np.full(len(x), t), cc)

    report = BoundCheckReport(t, dt, math.nan, math.nan, {}, math.nan, math.nan, math.nan, math.nan,
                              math.nan, conditions=chosen.tolist())
    try:
        stepped = {c: step_map(sim[c], c) for c in sim}
        report.lhs = wasserstein2(np.concatenate(list(stepped.values())),
                                  np.concatenate([truth_next[c] for c in stepped]))
        report.middle = math.sqrt(np.mean([wasserstein2(stepped[c], truth_next[c]) ** 2 for c in stepped]))
        report.per_condition_w = {c: wasserstein2(sim[c], truth_t[c]) for c in sim}
        e_w2 = float(np.mean([w ** 2 for w in report.per_condition_w.values()]))

        mask = np.isin(codes_all, chosen)
        sub_counts = {c: int(np.sum(codes_all == c)) for c in chosen.tolist()}
        weights = np.array([1.0 / sub_counts[int(c)] for c in codes_all[mask]])
        sub = FiniteDataset(data.points[mask], codes_all[mask] if conditional else None, weights)
        prof = l_cfm_profile(model, flow, sub, [t], n_mc=n_mc, seed=int(rng.integers(2 ** 31)),
                             conditional=conditional)
        report.l_cfm = float(prof.l_cfm[0])
        report.l_cfm_se = float(prof.l_cfm_se[0])

        pools = {c: np.concatenate([sim[c], truth_t[c]]) for c in sim}
        report.lipschitz = _lipschitz_probe(step_map, pools, rng, n_probe)
        report.rhs = dt * report.l_cfm + report.lipschitz * math.sqrt(e_w2)
        report.error = dt * report.l_cfm_se
        vals = [report.lhs, report.rhs, report.error, report.lipschitz]
        if not all(np.isfinite(vals)):
            raise FloatingPointError("non-finite estimate")
    except (FloatingPointError, ValueError) as exc:
        report.valid = False
        report.note = f"estimation failed: {exc}"
        return report
    report.passed = bool(report.lhs <= report.rhs + 3.0 * report.error)
    if not report.passed:
        report.note = "violation (probe-based Lipschitz estimate is a lower bound)"
    return report


def oracle_time_floor(flow: FlowSpec) -> float:
    return ORACLE_FLOOR * flow.t_max
