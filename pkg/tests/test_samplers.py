from __future__ import annotations

import math

import numpy as np
import pytest

from qacflow.denoiser import DenoiserNet, Preconditioning
from qacflow.flows import FiniteDataset, FlowSpec, oracle_velocity
from qacflow.fsq import CodebookConfig
from qacflow.samplers import (SolverConfig, SolverError, TimeSchedule, conditional_sample,
                              euler_solve, heun_solve, ipndm_solve, rk45_solve, sde_renoise_step,
                              solve)
from qacflow.training import SamplingWeights

from fields import halving_ratios, smooth_field, smooth_init, smooth_reference

GRIDS = [np.array([1.0, 0.0]), np.linspace(1.0, 0.0, 7), TimeSchedule(n=5).times()]


def const(c):
    return lambda x, t: np.broadcast_to(c, x.shape).copy()


def test_polynomial_schedule_formula():
    s = TimeSchedule("polynomial", 5, 7.0, 0.002, 80.0)
    t = s.times()
    i = np.arange(5) / 4
    ref = (80 ** (1 / 7) + i * (0.002 ** (1 / 7) - 80 ** (1 / 7))) ** 7
    np.testing.assert_allclose(t, ref, rtol=1e-14)
    assert t[0] == 80.0 and t[-1] == 0.002 and np.all(np.diff(t) < 0)


def test_schedule_validation():
    with pytest.raises(ValueError):
        TimeSchedule(n=1)
    with pytest.raises(ValueError):
        TimeSchedule(t_min=5.0, t_max=1.0)
    with pytest.raises(ValueError):
        euler_solve(const(1.0), np.array([0.0, 1.0]), np.zeros(2))


@pytest.mark.parametrize("grid", GRIDS, ids=["one-step", "uniform", "poly"])
def test_constant_field_exact_all_solvers(grid):
    c = np.array([[1.5, -0.25]])
    x0 = np.array([[0.1, 0.2]])
    expect = x0 + (grid[-1] - grid[0]) * c
    for rec in (euler_solve(const(c), grid, x0), heun_solve(const(c), grid, x0),
                heun_solve(const(c), grid, x0, final_corrector=True),
                *[ipndm_solve(const(c), grid, x0, order=k) for k in (1, 2, 3, 4)]):
        assert np.max(np.abs(rec.final - expect)) < 1e-12, rec.solver
    rk = rk45_solve(const(c), x0, grid[0], grid[-1])
    assert np.max(np.abs(rk.final - expect)) < 1e-12 and len(rk.times) == 2


def test_zero_field_keeps_state():
    x0 = np.array([[1.0, 2.0]])
    assert np.array_equal(euler_solve(const(0.0), np.linspace(1, 0, 5), x0).final, x0)


def test_single_point_oracle_one_euler_step():
    flow = FlowSpec.rectified()
    data = FiniteDataset(np.array([[0.4, -1.3]]))
    x1 = np.random.default_rng(0).standard_normal((6, 2))
    rec = euler_solve(lambda x, t: oracle_velocity(flow, data, x, t), np.array([1.0, 0.0]), x1)
    np.testing.assert_allclose(rec.final, np.tile([0.4, -1.3], (6, 1)), atol=1e-14)


def test_heun_integrates_linear_time_exactly():
    f = lambda x, t: np.full_like(x, t)
    grid = np.linspace(1.0, 0.0, 4)
    rec = heun_solve(f, grid, np.zeros((1, 1)), final_corrector=True)
    assert rec.final[0, 0] == pytest.approx(-0.5, abs=1e-15)


def test_euler_and_heun_orders():
    ratios, _ = halving_ratios(lambda g: euler_solve(smooth_field, g, smooth_init()).final)
    assert all(1.7 <= r <= 2.3 for r in ratios), ratios
    ratios, _ = halving_ratios(lambda g: heun_solve(smooth_field, g, smooth_init()).final)
    assert all(3.4 <= r <= 4.6 for r in ratios), ratios


def test_ipndm_beats_heun_at_equal_nfe():
    ref = smooth_reference()
    heun = heun_solve(smooth_field, np.linspace(1, 0, 9), smooth_init())  # 15 NFE
    ip = ipndm_solve(smooth_field, np.linspace(1, 0, 16), smooth_init(), order=4)  # 15 NFE
    assert heun.nfe == ip.nfe == 15
    assert np.max(np.abs(ip.final - ref)) < np.max(np.abs(heun.final - ref))


def test_ipndm_order_one_is_euler_bitwise():
    g = TimeSchedule(n=9, t_max=1.0, t_min=0.001).times()
    a = ipndm_solve(smooth_field, g, smooth_init(), order=1)
    b = euler_solve(smooth_field, g, smooth_init())
    for sa, sb in zip(a.states, b.states):
        assert sa.tobytes() == sb.tobytes()


def test_rk45_exponential():
    rec = rk45_solve(lambda x, t: -x, np.array([1.0]), 1.0, 0.0, rtol=1e-6, atol=1e-12)
    assert abs(rec.final[0] - math.e) < 10 * 1e-6 * math.e


def test_rk45_tolerance_sweep_monotone():
    ref = smooth_reference()
    errs = [np.max(np.abs(rk45_solve(smooth_field, smooth_init(), 1.0, 0.0, rtol=r, atol=r).final - ref))
            for r in (1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8)]
    assert all(b <= a for a, b in zip(errs, errs[1:])), errs


def test_rk45_underflow_reported():
    with pytest.raises(SolverError, match="underflow|exceeded"):
        rk45_solve(lambda x, t: 1.0 / (t - 0.5) ** 3 + 0 * x, np.zeros(1), 1.0, 0.0, rtol=1e-10, atol=1e-10)


def test_non_finite_state_reports_step():
    f = lambda x, t: np.full_like(x, np.inf) if t < 0.7 else x
    with pytest.raises(SolverError, match="step 2"):
        euler_solve(f, np.linspace(1, 0, 6), np.ones(1))


@pytest.mark.parametrize("kind,nfe,kw", [("euler", 4, {}), ("heun", 5, {}), ("heun", 6, {"final_corrector": True}),
                                         ("ipndm", 4, {}), ("ipndm", 4, {"afs": True})])
def test_nfe_accounting_exact(kind, nfe, kw):
    flow = FlowSpec.edm()
    cfg = SolverConfig.for_nfe(kind, nfe, **kw)
    calls = []

    def f(x, t):
        calls.append(t)
        return x / t

    rec = solve(f, flow, np.ones((2, 2)), cfg)
    assert rec.nfe == len(calls) == cfg.expected_nfe() == nfe


def test_rk45_nfe_counted():
    calls = []

    def f(x, t):
        calls.append(t)
        return np.sin(x) * t

    rec = rk45_solve(f, np.ones(2), 1.0, 0.0)
    assert rec.nfe == len(calls) and rec.nfe == 1 + 6 * (len(calls) - 1) // 6


def test_afs_first_step_uses_prior_direction():
    flow = FlowSpec.edm()
    g = TimeSchedule.for_flow(flow, 5).times()
    x = np.random.default_rng(0).standard_normal((3, 2)) * 80
    with_afs = ipndm_solve(lambda x, t: x / t, g, x, afs=True, flow=flow)
    without = ipndm_solve(lambda x, t: x / t, g, x, flow=flow)
    assert with_afs.nfe == without.nfe - 1
    np.testing.assert_allclose(with_afs.final, without.final, rtol=1e-10, atol=1e-14)
    with pytest.raises(ValueError):
        ipndm_solve(lambda x, t: x, g, x, afs=True)


def test_solvers_agree_with_rk45_at_large_nfe():
    ref = smooth_reference()
    g = lambda n: np.linspace(1.0, 0.0, n + 1)
    assert np.max(np.abs(euler_solve(smooth_field, g(200000), smooth_init()).final - ref)) < 1e-5
    assert np.max(np.abs(heun_solve(smooth_field, g(2000), smooth_init()).final - ref)) < 1e-5
    assert np.max(np.abs(ipndm_solve(smooth_field, g(2000), smooth_init()).final - ref)) < 1e-5


# conditional sampling -----------------------------------------------------

def _net(rng, d=1):
    return DenoiserNet((2,), rng, codebook=CodebookConfig(2, d), hidden=8, depth=1)


def test_conditional_sample_one_hot(rng):
    w = SamplingWeights.from_histogram([3, 3], 4)
    res = conditional_sample(_net(rng, 2), w, FlowSpec.rectified(), SolverConfig("euler", 2), 50, seed=1)
    assert np.all(res.codes == 3) and res.samples.shape == (50, 2)


def test_conditional_sample_binomial_split(rng):
    w = SamplingWeights.from_histogram([0, 1], 2)
    res = conditional_sample(_net(rng), w, FlowSpec.rectified(), SolverConfig("euler", 1), 10000, seed=2)
    k = int(np.sum(res.codes == 1))
    assert abs(k - 5000) < 3 * math.sqrt(10000 * 0.25)


def test_conditional_sample_deterministic_and_rejects_zero_weights(rng):
    net = _net(rng)
    w = SamplingWeights.from_histogram([0, 1, 1], 2)
    a = conditional_sample(net, w, FlowSpec.rectified(), SolverConfig("heun", 3), 20, seed=5)
    b = conditional_sample(net, w, FlowSpec.rectified(), SolverConfig("heun", 3), 20, seed=5)
    assert a.samples.tobytes() == b.samples.tobytes()
    with pytest.raises(ValueError):
        conditional_sample(net, SamplingWeights(2), FlowSpec.rectified(), SolverConfig(), 4, seed=0)


def test_renoise_step(rng):
    flow = FlowSpec.edm()
    net = DenoiserNet((2,), rng, parameterization="denoiser", precond=Preconditioning("identity"))
    x = rng.standard_normal((4, 2))
    # zero network with identity preconditioning is the exact denoiser of the one-point set {0}
    assert np.array_equal(sde_renoise_step(net, x, 5.0, None, np.random.default_rng(0), flow), np.zeros((4, 2)))
    edm = DenoiserNet((2,), rng, parameterization="denoiser")
    a = sde_renoise_step(edm, x, 1.0, None, np.random.default_rng(3), flow)
    b = sde_renoise_step(edm, x, 1.0, None, np.random.default_rng(3), flow)
    assert a.tobytes() == b.tobytes()
    near = sde_renoise_step(edm, x, flow.t_floor, None, np.random.default_rng(4), flow)
    np.testing.assert_allclose(near, x * edm.precond.c_skip(flow.t_floor), atol=5 * flow.t_floor)
