from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qacflow.flows import (FiniteDataset, FlowSpec, TimeRangeError, flow_velocity, interpolate,
                           load_points, mean_from_velocity, oracle_velocity,
                           oracle_velocity_conditional, posterior_mean, save_points,
                           velocity_from_mean)

FLOWS = {"rf": FlowSpec.rectified(), "edm": FlowSpec.edm(), "vp": FlowSpec.vp(), "ve": FlowSpec.ve()}


def brute_velocity(flow, pts, x_t, t, weights=None):
    """Direct summation of unnormalized Gaussian weights times per-point velocities."""
    a, s = float(flow.mean_scale(t)), float(flow.noise_scale(t))
    da, ds = float(flow.d_mean_scale(t)), float(flow.d_noise_scale(t))
    p = np.full(len(pts), 1.0 / len(pts)) if weights is None else weights / weights.sum()
    out = np.zeros_like(x_t)
    for b, x in enumerate(x_t):
        num, den = np.zeros_like(x), 0.0
        for i, xi in enumerate(pts):
            n_i = (x - a * xi) / s
            w = p[i] * np.exp(-0.5 * np.sum(n_i ** 2))
            num += w * (da * xi + ds * n_i)
            den += w
        out[b] = num / den
    return out


def test_rf_endpoints(rng):
    x0, n = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
    f = FLOWS["rf"]
    assert np.array_equal(interpolate(f, x0, n, 0.0), x0)
    assert np.array_equal(interpolate(f, x0, n, 1.0), n)


def test_edm_hand_example():
    out = interpolate(FLOWS["edm"], np.array([[1.0, 1.0]]), np.array([[2.0, -1.0]]), 0.5)
    np.testing.assert_array_equal(out, [[2.0, 0.5]])
    np.testing.assert_array_equal(flow_velocity(FLOWS["edm"], np.array([[1.0, 1.0]]),
                                                np.array([[2.0, -1.0]]), 7.0), [[2.0, -1.0]])


@pytest.mark.parametrize("t", [0.0, 0.3, 1.0])
def test_rf_velocity_constant(t):
    v = flow_velocity(FLOWS["rf"], np.array([[0.0]]), np.array([[3.0]]), t)
    np.testing.assert_array_equal(v, [[3.0]])


@pytest.mark.parametrize("name", list(FLOWS))
def test_endpoint_identities(name, rng):
    f = FLOWS[name]
    x0, n = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    np.testing.assert_allclose(interpolate(f, x0, n, f.t_min), x0, atol=1e-15)
    np.testing.assert_allclose(interpolate(f, x0, n, f.t_max),
                               f.mean_scale(f.t_max) * x0 + f.prior_std * n, atol=1e-12)
    if name == "vp":
        assert f.mean_scale(0.0) == 1.0 and abs(f.mean_scale(1.0)) < 1e-15


@pytest.mark.parametrize("name", list(FLOWS))
def test_velocity_matches_time_finite_difference(name, rng):
    f = FLOWS[name]
    x0, n = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    h = 1e-6 * f.t_max
    for t in np.linspace(f.t_max * 0.02, f.t_max * 0.98, 20):
        fd = (interpolate(f, x0, n, t + h) - interpolate(f, x0, n, t - h)) / (2 * h)
        assert np.max(np.abs(fd - flow_velocity(f, x0, n, t))) < 1e-6 * max(1.0, f.t_max ** 0.5)


def test_time_outside_interval_rejected():
    with pytest.raises(TimeRangeError):
        interpolate(FLOWS["rf"], np.zeros((1, 2)), np.zeros((1, 2)), 1.5)
    with pytest.raises(TimeRangeError):
        flow_velocity(FLOWS["ve"], np.zeros((1, 2)), np.zeros((1, 2)), 0.0)


def test_per_row_times(rng):
    f = FLOWS["rf"]
    x0, n = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    t = np.array([0.1, 0.5, 0.9])
    out = interpolate(f, x0, n, t)
    for i in range(3):
        np.testing.assert_array_equal(out[i], interpolate(f, x0[i:i + 1], n[i:i + 1], t[i])[0])


def test_invalid_flow_specs():
    with pytest.raises(ValueError):
        FlowSpec("nope")
    with pytest.raises(ValueError):
        FlowSpec("rf", 0.0, 2.0)
    with pytest.raises(ValueError):
        FlowSpec("edm", 1.0, 0.5)


@pytest.mark.parametrize("name", list(FLOWS))
def test_single_point_oracle_is_exact(name, rng):
    f = FLOWS[name]
    xs = np.array([[0.7, -1.2]])
    data = FiniteDataset(xs)
    t = 0.37 * f.t_max
    n = rng.standard_normal((5, 2))
    x_t = interpolate(f, np.repeat(xs, 5, axis=0), n, t)
    np.testing.assert_allclose(oracle_velocity(f, data, x_t, t),
                               flow_velocity(f, np.repeat(xs, 5, axis=0), n, t), atol=1e-10)


def test_two_point_symmetry():
    data = FiniteDataset(np.array([[-1.0, 0.0], [1.0, 0.0]]))
    v = oracle_velocity(FLOWS["rf"], data, np.zeros((1, 2)), 0.5)
    # equal posterior weights: mean 0 and v = x/t-type term only, which vanishes at x = 0
    np.testing.assert_allclose(v, [[0.0, 0.0]], atol=1e-15)


@pytest.mark.parametrize("name", list(FLOWS))
def test_ring_oracle_matches_direct_summation(name, rng):
    f = FLOWS[name]
    ang = 2 * np.pi * np.arange(8) / 8
    pts = 2 * np.stack([np.cos(ang), np.sin(ang)], 1)
    t = 0.5 * f.t_max
    x_t = f.mean_scale(t) * pts[rng.integers(0, 8, 16)] + f.noise_scale(t) * rng.standard_normal((16, 2))
    ref = brute_velocity(f, pts, x_t, t)
    got = oracle_velocity(f, FiniteDataset(pts), x_t, t)
    assert np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1e-12)) < 1e-10


def test_weighted_dataset_oracle(rng):
    f = FLOWS["rf"]
    pts = rng.standard_normal((6, 2))
    w = rng.uniform(0.1, 1.0, 6)
    x_t = rng.standard_normal((4, 2))
    np.testing.assert_allclose(oracle_velocity(f, FiniteDataset(pts, weights=w), x_t, 0.6),
                               brute_velocity(f, pts, x_t, 0.6, w), rtol=1e-10)


def test_conditional_oracle_partition(rng):
    f = FLOWS["rf"]
    pts = rng.standard_normal((16, 2))
    codes = rng.permutation(np.repeat(np.arange(4), 4))
    data = FiniteDataset(pts, codes)
    x_t = rng.standard_normal((8, 2))
    q = rng.integers(0, 4, 8)
    got = oracle_velocity_conditional(f, data, x_t, 0.4, q)
    for b in range(8):
        ref = brute_velocity(f, pts[codes == q[b]], x_t[b:b + 1], 0.4)
        assert np.max(np.abs(got[b] - ref[0]) / np.maximum(np.abs(ref[0]), 1e-12)) < 1e-10


def test_conditional_oracle_vacuous_and_singleton(rng):
    f = FLOWS["vp"]
    pts = rng.standard_normal((5, 2))
    x_t = rng.standard_normal((3, 2))
    one = FiniteDataset(pts, np.zeros(5))
    assert np.array_equal(oracle_velocity_conditional(f, one, x_t, 0.5, 0), oracle_velocity(f, one, x_t, 0.5))
    own = FiniteDataset(pts, np.arange(5))
    got = oracle_velocity_conditional(f, own, x_t, 0.5, np.array([2, 2, 4]))
    np.testing.assert_allclose(got[0], oracle_velocity(f, FiniteDataset(pts[2:3]), x_t[:1], 0.5)[0])


def test_conditional_oracle_missing_code():
    data = FiniteDataset(np.zeros((2, 2)), np.array([0, 1]))
    with pytest.raises(ValueError, match="code 7"):
        oracle_velocity_conditional(FLOWS["rf"], data, np.zeros((1, 2)), 0.5, 7)


def test_oracle_time_floor():
    data = FiniteDataset(np.zeros((2, 2)))
    with pytest.raises(TimeRangeError):
        oracle_velocity(FLOWS["edm"], data, np.zeros((1, 2)), 0.01)  # floor is 0.08 for t_max 80
    oracle_velocity(FLOWS["edm"], data, np.zeros((1, 2)), 0.08)


def test_oracle_stable_far_from_data():
    data = FiniteDataset(np.array([[0.0, 0.0], [1.0, 0.0]]))
    v = oracle_velocity(FLOWS["rf"], data, np.array([[500.0, 0.0]]), 0.01)
    assert np.all(np.isfinite(v))


@pytest.mark.parametrize("name", list(FLOWS))
def test_mean_velocity_roundtrip(name, rng):
    f = FLOWS[name]
    x, m = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
    t = 0.3 * f.t_max
    np.testing.assert_allclose(mean_from_velocity(f, x, velocity_from_mean(f, x, m, t), t), m, atol=1e-10)


def test_oracle_backward_simulation_approaches_data():
    from qacflow.samplers import euler_solve
    f = FLOWS["rf"]
    rng = np.random.default_rng(0)
    pts = np.array([[-2.0, 0.0], [2.0, 0.0], [0.0, 2.0], [0.0, -2.0]])
    data = FiniteDataset(pts)
    x1 = rng.standard_normal((64, 2))
    gaps = []
    for n in (2, 8, 64):
        grid = np.linspace(1.0, f.t_floor, n + 1)
        x = euler_solve(lambda x, t: oracle_velocity(f, data, x, t), grid, x1).final
        nearest = np.min(np.linalg.norm(x[:, None] - pts[None], axis=-1), axis=1)
        gaps.append(nearest.mean())
    assert gaps[-1] < gaps[0] and gaps[-1] < 1e-2


def test_points_file_roundtrip(tmp_path, rng):
    data = FiniteDataset(rng.standard_normal((5, 2, 2)), codes=np.arange(5))
    save_points(tmp_path / "p.txt", data)
    head = (tmp_path / "p.txt").read_text().splitlines()[0]
    assert head == "# dim=4 shape=2x2 codes=1 n=5"
    back = load_points(tmp_path / "p.txt")
    assert back.points.tobytes() == data.points.tobytes()
    assert np.array_equal(back.codes, data.codes)


def test_points_file_rejects_bad_rows(tmp_path):
    (tmp_path / "p.txt").write_text("# dim=2 shape=2 codes=0 n=2\n1,2\n3\n")
    with pytest.raises(ValueError, match=":3:"):
        load_points(tmp_path / "p.txt")


def test_dataset_validation():
    with pytest.raises(ValueError):
        FiniteDataset(np.zeros((0, 2)))
    with pytest.raises(ValueError):
        FiniteDataset(np.zeros((3, 2)), codes=np.zeros(2))


@given(st.floats(0.01, 0.99), st.integers(0, 2 ** 31 - 1))
def test_posterior_mean_in_convex_hull(t, seed):
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((6, 1))
    m = posterior_mean(FLOWS["rf"], FiniteDataset(pts), rng.standard_normal((3, 1)) * 3, t)
    assert np.all(m >= pts.min() - 1e-12) and np.all(m <= pts.max() + 1e-12)
