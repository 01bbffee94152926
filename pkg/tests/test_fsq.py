from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qacflow import tensor as T
from qacflow.denoiser import DenoiserNet
from qacflow.fsq import (CodebookConfig, EncoderNet, code_digits, code_index, encode,
                         make_code, quantize, ste_quantize)
from qacflow.tensor import NonFiniteError, Tensor


def test_quantize_examples():
    assert quantize([0.0], CodebookConfig(2, 1))[0] == 1
    assert quantize([-1.0], CodebookConfig(2, 1))[0] == 0
    assert quantize([1e308], CodebookConfig(8, 1))[0] == 7
    assert quantize([-1e308], CodebookConfig(8, 1))[0] == 0


def test_quantize_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        quantize([np.nan], CodebookConfig(2, 1))


def test_ste_forward_example():
    out = ste_quantize(Tensor([[0.0, -1.0]]), CodebookConfig(2, 2)).data
    np.testing.assert_array_equal(out, [[1.0, 0.0]])


def test_ste_sum_gradient_is_ones(rng):
    y = Tensor(rng.standard_normal((5, 3)) * 4, requires_grad=True)
    T.sum(ste_quantize(y, CodebookConfig(4, 3))).backward()
    assert np.array_equal(y.grad, np.ones((5, 3)))


def test_ste_squared_error_gradient(rng):
    cfg = CodebookConfig(3, 4)
    y0 = rng.standard_normal((2, 4))
    target = rng.standard_normal((2, 4))
    y = Tensor(y0, requires_grad=True)
    T.sum(T.square(T.sub(ste_quantize(y, cfg), Tensor(target)))).backward()
    np.testing.assert_allclose(y.grad, 2 * (quantize(y0, cfg) - target), rtol=0, atol=1e-15)


def test_code_index_examples():
    assert code_index([0] * 12, CodebookConfig(2, 12)) == 0
    assert code_index([1] * 12, CodebookConfig(2, 12)) == 4095
    cfg = CodebookConfig(4, 3)
    assert code_index([3, 0, 2], cfg) == 35
    assert code_digits(35, cfg).tolist() == [3, 0, 2]
    assert make_code([3, 0, 2], cfg).index == 35


def test_code_range_errors():
    cfg = CodebookConfig(2, 3)
    with pytest.raises(ValueError):
        code_index([2, 0, 0], cfg)
    with pytest.raises(ValueError):
        code_index([0, 0], cfg)
    with pytest.raises(ValueError):
        code_digits(8, cfg)
    with pytest.raises(ValueError):
        CodebookConfig(1, 3)


def test_reference_codebook_sizes_representable():
    assert CodebookConfig(2, 12).size == 4096
    assert CodebookConfig(2, 20).size == 2 ** 20
    with pytest.raises(ValueError):
        CodebookConfig(2, 64)


@pytest.mark.parametrize("L,d", [(2, 12), (4, 4), (3, 5), (16, 4)])
def test_exhaustive_bijection(L, d):
    cfg = CodebookConfig(L, d)
    idx = np.arange(cfg.size)
    digits = code_digits(idx, cfg)
    assert np.array_equal(code_index(digits, cfg), idx)
    if cfg.size <= 256:
        assert [tuple(r) for r in digits] == [t[::-1] for t in itertools.product(range(L), repeat=d)]


@given(st.integers(2, 9), st.integers(1, 19), st.data())
def test_sampled_bijection(L, d, data):
    cfg = CodebookConfig(L, min(d, int(62 / np.log2(L))))
    i = data.draw(st.integers(0, cfg.size - 1))
    assert code_index(code_digits(i, cfg), cfg) == i


@given(arrays(np.float64, 8, elements=st.floats(-30, 30)), st.floats(0, 5), st.integers(2, 8))
def test_quantize_monotone(y, bump, L):
    cfg = CodebookConfig(L, 8)
    assert np.all(quantize(y + bump, cfg) >= quantize(y, cfg))


@given(arrays(np.float64, (3, 4), elements=st.floats(-1e3, 1e3)), st.integers(2, 8))
def test_ste_forward_bitwise_property(y, L):
    cfg = CodebookConfig(L, 4)
    out = ste_quantize(Tensor(y), cfg).data
    assert out.tobytes() == quantize(y, cfg).astype(np.float64).tobytes()


def test_zero_initialized_encoder_emits_centre_code(rng):
    cfg = CodebookConfig(2, 6)
    enc = EncoderNet((2,), 6, rng, zero_last=True)
    res = encode(enc, rng.standard_normal((10, 2)), cfg)
    assert np.all(res.digits == 1) and len(set(res.index.tolist())) == 1


def test_encode_deterministic_and_shape_checked(rng):
    cfg = CodebookConfig(2, 4)
    enc = EncoderNet((2,), 4, rng)
    x = rng.standard_normal((6, 2))
    a, b = encode(enc, x, cfg), encode(enc, x.copy(), cfg)
    assert np.array_equal(a.index, b.index)
    assert np.array_equal(a.digits, quantize(enc(x).data, cfg))
    with pytest.raises(T.ShapeError):
        encode(enc, rng.standard_normal((6, 3)), cfg)
    with pytest.raises(ValueError):
        encode(enc, x, CodebookConfig(2, 5))


def test_image_encoder_shape(rng):
    enc = EncoderNet((1, 8, 8), 8, rng)
    assert enc(rng.standard_normal((3, 1, 8, 8))).shape == (3, 8)


@pytest.mark.parametrize("shape,d,kw", [((2,), 12, dict(hidden=128, depth=3)),
                                        ((2,), 12, dict(hidden=128, depth=4)),
                                        ((1, 8, 8), 8, dict(hidden=256, depth=3))])
def test_encoder_parameter_budget(shape, d, kw, rng):
    enc = EncoderNet(shape, d, rng)
    den = DenoiserNet(shape, rng, codebook=CodebookConfig(2, d), **kw)
    assert enc.num_parameters() < 0.01 * den.num_parameters()
