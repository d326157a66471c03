import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from unirep.numerics import (
    DegenerateInputError,
    NumericalDivergence,
    RngStream,
    finite_diff_grad,
    l2_normalize,
    l2_normalize_jvp,
    log_sigmoid,
    log_softmax,
    logsumexp,
    max_relative_error,
    sigmoid,
    softmax,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_normalize_345():
    u, n = l2_normalize(np.array([3.0, 4.0]))
    assert np.allclose(u, [0.6, 0.8], atol=1e-15)
    assert n[0] == 5.0


def test_normalize_unit_is_identity():
    u = np.array([0.0, 0.6, 0.8])
    assert np.array_equal(l2_normalize(u)[0], u)


def test_normalize_zero_raises():
    with pytest.raises(DegenerateInputError):
        l2_normalize(np.zeros(3))
    with pytest.raises(DegenerateInputError):
        l2_normalize(np.array([[1.0, 0.0], [0.0, 0.0]]))


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-100, 100)).filter(
    lambda v: np.linalg.norm(v) > 1e-6))
def test_normalize_unit_norm(v):
    u, _ = l2_normalize(v)
    assert abs(np.linalg.norm(u) - 1.0) < 1e-12


def test_jvp_at_e1():
    u, n = l2_normalize(np.array([1.0, 0.0]))
    assert np.allclose(l2_normalize_jvp(u, n, np.array([0.0, 1.0])), [0.0, 1.0])


@settings(max_examples=50)
@given(st.integers(0, 10**6))
def test_jvp_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=5)
    g = rng.normal(size=5)
    u, n = l2_normalize(v)
    fd = finite_diff_grad(lambda x: float(l2_normalize(x)[0] @ g), v)
    assert max_relative_error(l2_normalize_jvp(u, n, g), fd) < 1e-6


def test_log_softmax_examples():
    assert np.allclose(log_softmax(np.array([0.0, 0.0])), np.log([0.5, 0.5]))
    assert np.allclose(softmax(np.array([2.0, 0.0])), [0.8808, 0.1192], atol=1e-4)
    p = softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(p)) and np.allclose(p, [1.0, 0.0])


def test_log_softmax_rejects_non_finite():
    with pytest.raises(NumericalDivergence):
        log_softmax(np.array([np.nan, 0.0]))


def test_log_softmax_normalization_and_shift_10k():
    rng = np.random.default_rng(1)
    x = rng.normal(scale=50.0, size=(10_000, 7))
    shift = rng.normal(scale=100.0, size=(10_000, 1))
    ls = log_softmax(x)
    assert np.max(np.abs(np.exp(ls).sum(axis=1) - 1.0)) < 1e-12
    assert np.max(np.abs(log_softmax(x + shift) - ls)) < 1e-9


@given(arrays(np.float64, st.integers(1, 8), elements=finite))
def test_logsumexp_bounds(x):
    lse = logsumexp(x)
    assert x.max() - 1e-9 <= lse <= x.max() + np.log(len(x)) + 1e-9


def test_sigmoid_pair():
    z = np.array([-800.0, -3.0, 0.0, 3.0, 800.0])
    assert np.allclose(sigmoid(z), 1.0 / (1.0 + np.exp(-np.clip(z, -700, 700))))
    assert np.all(np.isfinite(log_sigmoid(z)))
    assert np.isclose(log_sigmoid(np.array(0.0)), np.log(0.5))


def test_finite_diff_examples():
    assert np.allclose(finite_diff_grad(lambda x: float(x @ x), np.array([1.0, 2.0])), [2, 4])
    assert np.array_equal(finite_diff_grad(lambda x: 3.0, np.array([1.0, 2.0])), [0.0, 0.0])
    g = finite_diff_grad(lambda x: float(np.exp(x[0])), np.array([0.0]))
    assert abs(g[0] - 1.0) < 1e-8


def test_finite_diff_keeps_shape_and_input():
    x = np.arange(6.0).reshape(2, 3)
    before = x.copy()
    g = finite_diff_grad(lambda a: float(np.sum(a**2)), x)
    assert g.shape == (2, 3)
    assert np.array_equal(x, before)


def test_finite_diff_reports_coordinate():
    with np.errstate(invalid="ignore"), pytest.raises(NumericalDivergence, match=r"\(1,\)"):
        finite_diff_grad(lambda x: float(np.log(x[1])) if x[0] == 1.0 else 0.0, np.array([1.0, 0.0]))


def test_max_relative_error():
    assert max_relative_error([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert np.isclose(max_relative_error([1.0, 0.0], [1.0, 0.1]), 0.1)


def test_rng_stream_million_prefix():
    a = RngStream(42, "masks").random(1_000_000)
    b = RngStream(42, "masks").random(1_000_000)
    assert np.array_equal(a, b)


def test_rng_stream_labels_independent():
    assert not np.array_equal(RngStream(42, "a").random(8), RngStream(42, "b").random(8))
    assert not np.array_equal(RngStream(1, "a").random(8), RngStream(2, "a").random(8))
    s = RngStream(3)
    assert np.array_equal(s.substream("x").random(4), RngStream(3, "root/x").random(4))
