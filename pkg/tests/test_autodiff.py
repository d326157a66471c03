import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from unirep.autodiff import Var, logsumexp, normalize
from unirep.numerics import finite_diff_grad, max_relative_error


def _grad(fn, x):
    v = Var(x)
    fn(v).backward()
    return v.grad


def test_square_sum():
    assert np.array_equal(_grad(lambda v: (v * v).sum(), np.array([1.0, 2.0])), [2.0, 4.0])


def test_broadcast_add_unbroadcasts():
    b = Var(np.zeros(3))
    x = Var(np.ones((4, 3)))
    ((x + b) * 2.0).sum().backward()
    assert np.array_equal(b.grad, np.full(3, 8.0))


@settings(max_examples=30)
@given(st.integers(0, 10**6))
def test_composite_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(3, 4))
    W = rng.normal(size=(4, 2))

    def f(v):
        z = normalize(v @ Var(W)).tanh()
        return logsumexp(z * 3.0, axis=-1).sum() + (z.exp() + 1.0).log().sum() + v.softplus().sum()

    auto = _grad(f, x0)
    fd = finite_diff_grad(lambda a: float(f(Var(a)).value), x0)
    assert max_relative_error(auto, fd) < 1e-6


def test_logsumexp_stable():
    v = Var(np.array([1000.0, 1000.0]))
    out = logsumexp(v)
    assert np.isclose(out.value, 1000.0 + np.log(2.0))
    out.backward()
    assert np.allclose(v.grad, [0.5, 0.5])
