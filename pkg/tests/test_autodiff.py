import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from heartvit import autodiff as ad
from heartvit.errors import ContractError, NumericError, SizeError


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def check_grad(fn, *arrays, tol=1e-6):
    _, grads = ad.value_and_grad(fn, arrays)
    for k, (a, g) in enumerate(zip(arrays, grads)):
        def f(x, k=k):
            args = list(arrays)
            args[k] = x
            return float(ad.value_of(fn(*args)))
        num = numeric_grad(f, a)
        np.testing.assert_allclose(g, num, rtol=tol, atol=tol)


rng = np.random.default_rng(0)


@pytest.mark.parametrize("name,fn,shapes", [
    ("add-broadcast", lambda a, b: ad.sum_(a + b), [(3, 4), (4,)]),
    ("mul", lambda a, b: ad.sum_(a * b * a), [(2, 3), (2, 3)]),
    ("div", lambda a, b: ad.sum_(a / (b * b + 1.0)), [(3,), (3,)]),
    ("matmul-batched", lambda a, b: ad.sum_(ad.tanh(a @ b)), [(2, 3, 4), (4, 5)]),
    ("exp-log", lambda a: ad.sum_(ad.log(ad.exp(a) + 1.0)), [(5,)]),
    ("sigmoid", lambda a: ad.sum_(ad.sigmoid(a) * a), [(4,)]),
    ("gelu", lambda a: ad.sum_(ad.gelu(a) ** 2), [(6,)]),
    ("power", lambda a: ad.sum_(ad.power(a * a + 1.0, 1.5)), [(3,)]),
    ("transpose-reshape", lambda a: ad.sum_(ad.reshape(ad.transpose(a, (1, 0)), (6,)) * np.arange(6.0)), [(2, 3)]),
    ("getitem-fancy", lambda a: ad.sum_(ad.getitem(a, (slice(None), np.array([0, 2, 2]))) ** 2), [(2, 3)]),
    ("concat", lambda a, b: ad.sum_(ad.concat([a, b], axis=0) ** 2 * 0.5), [(2, 3), (1, 3)]),
    ("mean", lambda a: ad.mean(a * a, axis=1).sum(), [(3, 4)]),
    ("softmax", lambda a: ad.sum_(ad.softmax(a) * np.arange(4.0)), [(2, 4)]),
    ("layer_norm", lambda a, g, b: ad.sum_(ad.layer_norm(a, g, b) * np.arange(5.0)), [(3, 5), (5,), (5,)]),
])
def test_gradients_match_finite_differences(name, fn, shapes):
    arrays = [rng.standard_normal(s) for s in shapes]
    check_grad(fn, *arrays)


def test_weighted_softmax_gradient_reaches_weights():
    s = rng.standard_normal((2, 4))
    w = rng.uniform(0.1, 1.0, (2, 4))
    check_grad(lambda s_, w_: ad.sum_(ad.weighted_softmax(s_, w_) * np.arange(4.0)), s, w)


def test_weighted_softmax_zero_weight_excludes_key():
    s = np.array([[1.0, 5.0, 2.0]])
    out = ad.value_of(ad.weighted_softmax(s, np.array([[1.0, 0.0, 1.0]])))
    ref = np.exp([1.0, 2.0]) / np.exp([1.0, 2.0]).sum()
    np.testing.assert_allclose(out[0, [0, 2]], ref)
    assert out[0, 1] == 0.0


def test_cross_entropy_with_smoothing():
    logits = rng.standard_normal((4, 3))
    labels = np.array([0, 2, 1, 2])
    check_grad(lambda z: ad.cross_entropy(z, labels, smoothing=0.1), logits)
    val = ad.value_of(ad.cross_entropy(logits, labels, reduction="sum"))
    logp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
    assert val == pytest.approx(-logp[np.arange(4), labels].sum())


def test_plain_arrays_skip_the_tape():
    out = ad.matmul(np.ones((2, 2)), np.ones((2, 2)))
    assert isinstance(out, np.ndarray)


def test_shared_subexpression_accumulates():
    x = np.array([1.5, -2.0])
    _, (g,) = ad.value_and_grad(lambda a: ad.sum_(a * a + a * a), [x])
    np.testing.assert_allclose(g, 4 * x)


def test_loss_must_be_scalar():
    with pytest.raises(ContractError):
        ad.value_and_grad(lambda a: a * 2.0, [np.ones(3)])


def test_nonfinite_forward_is_reported():
    with pytest.raises(NumericError):
        ad.value_and_grad(lambda a: ad.sum_(ad.log(a)), [np.array([1.0, -1.0])])


def test_hvp_on_quadratic_is_exact():
    A = rng.standard_normal((6, 6))
    A = A + A.T
    z, v = rng.standard_normal(6), rng.standard_normal(6)
    out = ad.hvp(lambda u: 0.5 * ad.sum_(u * (u @ A)), z, v)
    np.testing.assert_allclose(out, A @ v, rtol=1e-7, atol=1e-9)


def test_hvp_zero_direction_and_shape_check():
    f = lambda u: ad.sum_(u ** 3)
    np.testing.assert_array_equal(ad.hvp(f, np.ones(3), np.zeros(3)), np.zeros(3))
    with pytest.raises(ContractError):
        ad.hvp(f, np.ones(3), np.ones(4))


def test_hvp_matches_analytic_cubic():
    z, v = rng.standard_normal(5), rng.standard_normal(5)
    np.testing.assert_allclose(ad.hvp(lambda u: ad.sum_(u ** 3), z, v), 6 * z * v, rtol=1e-6)


def test_full_hessian_oracle():
    A = rng.standard_normal((4, 4))
    A = A @ A.T
    H = ad.full_hessian_oracle(lambda u: 0.5 * ad.sum_(u * (u @ A)), rng.standard_normal(4))
    np.testing.assert_allclose(H, A, rtol=1e-7, atol=1e-9)
    with pytest.raises(SizeError):
        ad.full_hessian_oracle(lambda u: ad.sum_(u), np.zeros(ad.HESSIAN_ORACLE_MAX_DIM + 1))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_hvp_linear_in_direction(dim, seed, a, b):
    r = np.random.default_rng(seed)
    M = r.standard_normal((dim, dim))
    f = lambda u: ad.sum_(ad.tanh(u @ M) ** 2)
    z, v, w = r.standard_normal((3, dim))
    lhs = ad.hvp(f, z, a * v + b * w)
    rhs = a * ad.hvp(f, z, v) + b * ad.hvp(f, z, w)
    scale = 1.0 + np.abs(lhs).max() + np.abs(rhs).max()
    assert np.abs(lhs - rhs).max() <= 1e-5 * scale


def test_truncated_normal_bounds():
    x = ad.truncated_normal(ad.make_rng(1), (2000,), std=0.02, bound=2.0)
    assert np.all(np.abs(x) <= 0.04)
    assert 0.015 < x.std() < 0.02
