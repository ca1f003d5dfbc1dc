import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from moetune import autodiff as ad
from moetune.autodiff import NonFiniteError, Tensor

from conftest import central_diff, rel_err, sample_indices


def param(values):
    return Tensor(np.array(values, dtype=float), requires_grad=True)


def check_grad(build_loss, tensors, rng, n=12, tol=1e-6):
    loss = build_loss()
    ad.zero_grad(tensors)
    loss.backward()
    for t in tensors:
        idx = sample_indices(t.shape, n, rng)
        analytic = np.array([t.grad[i] for i in idx])
        numeric = central_diff(lambda: build_loss().item(), t, idx)
        assert rel_err(analytic, numeric) < tol, t.name


# --- worked examples -----------------------------------------------------------


def test_matmul_by_identity_and_selector():
    a = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(ad.matmul(Tensor(a), Tensor(np.eye(3))).values, a)
    sel = np.array([[0.0], [1.0], [0.0]])
    np.testing.assert_array_equal((Tensor(a) @ Tensor(sel)).values, a[:, 1:2])


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0, 0.0])).values, 0.25)
    p = ad.softmax(Tensor([1000.0, 0.0])).values
    assert p[0] == 1.0 and p[1] < 1e-300
    np.testing.assert_allclose(ad.softmax(Tensor([math.log(3.0), 0.0])).values, [0.75, 0.25])


def test_gelu_matches_tanh_formula_and_erf_shape():
    x = np.linspace(-5, 5, 101)
    got = ad.gelu(Tensor(x)).values
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(got, ref, atol=1e-15)
    exact = np.array([0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in x])
    assert np.max(np.abs(got - exact)) < 1e-3
    assert ad.gelu(Tensor([0.0])).values[0] == 0.0


def test_layer_norm_statistics():
    x = np.random.default_rng(0).normal(3.0, 2.0, (5, 16))
    y = ad.layer_norm(Tensor(x)).values
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-4)


def test_backward_simple_chain():
    x = param([2.0])
    y = x * x * 3.0 + x
    (y.sum()).backward()
    assert x.grad[0] == pytest.approx(13.0)


def test_shared_subexpression_accumulates():
    x = param([1.5])
    y = ad.exp(x)
    (y * y).sum().backward()
    assert x.grad[0] == pytest.approx(2 * math.exp(3.0))


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError):
        param([1.0, 2.0]).backward()


def test_non_finite_raises():
    with pytest.raises(NonFiniteError), np.errstate(divide="ignore"):
        ad.log(Tensor([0.0]))
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])


def test_frozen_leaf_receives_no_grad():
    a, b = param([1.0, 2.0]), Tensor([3.0, 4.0])
    (a * b).sum().backward()
    assert b.grad is None
    np.testing.assert_array_equal(a.grad, [3.0, 4.0])


def test_intermediate_grads_are_released():
    a = param(np.ones(3))
    mid = ad.tanh(a)
    mid.sum().backward()
    assert mid.grad is None and a.grad is not None


# --- finite-difference gradient checks -----------------------------------------


@pytest.mark.parametrize(
    "op",
    [
        lambda a, b: ad.matmul(a, b),
        lambda a, b: a @ b + ad.tanh(a @ b) * 0.5,
        lambda a, b: ad.gelu(a @ b),
        lambda a, b: ad.softmax(a @ b, axis=-1) * ad.exp(a @ b * 0.1),
        lambda a, b: ad.log_softmax(a @ b, axis=-1),
        lambda a, b: ad.layer_norm(a @ b) * ad.tanh(a @ b),
        lambda a, b: ad.concat([a @ b, ad.take(a @ b, (slice(None), [0, 0, 2]))], axis=1),
        lambda a, b: ad.where_const(np.triu(np.ones((4, 5), bool)), a @ b, -3.0),
        lambda a, b: (a @ b) / (ad.exp(a @ b) + 1.0),
        lambda a, b: ad.power(ad.exp(a @ b) + 1.0, -1.5),
    ],
)
def test_op_gradients(op, rng):
    a = param(rng.normal(size=(4, 3)))
    b = param(rng.normal(size=(3, 5)))
    w = rng.normal(size=op(a, b).shape)
    check_grad(lambda: ad.sum_(op(a, b) * w), [a, b], rng)


def test_layer_norm_affine_gradients(rng):
    x = param(rng.normal(size=(3, 6)))
    g = param(rng.normal(size=6))
    bias = param(rng.normal(size=6))
    w = rng.normal(size=(3, 6))
    check_grad(lambda: ad.sum_(ad.layer_norm(x, g, bias) * w), [x, g, bias], rng)


def test_take_and_index_add_gradients(rng):
    a = param(rng.normal(size=(5, 3)))
    rows = np.array([0, 2, 2, 4])
    w = rng.normal(size=(5, 3))
    check_grad(lambda: ad.sum_(ad.index_add((5, 3), rows, ad.take(a, rows) * 2.0) * w), [a], rng)


def test_batched_matmul_gradients(rng):
    a = param(rng.normal(size=(2, 3, 4, 5)))
    b = param(rng.normal(size=(2, 3, 5, 2)))
    w = rng.normal(size=(2, 3, 4, 2))
    check_grad(lambda: ad.sum_(ad.matmul(a, b) * w), [a, b], rng)
    c = param(rng.normal(size=(2, 4, 5)))
    d = param(rng.normal(size=(5, 3)))
    w2 = rng.normal(size=(2, 4, 3))
    check_grad(lambda: ad.sum_((c @ d) * w2), [c, d], rng)


def test_reductions_and_reshapes(rng):
    a = param(rng.normal(size=(2, 3, 4)))
    w = rng.normal(size=(4, 3))
    v = rng.normal(size=(6, 4))

    def loss():
        return ad.sum_(ad.transpose(ad.mean(a, axis=0), (1, 0)) * w) + ad.sum_(ad.reshape(a, (6, 4)) * v)

    check_grad(loss, [a], rng)


def test_broadcast_add_gradient(rng):
    a = param(rng.normal(size=(4, 3)))
    bias = param(rng.normal(size=3))
    w = rng.normal(size=(4, 3))
    check_grad(lambda: ad.sum_(ad.tanh(a + bias) * w), [a, bias], rng)


# --- properties ------------------------------------------------------------------

finite = st.floats(-30, 30, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite))
def test_softmax_rows_sum_to_one(x):
    p = ad.softmax(Tensor(x)).values
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(p >= 0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (2, 4), elements=finite), st.floats(-50, 50))
def test_softmax_shift_invariance(x, c):
    np.testing.assert_allclose(ad.softmax(Tensor(x)).values, ad.softmax(Tensor(x + c)).values, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite))
def test_log_softmax_consistent(x):
    np.testing.assert_allclose(
        np.exp(ad.log_softmax(Tensor(x)).values), ad.softmax(Tensor(x)).values, atol=1e-12
    )


def test_same_graph_twice_gives_bitwise_equal_grads(rng):
    a = param(rng.normal(size=(6, 6)))
    grads = []
    for _ in range(2):
        a.grad = None
        ad.sum_(ad.gelu(a @ a) * ad.softmax(a)).backward()
        grads.append(a.grad.copy())
    assert np.array_equal(grads[0], grads[1])
