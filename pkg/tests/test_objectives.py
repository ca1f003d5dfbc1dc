import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import central_diff, rel_err
from moetune import autodiff as ad
from moetune.autodiff import Tensor
from moetune.objectives import autoregressive_loss, aux_loss, total_loss


def test_uniform_logits_give_log_vocab():
    V = 37
    logits = Tensor(np.zeros((2, 5, V)))
    targets = np.random.default_rng(0).integers(0, V, (2, 5))
    mask = np.ones((2, 5), bool)
    assert autoregressive_loss(logits, targets, mask).item() == pytest.approx(math.log(V), abs=1e-12)


def test_loss_is_shifted_and_masked():
    V = 4
    logits = np.zeros((1, 3, V))
    logits[0, 0, 2] = 50.0  # predicts token at position 1
    logits[0, 1, 0] = -50.0
    targets = np.array([[0, 2, 1]])
    only_first = np.array([[False, True, False]])
    assert autoregressive_loss(Tensor(logits), targets, only_first).item() < 1e-12
    only_second = np.array([[False, False, True]])
    p = np.exp(0.0) / (np.exp(-50.0) + 3.0)
    assert autoregressive_loss(Tensor(logits), targets, only_second).item() == pytest.approx(-math.log(p))


def test_all_masked_raises():
    with pytest.raises(ValueError):
        autoregressive_loss(Tensor(np.zeros((1, 3, 2))), np.zeros((1, 3), int), np.zeros((1, 3), bool))


def test_aux_anchor_uniform_is_one():
    for E in (2, 4, 8):
        K = 4 * E
        probs = np.full((K, E), 1.0 / E)
        # uniform probabilities tie, so spread the top-1 choices evenly by hand
        sel = np.arange(K) % E
        assert abs(aux_loss(Tensor(probs), sel).item() - 1.0) < 1e-12


def test_aux_anchor_concentrated_is_e():
    for E in (2, 4, 8):
        probs = np.zeros((10, E))
        probs[:, 1] = 1.0
        assert aux_loss(Tensor(probs)).item() == float(E)


def test_aux_matches_oracle_on_random_instances():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        K, E = int(rng.integers(1, 9)), int(rng.integers(1, 7))
        probs = rng.dirichlet(np.ones(E) * rng.uniform(0.2, 3.0), K)
        got = aux_loss(Tensor(probs)).item()
        assert abs(got - oracles.aux(probs)) < 1e-12


def test_aux_bounds():
    rng = np.random.default_rng(4)
    for _ in range(200):
        K, E = 16, int(rng.integers(2, 6))
        probs = rng.dirichlet(np.ones(E), K)
        v = aux_loss(Tensor(probs)).item()
        assert 0.0 < v <= E + 1e-12


def test_aux_gradient_treats_fraction_as_constant(rng):
    logits = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    sel = np.argmax(logits.values, axis=1)

    def f():
        return aux_loss(ad.softmax(logits), sel)

    f().backward()
    idx = [(i, j) for i in range(6) for j in range(3)]
    numeric = central_diff(lambda: f().item(), logits, idx)
    assert rel_err([logits.grad[i] for i in idx], numeric) < 1e-7


def test_count_all_k_uses_every_assignment():
    probs = np.array([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3]])
    sel = np.array([[0, 1], [1, 2]])
    F = np.array([1, 2, 1]) / 4
    G = probs.mean(axis=0)
    assert aux_loss(Tensor(probs), sel, count_all_k=True).item() == pytest.approx(3 * float(F @ G))
    assert aux_loss(Tensor(probs), sel).item() == pytest.approx(aux_loss(Tensor(probs)).item())


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 5.0), min_size=0, max_size=4), st.floats(0.0, 1.0), st.floats(0.0, 4.0))
def test_total_loss_arithmetic(aux_values, alpha, reg):
    rep = total_loss(Tensor(reg), [Tensor(a) for a in aux_values], alpha)
    want = reg + (alpha * float(np.mean(aux_values)) if aux_values else 0.0)
    assert rep.total.item() == pytest.approx(want, abs=1e-12)
    assert rep.scalars()["aux"] == pytest.approx(aux_values)


def test_alpha_zero_leaves_router_out_of_graph(rng):
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    aux = aux_loss(ad.softmax(Tensor(rng.normal(size=(4, 3))) @ w))
    reg = Tensor(1.0, requires_grad=True)
    rep = total_loss(reg, [aux], 0.0)
    rep.total.backward()
    assert w.grad is None
