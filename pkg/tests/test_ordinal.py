"""Cumulative-link ordinal model: probabilities, loss, thresholds, biases."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphfusion import tensor as T
from graphfusion.errors import ContractError
from graphfusion.ordinal import (
    OrdinalParams,
    RaterBiases,
    apply_rater_bias,
    cl_loss,
    cl_probs,
    effective_thresholds,
    init_thresholds,
    ordinal_nll,
    predict,
    predict_batch,
    reset_underflow_count,
    underflow_count,
)
from graphfusion.tensor import AdamState, Tape, Tensor, adam_step

from helpers import check_grad


def phi(t):
    return 0.5 * (1 + math.erf(t / math.sqrt(2)))


def test_cl_probs_symmetric_binary():
    p = cl_probs(0.0, np.array([0.0]))
    assert np.allclose(p, [0.5, 0.5], atol=1e-15)


def test_cl_probs_three_class_example():
    p = cl_probs(0.0, np.array([-1.0, 1.0]))
    expect = [phi(-1), phi(1) - phi(-1), 1 - phi(1)]
    assert np.allclose(p, expect, atol=1e-12)
    assert p[0] == pytest.approx(0.158655, abs=1e-6)
    assert p[1] == pytest.approx(0.682689, abs=1e-6)


def test_cl_probs_sum_to_one_property():
    rng = np.random.default_rng(0)
    for _ in range(200):
        k = int(rng.integers(2, 7))
        # distinct thresholds with real gaps; scores within a few sigma so
        # interval masses stay representable in float64
        alpha = np.cumsum(0.05 + rng.random(k - 1))
        alpha -= alpha.mean()
        s = float(rng.uniform(-4, 4))
        p = cl_probs(s, alpha)
        assert abs(p.sum() - 1.0) < 1e-12
        assert (p > 0).all() and (p < 1).all()


def test_cl_probs_rejects_nonmonotone():
    with pytest.raises(ContractError):
        cl_probs(0.0, np.array([1.0, -1.0]))


def test_cl_loss_binary_example():
    with Tape():
        loss = cl_loss(Tensor([[0.0]]), Tensor(np.array([0.0])), 1)
    assert loss.item() == pytest.approx(math.log(2.0), abs=1e-12)


def test_cl_loss_three_class_example():
    # oracle: -log(Phi(1) - Phi(-1))
    expect = -math.log(phi(1) - phi(-1))
    loss = cl_loss(Tensor([[0.0]]), Tensor(np.array([-1.0, 1.0])), 2)
    assert loss.item() == pytest.approx(expect, abs=1e-12)


def test_cl_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    s = Tensor([[0.3]], requires_grad=True)
    raw = Tensor(np.array([-0.5, 0.2, 0.1]), requires_grad=True)

    def loss():
        return cl_loss(s, effective_thresholds(raw), 2)

    worst = check_grad(loss, [s, raw], rtol=1e-6, rng=rng)
    assert worst < 1e-6


def test_ordinal_nll_matches_per_row_average():
    rng = np.random.default_rng(2)
    alpha = Tensor(np.array([-0.8, 0.1, 0.9]))
    scores = rng.normal(size=(12, 1))
    ys = rng.integers(1, 5, size=12)
    batch = ordinal_nll(Tensor(scores), alpha, ys).item()
    singles = [cl_loss(Tensor(scores[i : i + 1]), alpha, int(ys[i])).item() for i in range(12)]
    assert batch == pytest.approx(np.mean(singles), abs=1e-12)


def test_ordinal_nll_label_range_checked():
    alpha = Tensor(np.array([0.0]))
    with pytest.raises(ContractError):
        ordinal_nll(Tensor([[0.0]]), alpha, np.array([3]))


def test_underflow_counter_increments():
    reset_underflow_count()
    alpha = Tensor(np.array([0.0]))
    loss = cl_loss(Tensor([[45.0]]), alpha, 1)  # Phi(-45) underflows to 0
    assert underflow_count() == 1
    assert np.isfinite(loss.item())
    reset_underflow_count()


def test_predict_tails_and_middle():
    alpha = np.array([-1.0, 1.0])
    assert predict(-100.0, alpha) == 1
    assert predict(100.0, alpha) == 3
    assert predict(0.0, alpha) == 2


def test_predict_monotone_in_score():
    rng = np.random.default_rng(3)
    alpha = np.sort(rng.normal(size=4))
    sweep = np.linspace(-6, 6, 1000)
    preds = predict_batch(sweep, alpha)
    assert np.all(np.diff(preds) >= 0)
    singles = [predict(s, alpha) for s in sweep[::50]]
    assert singles == predict_batch(sweep[::50], alpha).tolist()


def test_effective_thresholds_always_monotone():
    rng = np.random.default_rng(4)
    for _ in range(100):
        raw = Tensor(rng.normal(size=rng.integers(1, 6)) * 5)
        alpha = effective_thresholds(raw).data
        assert np.all(np.diff(alpha) >= 0)


def test_thresholds_stay_monotone_under_optimizer_steps():
    rng = np.random.default_rng(5)
    raw = Tensor(rng.normal(size=4), requires_grad=True)
    state = AdamState.for_params([raw])
    for _ in range(5000):
        grad = rng.normal(size=4)
        adam_step([raw], [grad], state, lr=0.05)
        alpha = effective_thresholds(raw).data
        assert np.all(np.diff(alpha) >= 0)


def test_translation_invariance_of_probs():
    rng = np.random.default_rng(6)
    alpha = np.sort(rng.normal(size=3))
    for shift in (-2.0, 0.7, 5.0):
        p1 = cl_probs(0.3, alpha)
        p2 = cl_probs(0.3 + shift, alpha + shift)
        assert np.allclose(p1, p2, atol=1e-12)


def test_rater_bias_application():
    biases = RaterBiases(["a", "b"], Tensor(np.array([[0.0], [0.7]]), requires_grad=True))
    s = Tensor([[-0.2]])
    assert apply_rater_bias(s, "a", biases).item() == pytest.approx(-0.2)
    assert apply_rater_bias(s, "b", biases).item() == pytest.approx(0.5)
    with pytest.raises(ContractError):
        apply_rater_bias(s, "zz", biases)


def test_bias_centering():
    biases = RaterBiases(["a", "b", "c"], Tensor(np.array([[1.0], [2.0], [6.0]])))
    biases.center()
    assert biases.values.data.mean() == pytest.approx(0.0, abs=1e-15)
    assert biases.as_dict()["a"] == pytest.approx(-2.0)


def test_init_thresholds_reproduce_marginal():
    labels = np.array([0] * 10 + [1] * 30 + [2] * 60)
    raw = init_thresholds(labels, 3)
    alpha = effective_thresholds(Tensor(raw)).data
    p = cl_probs(0.0, alpha)
    assert np.allclose(p, [0.1, 0.3, 0.6], atol=1e-6)


@settings(max_examples=100, deadline=None)
@given(
    s=st.floats(-5, 5),
    seed=st.integers(0, 1000),
    k=st.integers(2, 6),
)
def test_cl_probs_property(s, seed, k):
    rng = np.random.default_rng(seed)
    alpha = np.sort(rng.normal(size=k - 1))
    p = cl_probs(s, alpha)
    assert abs(p.sum() - 1.0) < 1e-12
    assert len(p) == k
