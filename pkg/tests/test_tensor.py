"""Autograd engine: op semantics, gradient fidelity, Adam."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphfusion import tensor as T
from graphfusion.errors import ContractError, DomainError, NonFiniteError, ShapeError
from graphfusion.tensor import AdamState, Tape, Tensor, adam_step

from helpers import check_grad


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(eye, m).data, m.data)


def test_matmul_row_times_column():
    out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_shape_error_mentions_both_shapes():
    with pytest.raises(ShapeError) as err:
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    assert "(2, 3)" in str(err.value)


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    worst = check_grad(
        lambda: T.sum_all(T.matmul(a, b)), [a, b], rtol=1e-6, n_coords=12, rng=rng
    )
    assert worst < 1e-6


def test_gauss_cdf_values():
    assert T.gauss_cdf(Tensor([0.0])).data[0] == pytest.approx(0.5, abs=1e-15)
    # oracle: Phi(1) via math.erf
    expected = 0.5 * (1 + math.erf(1 / math.sqrt(2)))
    assert T.gauss_cdf(Tensor([1.0])).data[0] == pytest.approx(expected, abs=1e-12)


def test_gauss_cdf_monotone_and_open_unit_interval():
    xs = np.linspace(-8, 8, 2001)
    ys = T.gauss_cdf(Tensor(xs)).data
    assert np.all(np.diff(ys) >= 0)
    assert np.all(ys > 0) and np.all(ys < 1)


def test_relu_definition():
    out = T.relu(Tensor([-3.0, 2.0]))
    assert out.data.tolist() == [0.0, 2.0]


def test_elementwise_dispatcher():
    a = Tensor([1.0, 2.0])
    assert T.elementwise("add", a, a).data.tolist() == [2.0, 4.0]
    assert T.elementwise("neg", a).data.tolist() == [-1.0, -2.0]
    with pytest.raises(ContractError):
        T.elementwise("add", a)
    with pytest.raises(ContractError):
        T.elementwise("nope", a)


def test_log_domain_error():
    with pytest.raises(DomainError):
        T.log(Tensor([1.0, -0.5]))


def test_broadcast_row_and_column():
    m = Tensor(np.ones((3, 2)))
    row = Tensor([[1.0, 2.0]])
    col = Tensor([[1.0], [2.0], [3.0]])
    assert np.array_equal(T.add(m, row).data, np.ones((3, 2)) + [1, 2])
    assert np.array_equal(T.mul(m, col).data, np.tile([[1.0], [2.0], [3.0]], (1, 2)))


def test_forbidden_broadcast_raises():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((3, 2))), Tensor(np.ones((2, 3))))


def test_broadcast_gradients_reduce_correctly():
    rng = np.random.default_rng(1)
    m = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    row = Tensor(rng.normal(size=(1, 3)), requires_grad=True)
    col = Tensor(rng.normal(size=(4, 1)), requires_grad=True)
    check_grad(lambda: T.sum_all(T.mul(T.add(m, row), col)), [m, row, col], rtol=1e-6, rng=rng)


def test_backward_simple_square():
    with Tape() as tape:
        x = Tensor([[3.0]], requires_grad=True)
        loss = T.sum_all(x * x)
    tape.backward(loss)
    assert np.allclose(x.grad, [[6.0]])


def test_backward_fanout_accumulates():
    with Tape() as tape:
        x = Tensor([[5.0]], requires_grad=True)
        loss = T.sum_all(x + x)
    tape.backward(loss)
    assert np.allclose(x.grad, [[2.0]])


def test_backward_relu_chain_matches_finite_differences():
    rng = np.random.default_rng(2)
    w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    x = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    worst = check_grad(
        lambda: T.sum_all(T.relu(T.matmul(w, x))), [w, x], rtol=1e-5, n_coords=10, rng=rng
    )
    assert worst < 1e-5


def test_backward_rejects_nonscalar_loss():
    with Tape() as tape:
        x = Tensor([[1.0, 2.0]], requires_grad=True)
        y = x * 2.0
    with pytest.raises(ContractError):
        tape.backward(y)


def test_backward_rejects_empty_tape():
    tape = Tape()
    with pytest.raises(ContractError):
        tape.backward(Tensor([[1.0]]))


def test_backward_is_deterministic_bitwise():
    def run():
        rng = np.random.default_rng(42)
        w = Tensor(rng.normal(size=(5, 5)), requires_grad=True)
        x = Tensor(rng.normal(size=(5, 3)))
        with Tape() as tape:
            loss = T.sum_all(T.tanh(T.matmul(w, x)))
        tape.backward(loss)
        return w.grad

    g1, g2 = run(), run()
    assert np.array_equal(g1, g2)


def test_nonfinite_forward_raises():
    with pytest.raises(NonFiniteError):
        T.exp(Tensor([1000.0]))


@pytest.mark.parametrize(
    "op",
    ["relu", "tanh", "sigmoid", "gauss_cdf", "exp", "softplus"],
)
def test_unary_gradients_match_finite_differences(op):
    rng = np.random.default_rng(3)
    for seed in range(20):
        r = np.random.default_rng(seed)
        x = Tensor(r.normal(size=(3, 3)) + 0.1, requires_grad=True)
        check_grad(lambda: T.sum_all(T.elementwise(op, x)), [x], rtol=1e-4, rng=rng)


def test_structured_op_gradients():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    idx = np.array([0, 2, 2, 4])
    check_grad(lambda: T.sum_all(T.take_rows(x, idx) * 2.0), [x], rtol=1e-6, rng=rng)
    check_grad(
        lambda: T.sum_all(T.scatter_add_rows(x, np.array([0, 1, 0, 1, 2]), 3) * 1.5),
        [x], rtol=1e-6, rng=rng,
    )
    check_grad(lambda: T.sum_all(T.mean_rows(x) * 3.0), [x], rtol=1e-6, rng=rng)
    y = Tensor(rng.normal(size=(5, 2)), requires_grad=True)
    check_grad(lambda: T.sum_all(T.concat([x, y], axis=1) * 0.5), [x, y], rtol=1e-6, rng=rng)
    check_grad(lambda: T.sum_all(T.transpose(x) * 2.0), [x], rtol=1e-6, rng=rng)
    v = Tensor(rng.normal(size=7), requires_grad=True)
    check_grad(lambda: T.sum_all(T.cumsum(v) * 1.25), [v], rtol=1e-6, rng=rng)


def test_dropout_eval_is_identity_and_train_scales():
    rng = np.random.default_rng(5)
    x = Tensor(np.ones((200, 50)))
    out = T.dropout(x, 0.3, rng, training=False)
    assert np.array_equal(out.data, x.data)
    out = T.dropout(x, 0.3, np.random.default_rng(0), training=True)
    kept = out.data != 0
    assert abs(kept.mean() - 0.7) < 0.03
    assert np.allclose(out.data[kept], 1.0 / 0.7)


def test_dropout_gradient_uses_same_mask():
    rng = np.random.default_rng(6)
    x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    with Tape() as tape:
        out = T.dropout(x, 0.5, np.random.default_rng(3), training=True)
        loss = T.sum_all(out)
    tape.backward(loss)
    mask = out.data != 0
    assert np.array_equal(x.grad != 0, mask)


@settings(max_examples=50, deadline=None)
@given(st.floats(-30, 30))
def test_gauss_cdf_against_erf_oracle(t):
    expected = 0.5 * (1 + math.erf(t / math.sqrt(2)))
    got = float(T.gauss_cdf(Tensor([t])).data[0])
    assert abs(got - expected) < 1e-12


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_first_step_magnitude():
    p = Tensor(np.zeros((2, 2)), requires_grad=True)
    g = np.array([[1.0, -2.0], [0.5, -0.1]])
    state = AdamState.for_params([p])
    adam_step([p], [g], state, lr=0.01)
    # bias-corrected first step moves by ~lr in the -sign(g) direction
    assert np.allclose(p.data, -0.01 * np.sign(g), atol=1e-6)


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    p = Tensor(np.full((3,), 7.0), requires_grad=True)
    state = AdamState.for_params([p])
    adam_step([p], [np.zeros(3)], state, lr=0.1)
    assert np.array_equal(p.data, np.full((3,), 7.0))
    state.m = [np.full((3,), 0.5)]
    state.v = [np.full((3,), 0.25)]
    adam_step([p], [np.zeros(3)], state, lr=1e-9)
    assert np.all(state.m[0] < 0.5) and np.all(state.v[0] < 0.25)


def test_adam_converges_on_quadratic():
    p = Tensor(np.array([0.0]), requires_grad=True)
    state = AdamState.for_params([p])
    for _ in range(100):
        grad = 2.0 * (p.data - 5.0)
        adam_step([p], [grad], state, lr=0.1)
    assert abs(p.data[0] - 5.0) < 0.5


def test_adam_shape_mismatch():
    p = Tensor(np.zeros((2,)), requires_grad=True)
    state = AdamState.for_params([p])
    with pytest.raises(ContractError):
        adam_step([p], [np.zeros((3,))], state, lr=0.1)
