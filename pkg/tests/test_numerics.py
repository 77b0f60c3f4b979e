import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from multilogue import numerics as nx
from multilogue.errors import ContractError, DimensionError, InputError
from multilogue.gradcheck import check_op, op_cases
from multilogue.numerics import GruCellParams, Tensor, backward, grad_check


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def np_gru(P, h, x):
    """Independent numpy statement of the pinned GRU convention."""
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    z = sig(P["W_z"] @ x + P["U_z"] @ h + P["b_z"])
    r = sig(P["W_r"] @ x + P["U_r"] @ h + P["b_r"])
    cand = np.tanh(P["W_h"] @ x + P["U_h"] @ (r * h) + P["b_h"])
    return (1 - z) * h + z * cand


def random_gru(rng, d_in=2, d_h=3):
    shapes = {"W_z": (d_h, d_in), "W_r": (d_h, d_in), "W_h": (d_h, d_in), "U_z": (d_h, d_h),
              "U_r": (d_h, d_h), "U_h": (d_h, d_h), "b_z": (d_h,), "b_r": (d_h,), "b_h": (d_h,)}
    return GruCellParams(d_in, d_h, **{k: leaf(rng.uniform(-1, 1, s)) for k, s in shapes.items()})


# --- matmul -----------------------------------------------------------------

def test_matmul_identity():
    out = nx.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    assert out.data.tolist() == [[1, 2], [3, 4]]


def test_matmul_hand():
    assert nx.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradcheck():
    rep = check_op("matmul", op_cases()["matmul"], seed=3)
    assert rep.max_rel_err < 1e-6


# --- softmax ----------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(nx.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_single():
    assert nx.softmax(Tensor([7.5])).data.tolist() == [1.0]


def test_softmax_shift_invariant():
    a = nx.softmax(Tensor([1.0, 2.0, 3.0])).data
    b = nx.softmax(Tensor([101.0, 102.0, 103.0])).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)


def test_softmax_large_inputs_stay_finite():
    out = nx.softmax(Tensor([1000.0, 0.0, -1000.0])).data
    assert np.all(np.isfinite(out)) and out[0] == pytest.approx(1.0)


def test_softmax_mask_zeroes_masked_entries():
    mask = np.array([[True, False], [True, True]])
    out = nx.softmax(Tensor([[1.0, 5.0], [0.0, 0.0]]), axis=1, mask=mask).data
    assert out[0].tolist() == [1.0, 0.0]
    np.testing.assert_allclose(out[1], [0.5, 0.5])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)))
def test_softmax_is_distribution(x):
    out = nx.softmax(Tensor(x)).data
    assert np.all(out >= 0)
    assert abs(out.sum() - 1.0) < 1e-12


# --- elementwise --------------------------------------------------------------

def test_elementwise_identities():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    assert np.array_equal(nx.elementwise(x, Tensor(np.ones((2, 3))), "mul").data, x.data)
    assert np.array_equal(nx.elementwise(x, Tensor(np.zeros((2, 3))), "add").data, x.data)


def test_elementwise_rejects_broadcast():
    with pytest.raises(DimensionError):
        nx.elementwise(Tensor(np.ones(3)), Tensor(np.ones((2, 3))), "add")


def test_elementwise_unknown_kind():
    with pytest.raises(InputError):
        nx.elementwise(Tensor(np.ones(3)), Tensor(np.ones(3)), "pow")


def test_mul_gradcheck():
    assert check_op("mul", op_cases()["mul"], seed=5).max_rel_err < 1e-6


# --- concat -------------------------------------------------------------------

def test_concat_single_part():
    v = Tensor([1.0, 2.0])
    assert np.array_equal(nx.concat([v], axis=0).data, v.data)


def test_concat_hand():
    out = nx.concat([Tensor([[1.0], [2.0]]), Tensor([[3.0], [4.0]])], axis=1)
    assert out.data.tolist() == [[1, 3], [2, 4]]


def test_concat_gradient_routes_ones():
    a, b = leaf(np.zeros((2, 3))), leaf(np.zeros((1, 3)))
    backward(nx.sum(nx.concat([a, b], axis=0)))
    assert np.array_equal(a.grad, np.ones((2, 3))) and np.array_equal(b.grad, np.ones((1, 3)))


def test_concat_mismatch():
    with pytest.raises(DimensionError):
        nx.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2)))], axis=0)


# --- activations ----------------------------------------------------------------

def test_activation_values():
    assert nx.activation(Tensor([0.0]), "tanh").data[0] == 0.0
    assert nx.activation(Tensor([-5.0, 5.0]), "relu").data.tolist() == [0.0, 5.0]
    assert nx.activation(Tensor([0.0]), "sigmoid").data[0] == 0.5


def test_activation_rejects_non_finite():
    with pytest.raises(InputError):
        nx.activation(Tensor([np.nan]), "tanh")


def test_sigmoid_extremes_are_finite():
    out = nx.sigmoid(Tensor([-1000.0, 1000.0])).data
    assert out.tolist() == [0.0, 1.0]


# --- GRU ------------------------------------------------------------------------

def test_gru_zero_params_halves_state():
    p = GruCellParams.zeros(2, 3)
    h = Tensor([1.0, -2.0, 4.0])
    assert nx.gru_cell(p, h, Tensor([5.0, -7.0])).data.tolist() == [0.5, -1.0, 2.0]


def test_gru_zero_everything_gives_zero():
    p = GruCellParams.zeros(2, 3)
    assert nx.gru_cell(p, Tensor(np.zeros(3)), Tensor([3.0, 1.0])).data.tolist() == [0.0] * 3


def test_gru_matches_numpy_oracle_and_reference():
    rng = np.random.default_rng(0)
    p = random_gru(rng)
    h, x = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 2)
    fused = nx.gru_cell(p, Tensor(h), Tensor(x)).data
    ref = nx.gru_cell_reference(p, Tensor(h), Tensor(x)).data
    oracle = np_gru({k: t.data for k, t in p.blocks().items()}, h, x)
    np.testing.assert_allclose(fused, oracle, rtol=0, atol=1e-14)
    np.testing.assert_allclose(ref, oracle, rtol=0, atol=1e-14)


def test_gru_fused_backward_matches_reference_backward():
    rng = np.random.default_rng(1)
    p = random_gru(rng)
    h, x = leaf(rng.uniform(-1, 1, 3)), leaf(rng.uniform(-1, 1, 2))
    w = Tensor(rng.normal(size=3))
    grads = []
    for fn in (nx.gru_cell, nx.gru_cell_reference):
        for t in [*p.blocks().values(), h, x]:
            t.grad = None
        backward(nx.dot(fn(p, h, x), w))
        grads.append([t.grad.copy() for t in [*p.blocks().values(), h, x]])
    for a, b in zip(*grads):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-13)


def test_gru_gradcheck_all_blocks():
    for seed in range(3):
        rep = check_op("gru_cell", op_cases()["gru_cell"], seed=seed)
        assert set(rep.per_param_err) >= {"W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h"}
        assert rep.max_rel_err < 1e-5
        rep_e = grad_check(*_gru_loss(seed), mode="elementwise")
        assert rep_e.max_rel_err < 1e-5


def _gru_loss(seed):
    rng = np.random.default_rng(seed)
    p = random_gru(rng)
    h, x = leaf(rng.uniform(-1, 1, 3)), leaf(rng.uniform(-1, 1, 2))
    w = Tensor(rng.normal(size=3))
    return (lambda: nx.dot(nx.gru_cell(p, h, x), w)), {**p.blocks(), "h": h, "x": x}


def test_gru_shape_validation():
    with pytest.raises(DimensionError):
        nx.gru_cell(GruCellParams.zeros(2, 3), Tensor(np.zeros(4)), Tensor(np.zeros(2)))
    with pytest.raises(DimensionError):
        nx.gru_cell(GruCellParams.zeros(2, 3), Tensor(np.zeros(3)), Tensor(np.zeros(5)))


# --- backward -------------------------------------------------------------------

def test_backward_sum():
    x = leaf([1.0, -2.0, 3.0])
    backward(nx.sum(x))
    assert x.grad.tolist() == [1.0, 1.0, 1.0]


def test_backward_dot_self():
    x = leaf([1.0, -2.0, 3.0])
    backward(nx.dot(x, x))
    assert x.grad.tolist() == [2.0, -4.0, 6.0]


def test_backward_accumulates_on_reuse():
    x = leaf([1.0, 2.0])
    loss = nx.dot(x, x)
    backward(loss)
    backward(loss)
    assert x.grad.tolist() == [4.0, 8.0]


def test_backward_diamond_graph():
    x = leaf([3.0])
    y = nx.tanh(x)
    backward(nx.sum(nx.add(nx.mul(y, y), y)))
    t = np.tanh(3.0)
    assert x.grad[0] == pytest.approx((2 * t + 1) * (1 - t * t), abs=1e-15)


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        backward(leaf([1.0, 2.0]))


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with nx.no_grad():
        y = nx.tanh(x)
    assert y.is_leaf and not y.requires_grad


def test_deep_chain_does_not_recurse():
    x = leaf([0.1])
    y = x
    for _ in range(5000):
        y = nx.scale(y, 1.0)
    backward(nx.sum(y))
    assert x.grad[0] == 1.0


def test_operator_sugar():
    a, b = leaf([1.0, 2.0]), leaf([3.0, 4.0])
    out = (a + b) * a - 1.0
    assert out.data.tolist() == [3.0, 11.0]
    assert (2.0 * a).data.tolist() == [2.0, 4.0]


# --- grad_check -----------------------------------------------------------------

def test_gradcheck_linear_is_exact():
    rng = np.random.default_rng(0)
    x = leaf(rng.normal(size=5))
    w = Tensor(rng.normal(size=5))
    for mode in ("tensor", "elementwise"):
        assert grad_check(lambda: nx.dot(w, x), [x], mode=mode).max_rel_err < 1e-9


def test_gradcheck_detects_doubled_gradient():
    f, params = _gru_loss(0)
    nx.backward(f())
    doubled = {k: 2 * p.grad for k, p in params.items()}
    rep = grad_check(f, params, analytic=doubled)
    assert rep.max_rel_err == pytest.approx(0.5, abs=1e-4)
    assert grad_check(f, params, analytic=doubled, mode="elementwise").max_rel_err == pytest.approx(0.5, abs=1e-4)


def test_gradcheck_restores_grads():
    x = leaf([1.0, 2.0])
    x.grad = np.array([9.0, 9.0])
    grad_check(lambda: nx.dot(x, x), {"x": x})
    assert x.grad.tolist() == [9.0, 9.0]


def test_gradcheck_warns_on_nondeterminism():
    rng = np.random.default_rng(0)
    x = leaf([1.0])

    def noisy():
        return nx.sum(nx.add(x, Tensor(rng.normal(size=1))))

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rep = grad_check(noisy, [x])
    assert not rep.reliable
    assert any(issubclass(w.category, RuntimeWarning) for w in caught)


def test_gradcheck_bad_epsilon():
    with pytest.raises(InputError):
        grad_check(lambda: nx.sum(leaf([1.0])), [], epsilon=0)


@pytest.mark.parametrize("name", sorted(op_cases()))
def test_every_registered_op_passes(name):
    assert check_op(name, op_cases()[name], seed=11).max_rel_err < 1e-5
