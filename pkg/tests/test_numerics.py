import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fdcheck import analytic_grads, check_op, numeric_grad, rel_error
from tier import numerics as nx
from tier.errors import ContractError, DegenerateVectorError, DimensionError, DomainError, NonFiniteError
from tier.numerics import Tape, Tensor

# high-precision values of softmax([1, -1]) and its entropy
SOFTMAX_1_M1 = (0.8807970779778824, 0.11920292202211755)
ENTROPY_1_M1 = 0.3653338550872076
LN49 = 3.8918202981106265


def test_frozen_constants_match_mpmath():
    mpmath.mp.dps = 40
    e1, em1 = mpmath.e, 1 / mpmath.e
    p = e1 / (e1 + em1)
    q = 1 - p
    assert float(p) == pytest.approx(SOFTMAX_1_M1[0], abs=1e-16)
    assert float(-p * mpmath.log(p) - q * mpmath.log(q)) == pytest.approx(ENTROPY_1_M1, abs=1e-16)
    assert float(mpmath.log(49)) == LN49


# ----------------------------------------------------------------------------
# forward values


def test_matmul_examples():
    out = nx.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])
    assert nx.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_l2_normalize_examples():
    np.testing.assert_allclose(nx.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], atol=1e-15)
    u = np.array([0.0, 1.0, 0.0])
    np.testing.assert_array_equal(nx.l2_normalize(Tensor(u)).data, u)


def test_l2_normalize_degenerate():
    with pytest.raises(DegenerateVectorError):
        nx.l2_normalize(Tensor(np.zeros((2, 3))), axis=1)


def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    p = nx.softmax(Tensor([1000.0, 0.0])).data
    assert np.isfinite(p).all() and p[0] == 1.0 and p[1] < 1e-300
    np.testing.assert_allclose(nx.softmax(Tensor([1.0, -1.0])).data, SOFTMAX_1_M1, atol=1e-15)


def test_softmax_mask_zeroes_entries():
    p = nx.softmax(Tensor([[1.0, 2.0, 3.0]]), axis=1, mask=[[True, False, True]]).data
    assert p[0, 1] == 0.0
    assert p.sum() == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ContractError):
        nx.softmax(Tensor([[1.0, 2.0]]), axis=1, mask=[[False, False]])


def test_entropy_examples():
    assert float(nx.entropy(Tensor(np.full(49, 1 / 49))).data) == pytest.approx(LN49, abs=1e-12)
    assert float(nx.entropy(Tensor([0.0, 1.0, 0.0])).data) == 0.0
    assert float(nx.entropy(Tensor(list(SOFTMAX_1_M1))).data) == pytest.approx(ENTROPY_1_M1, abs=1e-12)


def test_entropy_rejects_bad_input():
    with pytest.raises(DomainError):
        nx.entropy(Tensor([-0.1, 1.1]))
    with pytest.raises(DomainError):
        nx.entropy(Tensor([0.5, 0.6]))


def test_cross_entropy_matches_direct():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(4, 4))
    labels = np.arange(4)
    direct = np.mean([-z[i, i] + math.log(np.exp(z[i]).sum()) for i in range(4)])
    assert float(nx.cross_entropy(Tensor(z), labels).data) == pytest.approx(direct, abs=1e-14)
    direct_t = np.mean([-z[i, i] + math.log(np.exp(z[:, i]).sum()) for i in range(4)])
    assert float(nx.cross_entropy(Tensor(z), labels, axis=0).data) == pytest.approx(direct_t, abs=1e-14)


def test_nonfinite_forward_raises_with_op_name():
    with pytest.raises(NonFiniteError) as info:
        nx.exp(Tensor([1000.0]))
    assert info.value.tensor_name == "exp"


def test_zero_dim_tensor_keeps_shape():
    assert Tensor(np.array(2.0)).shape == ()
    tape = Tape()
    t = tape.leaf(np.array(0.5))
    tape.backward(nx.exp(t) * 3.0)
    assert t.grad.shape == ()
    assert float(t.grad) == pytest.approx(3 * math.exp(0.5), abs=1e-14)


# ----------------------------------------------------------------------------
# backward


def test_backward_sum_gives_ones():
    tape = Tape()
    x = tape.leaf(np.arange(6.0).reshape(2, 3))
    tape.backward(nx.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_constant_loss_zero_grads():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    c = tape.leaf(np.array(2.0))
    tape.backward(c * 1.0)
    np.testing.assert_array_equal(x.grad, np.zeros(3))


def test_backward_rejects_non_scalar_and_foreign_loss():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(ContractError):
        tape.backward(x * 2.0)
    with pytest.raises(ContractError):
        Tape().backward(nx.sum(x))


def test_backward_reused_node_accumulates():
    tape = Tape()
    x = tape.leaf(np.array([1.0, 2.0]))
    tape.backward(nx.sum(x * x + x))
    np.testing.assert_array_equal(x.grad, [3.0, 5.0])


def test_matmul_gradient_matches_fd():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    check_op(lambda a, b: nx.sum(nx.matmul(a, b)), a, b, tol=1e-6)


def test_l2_normalize_gradient_matches_fd():
    rng = np.random.default_rng(1)
    v, w = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    check_op(lambda v: nx.sum(nx.l2_normalize(v, axis=1) * w), v, tol=1e-6)


OPS = {
    "add": (lambda a, b: nx.sum(nx.add(a, b) * nx.add(a, b)), [(3, 4), (4,)]),
    "sub": (lambda a, b: nx.sum(nx.sub(a, b) * a), [(3, 4), (3, 1)]),
    "mul": (lambda a, b: nx.sum(nx.mul(a, b)), [(2, 3), (2, 3)]),
    "div": (lambda a, b: nx.sum(nx.div(a, nx.add(nx.mul(b, b), 1.0))), [(2, 3), (2, 3)]),
    "tanh": (lambda a: nx.sum(nx.tanh(a) * a), [(3, 3)]),
    "exp": (lambda a: nx.sum(nx.exp(a)), [(3, 3)]),
    "matmul": (lambda a, b: nx.sum(nx.tanh(nx.matmul(a, b))), [(2, 3, 4), (4, 2)]),
    "transpose": (lambda a, b: nx.sum(nx.transpose(a) * b), [(2, 3), (3, 2)]),
    "swapaxes": (lambda a, b: nx.sum(nx.swapaxes(a, 1, 2) * b), [(2, 3, 4), (2, 4, 3)]),
    "reshape": (lambda a, b: nx.sum(nx.reshape(a, (6,)) * b), [(2, 3), (6,)]),
    "mean": (lambda a: nx.sum(nx.mean(a, axis=1) * nx.mean(a, axis=1)), [(3, 4)]),
    "getitem": (lambda a: nx.sum(nx.getitem(a, (slice(None), 0)) * nx.getitem(a, (slice(None), 0))), [(3, 4)]),
    "take": (lambda t: nx.sum(nx.tanh(nx.take(t, np.array([[0, 2], [2, 1]])))), [(3, 2)]),
    "l2_normalize": (lambda a, b: nx.sum(nx.l2_normalize(a, axis=-1) * b), [(3, 4), (3, 4)]),
    "softmax": (lambda a, b: nx.sum(nx.softmax(a, axis=0) * b), [(3, 4), (3, 4)]),
    "entropy": (lambda a: nx.sum(nx.entropy(nx.softmax(a, axis=1), axis=1)), [(3, 5)]),
    "cross_entropy": (lambda a: nx.cross_entropy(a, np.array([2, 0, 1])), [(3, 3)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_over_100_seeds(name):
    build, shapes = OPS[name]
    for seed in range(100):
        rng = np.random.default_rng(seed)
        arrays = [rng.normal(size=s) for s in shapes]
        check_op(build, *arrays, tol=1e-4)


def test_masked_softmax_entropy_gradient():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 3))
    mask = np.array([[1], [1], [0], [1]], dtype=bool)
    check_op(lambda a: nx.sum(nx.entropy(nx.softmax(a, axis=0, mask=mask), axis=0)), x, tol=1e-6)


def test_numeric_grad_helper_is_sane():
    g = numeric_grad(lambda x: float(np.sum(x ** 2)), np.array([1.0, -2.0]))
    np.testing.assert_allclose(g, [2.0, -4.0], atol=1e-8)
    assert rel_error(np.zeros(2), np.zeros(2)) == 0.0
    (ga,) = analytic_grads(lambda x: nx.sum(x * x), np.array([1.0, -2.0]))
    np.testing.assert_array_equal(ga, [2.0, -4.0])


# ----------------------------------------------------------------------------
# properties

finite_rows = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)),
                     elements=st.floats(-50, 50, allow_nan=False))


@settings(max_examples=200, deadline=None)
@given(finite_rows, st.floats(-100, 100))
def test_softmax_sums_to_one_and_shift_invariant(x, c):
    p = nx.softmax(Tensor(x), axis=1).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(nx.softmax(Tensor(x + c), axis=1).data, p, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(finite_rows)
def test_entropy_of_softmax_bounded(x):
    h = nx.entropy(nx.softmax(Tensor(x), axis=1), axis=1).data
    assert (h >= 0).all()
    assert (h <= math.log(x.shape[1]) + 1e-12).all()


def test_forward_is_deterministic():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(5, 7))
    a = nx.entropy(nx.softmax(nx.matmul(Tensor(x), Tensor(x.T)), axis=1), axis=1).data
    b = nx.entropy(nx.softmax(nx.matmul(Tensor(x), Tensor(x.T)), axis=1), axis=1).data
    assert a.tobytes() == b.tobytes()
