import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eqinv import autodiff as ad
from eqinv.autodiff import Tensor
from eqinv.errors import ContractError, NumericError, ShapeError


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


def test_matmul_identity_and_zero():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((a @ b).data, b.data)
    np.testing.assert_array_equal((a @ Tensor(np.zeros((2, 1)))).data, np.zeros((2, 1)))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_fd():
    rng = np.random.default_rng(0)
    a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
    r = rng.standard_normal((3, 2))
    assert ad.grad_check(lambda: ad.tsum((a @ b) * r), [a, b]) < 1e-6


def test_cross_entropy_uniform_logits():
    loss = ad.softmax_cross_entropy(Tensor(np.zeros((3, 10))), np.array([0, 4, 9]))
    assert loss.item() == pytest.approx(math.log(10), abs=1e-12)


def test_cross_entropy_saturates():
    logits = np.zeros((2, 5))
    logits[0, 1] = logits[1, 3] = 20.0
    assert ad.softmax_cross_entropy(Tensor(logits), np.array([1, 3])).item() < 1e-4


def test_cross_entropy_matches_loop_oracle():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((4, 5))
    labels = np.array([0, 3, 4, 1])
    expected = 0.0
    for i in range(4):
        denom = sum(math.exp(v) for v in logits[i])
        expected += -math.log(math.exp(logits[i, labels[i]]) / denom)
    expected /= 4
    t = leaf(logits)
    assert ad.softmax_cross_entropy(t, labels).item() == pytest.approx(expected, abs=1e-12)
    assert ad.grad_check(lambda: ad.softmax_cross_entropy(t, labels), [t]) < 1e-6


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        ad.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_cross_entropy_shift_invariant():
    rng = np.random.default_rng(2)
    logits = rng.standard_normal((6, 4))
    labels = rng.integers(0, 4, 6)
    a = ad.softmax_cross_entropy(Tensor(logits), labels).item()
    b = ad.softmax_cross_entropy(Tensor(logits + 1000.0), labels).item()
    assert abs(a - b) < 1e-9


def test_backward_sum_gives_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square():
    x = leaf(3.0)
    ad.square(x).backward()
    assert x.grad == pytest.approx(6.0)


def test_backward_accumulates_without_reset():
    x = leaf(2.0)
    (x * x).backward()
    (x * x).backward()
    assert x.grad == pytest.approx(8.0)
    x.zero_grad()
    (x * x).backward()
    assert x.grad == pytest.approx(4.0)


def test_backward_rejects_non_scalar():
    x = leaf(np.ones(3))
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_backward_rejects_detached_output():
    with pytest.raises(ContractError):
        Tensor(1.0).backward()


def test_two_path_graph_sums_contributions():
    # f = a*b + exp(a): df/da = b + exp(a)
    a, b = leaf(0.7), leaf(-1.3)
    (a * b + ad.exp(a)).backward()
    assert a.grad == pytest.approx(-1.3 + math.exp(0.7), abs=1e-12)
    assert b.grad == pytest.approx(0.7, abs=1e-12)


def test_tape_is_topological():
    a = leaf(np.ones(3))
    out = ad.tsum(ad.exp(a) * a + a)
    tape = ad.Tape.from_output(out)
    position = {id(n): i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for p in node._parents:
            if p.requires_grad:
                assert position[id(p)] < position[id(node)]
    assert len({id(n) for n in tape.nodes}) == len(tape)


def test_no_grad_records_nothing():
    a = leaf(np.ones(2))
    with ad.no_grad():
        out = a * 3.0
    assert not out.requires_grad and out._parents == ()


def test_grad_check_linear_is_exact():
    a = leaf(np.array([0.25, -1.0, 0.5, 2.0]))
    w = np.array([3.0, -2.0, 1.0, 0.5])
    assert ad.grad_check(lambda: ad.tsum(a * w) + 1.0, [a]) < 1e-9


def test_grad_check_five_point_linear():
    a = leaf(np.array([0.3, -2.0]))
    assert ad.grad_check(lambda: ad.tsum(a * np.array([1.5, -4.0])), [a], eps=1e-4, stencil=5) < 1e-9


def test_grad_check_raises_on_nan():
    a = leaf(np.array([1.0]))
    with pytest.raises(NumericError):
        ad.grad_check(lambda: ad.tsum(a * np.nan), [a])


def test_grad_check_reference_function():
    # analytic gradient of 2a compared against a reference with the same derivative
    a = leaf(np.array([0.5, 1.5]))
    err = ad.grad_check(lambda: ad.tsum(a * 2.0), [a], reference=lambda: ad.tsum(a * 2.0 + 7.0))
    assert err < 1e-8


def test_log_and_exp_stay_finite():
    assert np.isfinite(ad.log(Tensor(np.array([0.0, 1e-320]))).data).all()
    assert np.isfinite(ad.exp(Tensor(np.array([1e4]))).data).all()


def test_l2_normalize_rows_and_zero_row():
    x = Tensor(np.array([[3.0, 4.0], [0.0, 0.0]]))
    out = ad.l2_normalize(x).data
    np.testing.assert_allclose(out[0], [0.6, 0.8], atol=1e-12)
    np.testing.assert_array_equal(out[1], [0.0, 0.0])


def test_variance_is_population_variance():
    x = np.array([1.0, 2.0, 4.0, 7.0])
    assert ad.variance(Tensor(x)).item() == pytest.approx(np.var(x), abs=1e-15)


def test_take_scatters_repeated_indices():
    a = leaf(np.array([1.0, 2.0, 3.0]))
    ad.tsum(ad.take(a, np.array([0, 0, 2]))).backward()
    np.testing.assert_array_equal(a.grad, [2.0, 0.0, 1.0])


def test_broadcast_gradient_reduces():
    a = leaf(np.ones((3, 4)))
    b = leaf(np.ones(4))
    ad.tsum(a * b).backward()
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite))
def test_logsumexp_matches_numpy(x):
    got = ad.logsumexp(Tensor(x), axis=1).data
    m = x.max(1)
    np.testing.assert_allclose(got, m + np.log(np.exp(x - m[:, None]).sum(1)), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (2, 3), elements=finite))
def test_grad_of_product_sum(x, y):
    a, b = leaf(x), leaf(y)
    ad.tsum(a * b).backward()
    np.testing.assert_array_equal(a.grad, y)
    np.testing.assert_array_equal(b.grad, x)
