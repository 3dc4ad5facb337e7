from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dymesh import tensor as tn
from dymesh.tensor import DegenerateRowError, NonFiniteError, Rng, Tensor, grad_check

from conftest import assert_close

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def leaf(shape, rng, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(shape, lo, hi), requires_grad=True)


# -- matmul ------------------------------------------------------------------------

def test_matmul_identity_and_hand_values(rng):
    a = rng.normal((3, 4))
    assert_close(tn.matmul(np.eye(3), a).data, a)
    assert_close(tn.matmul(np.array([[1.0, 2], [3, 4]]), np.ones((2, 1))).data, [[3], [7]])
    assert tn.matmul(rng.normal((5, 7)), rng.normal((7, 2))).shape == (5, 2)


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        tn.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_backward_matches_finite_differences(rng):
    a, b = leaf((4, 5), rng), leaf((5, 3), rng)
    assert grad_check(lambda x: tn.tsum(tn.matmul(x, b) ** 2), a) < 1e-4
    assert grad_check(lambda x: tn.tsum(tn.matmul(a, x) ** 2), b) < 1e-4


def test_batched_matmul_broadcast_gradient(rng):
    a, b = leaf((2, 3, 4, 5), rng), leaf((5, 2), rng)
    assert grad_check(lambda x: tn.tsum(tn.sin(tn.matmul(a, x))), b) < 1e-6


# -- softmax -----------------------------------------------------------------------

def test_softmax_uniform_and_closed_form():
    assert_close(tn.masked_softmax(np.zeros(4), np.zeros(4)).data, np.full(4, 0.25))
    w = tn.masked_softmax(np.zeros(2), np.array([0.0, np.log(1e-8)])).data
    # exact closed form [1, 1e-8] / (1 + 1e-8); the first weight is 1e-8 below 1, not within 1e-9
    assert_close(w, np.array([1.0, 1e-8]) / (1.0 + 1e-8), 1e-15)
    assert abs(w[1] - 1e-8) < 1e-9


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 6), elements=finite), finite)
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    y = tn.softmax(x).data
    assert np.abs(y.sum(axis=-1) - 1).max() < 1e-12
    assert np.abs(tn.softmax(x + c).data - y).max() < 1e-12


def test_all_masked_row_raises():
    mask = np.array([[0.0, 0.0], [-np.inf, -np.inf]])
    with pytest.raises(DegenerateRowError):
        tn.masked_softmax(np.zeros((2, 2)), mask)


def test_partially_masked_row_gives_zero_weight():
    y = tn.masked_softmax(np.zeros(3), np.array([0.0, -np.inf, 0.0])).data
    assert_close(y, [0.5, 0.0, 0.5])


def test_softmax_gradient(rng):
    x = leaf((3, 5), rng)
    mask = np.log(rng.uniform((3, 5)) + 1e-8)
    assert grad_check(lambda a: tn.masked_softmax(a, mask)[..., 0].sum(), x) < 1e-4


# -- grad_check examples -------------------------------------------------------------

def test_grad_check_sum_of_squares(rng):
    assert grad_check(lambda a: tn.tsum(a * a), leaf((6,), rng)) < 1e-7


def test_grad_check_constant_function(rng):
    x = leaf((4,), rng)
    assert grad_check(lambda a: tn.tensor(3.0), x) == 0.0


def test_grad_check_rejects_non_finite():
    x = Tensor(np.array([0.0]), requires_grad=True)
    with pytest.raises(NonFiniteError):
        grad_check(lambda a: tn.tsum(tn.log(a)), x)


# -- elementwise ops and reductions ------------------------------------------------------

UNARY = {
    "exp": tn.exp, "sin": tn.sin, "cos": tn.cos, "tanh": tn.tanh, "sigmoid": tn.sigmoid,
    "silu": tn.silu, "gelu": tn.gelu, "layer_norm": tn.layer_norm,
    "sqrt": lambda a: tn.sqrt(a * a + 1.0), "log": lambda a: tn.log(a * a + 0.5),
    "power": lambda a: (a * a + 1.0) ** 1.5, "div": lambda a: 1.0 / (a * a + 1.0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng):
    x = leaf((3, 4), rng, -1.5, 1.5)
    w = rng.normal((3, 4))
    assert grad_check(lambda a: tn.tsum(UNARY[name](a) * w), x) < 1e-6


def test_structural_op_gradients(rng):
    x = leaf((2, 3, 4), rng)
    w = rng.normal((4, 3, 2))
    assert grad_check(lambda a: tn.tsum(a.transpose(2, 1, 0) * w), x) < 1e-7
    assert grad_check(lambda a: tn.tsum(a.reshape(6, 4)[[0, 2, 2]] ** 2), x) < 1e-7
    assert grad_check(lambda a: tn.tsum(tn.concat([a, a * 2.0], axis=1) ** 2), x) < 1e-7
    assert grad_check(lambda a: tn.tsum(tn.stack([a, -a], axis=0)[0] * w.transpose(2, 1, 0)), x) < 1e-7
    assert grad_check(lambda a: tn.mean(a, axis=1).sum() * 3.0, x) < 1e-7


def test_adaptive_norm_gradients(rng):
    x, s, b = leaf((2, 5), rng), leaf((2, 5), rng), leaf((2, 5), rng)
    w = rng.normal((2, 5))
    for target in (x, s, b):
        assert grad_check(lambda _: tn.tsum(tn.adaptive_norm(x, s, b) * w), target) < 1e-6


def test_layer_norm_statistics(rng):
    y = tn.layer_norm(tn.tensor(rng.normal((4, 16)) * 3 + 2)).data
    assert np.abs(y.mean(-1)).max() < 1e-12
    assert np.abs(y.var(-1) - 1).max() < 1e-5


def test_non_finite_results_raise():
    with pytest.raises(NonFiniteError):
        tn.log(tn.tensor(np.array([0.0])))
    with pytest.raises(NonFiniteError):
        Tensor(np.array([np.nan]))


def test_backward_visits_each_node_once(rng):
    x = leaf((3,), rng)
    y = x * x
    z = tn.tsum(y + y * 2.0)
    visited = z.backward()
    assert len(visited) == len({id(n) for n in visited})
    assert_close(x.grad, 6 * x.data)


def test_gradient_accumulates_across_backward_calls(rng):
    x = leaf((3,), rng)
    tn.tsum(x).backward()
    tn.tsum(x).backward()
    assert_close(x.grad, np.full(3, 2.0))


def test_no_grad_builds_no_graph(rng):
    x = leaf((3,), rng)
    with tn.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_no_grad_is_per_thread(rng):
    import threading
    x = leaf((2,), rng)
    seen = {}

    def worker():
        seen["tracked"] = (x * 2.0).requires_grad

    with tn.no_grad():
        t = threading.Thread(target=worker)
        t.start()
        t.join()
    assert seen["tracked"] is True


# -- Rng ------------------------------------------------------------------------------------

def test_rng_reproducible_bitwise():
    a, b = Rng(42), Rng(42)
    assert np.array_equal(a.normal((5, 7)), b.normal((5, 7)))
    assert np.array_equal(a.uniform(9), b.uniform(9))
    assert np.array_equal(Rng(42).fork(3).normal(4), Rng(42).fork(3).normal(4))
    assert not np.array_equal(Rng(42).fork(3).normal(4), Rng(42).fork(4).normal(4))


def test_box_muller_moments():
    z = Rng(7).normal(200_001)
    assert abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01
