import math
import threading
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from air.tensor import (
    Tensor,
    apply_op,
    backward,
    column_l2_norm,
    concat,
    elu,
    exp,
    finite_difference_check,
    log,
    logsumexp,
    minimum,
    no_grad,
    sigmoid,
    softplus,
    sqrt,
    square,
)


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


def test_logsumexp_equal_weights():
    out = logsumexp(Tensor([math.log(1.0), math.log(1.0)]), axis=0)
    assert out.item() == pytest.approx(math.log(2.0), abs=1e-12)


def test_softplus_at_zero():
    assert softplus(Tensor([0.0])).item() == pytest.approx(math.log(2.0), abs=1e-15)


def test_elu_at_minus_one():
    assert elu(Tensor([-1.0])).item() == pytest.approx(math.exp(-1.0) - 1.0, abs=1e-15)
    assert elu(Tensor([2.0])).item() == 2.0


def test_logsumexp_overflow_safe():
    x = np.array([700.0, 700.0, 1.0])
    out = logsumexp(Tensor(x), axis=0).item()
    shifted = np.log(np.exp(x - 700.0).sum())
    assert np.isfinite(out)
    assert out == pytest.approx(700.0 + shifted, abs=1e-12)


def test_logsumexp_axis_and_keepdims():
    x = np.arange(6.0).reshape(2, 3)
    out = logsumexp(Tensor(x), axis=1, keepdims=True)
    assert out.shape == (2, 1)
    np.testing.assert_allclose(out.data[:, 0], np.log(np.exp(x).sum(axis=1)))


def test_quadratic_gradient():
    p = leaf([1.0, 2.0])
    grads = backward((p * p).sum())
    np.testing.assert_array_equal(grads[p], [2.0, 4.0])


def test_sigmoid_gradient_at_zero():
    w = leaf([0.0, 0.0, 0.0])
    x = np.array([1.0, -2.0, 0.5])
    grads = backward(sigmoid((w * x).sum()))
    np.testing.assert_allclose(grads[w], 0.25 * x, atol=1e-15)


def test_backward_rejects_non_scalar():
    p = leaf([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        backward(p * 2.0)


def test_backward_zero_for_unused_params():
    a, b = leaf([1.0]), leaf([[1.0, 2.0]])
    grads = backward((a * 3.0).sum(), [a, b])
    assert grads[b].shape == (1, 2)
    np.testing.assert_array_equal(grads[b], 0.0)


def test_gradients_accumulate_over_reuse():
    p = leaf([3.0])
    grads = backward((p * p + p * 2.0).sum())
    np.testing.assert_allclose(grads[p], [8.0])


def test_shape_mismatch_names_kind_and_shapes():
    with pytest.raises(ValueError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        apply_op("matmul", [np.ones((2, 3)), np.ones((2, 3))])
    with pytest.raises(ValueError, match=r"add.*\(2,\).*\(3,\)"):
        apply_op("add", [np.ones(2), np.ones(3)])


def test_unknown_kind():
    with pytest.raises(ValueError, match="unknown operation"):
        apply_op("conv2d", [np.ones(2)])


def test_overflow_surfaces_as_error():
    with pytest.raises(FloatingPointError):
        exp(Tensor([1000.0]))
    with pytest.raises(FloatingPointError):
        log(Tensor([0.0]))


def test_no_grad_records_nothing():
    p = leaf([1.0])
    with no_grad():
        out = p * 2.0
    assert not out.requires_grad


def test_no_grad_is_thread_local():
    p = leaf([1.0])
    seen = {}

    def worker():
        seen["rg"] = (p * 2.0).requires_grad

    with no_grad():
        t = threading.Thread(target=worker)
        t.start()
        t.join()
    assert seen["rg"] is True


def test_min_tie_routes_to_second_argument():
    a, b = leaf([1.0, 0.5, 2.0]), leaf([1.0, 1.0, 1.0])
    grads = backward(minimum(a, b).sum())
    np.testing.assert_array_equal(grads[a], [0.0, 1.0, 0.0])
    np.testing.assert_array_equal(grads[b], [1.0, 0.0, 1.0])


def test_column_l2_norm_values():
    v = np.array([[3.0, 0.0], [4.0, 2.0]])
    np.testing.assert_allclose(column_l2_norm(Tensor(v)).data, [5.0, 2.0])
    with pytest.raises(ValueError, match="matrix"):
        column_l2_norm(Tensor([1.0, 2.0]))


def test_finite_difference_quadratic():
    assert finite_difference_check(lambda ps: (ps[0] * ps[0]).sum(), [leaf([3.0])]) < 1e-8


def test_finite_difference_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        finite_difference_check(lambda ps: (ps[0] * np.inf).sum(), [leaf([1.0])])


def test_forward_deterministic():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=(3, 2))
    a = logsumexp(softplus(Tensor(x) @ Tensor(w)), axis=1).data
    b = logsumexp(softplus(Tensor(x) @ Tensor(w)), axis=1).data
    np.testing.assert_array_equal(a, b)


# every op kind against central differences on random inputs in [-3, 3]

UNARY = {
    "exp": exp,
    "neg": lambda t: -t,
    "square": square,
    "elu": elu,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "sum_axis": lambda t: t.sum(axis=1),
    "mean_axis": lambda t: t.mean(axis=0),
    "logsumexp": lambda t: logsumexp(t, axis=1),
    "column_l2_norm": column_l2_norm,
    "reshape": lambda t: t.reshape(-1) * Tensor(np.arange(12.0)),
    "take": lambda t: t[1:, ::2],
}
POSITIVE = {"log": log, "sqrt": sqrt}


def _rand(rng, shape, lo=-3.0, hi=3.0):
    return rng.uniform(lo, hi, size=shape)


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_kinds_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    fn = UNARY[name]
    weights = rng.normal(size=50)
    for _ in range(100):
        x = leaf(_rand(rng, (3, 4)))
        # random linear read-out so every output coordinate matters
        def loss(ps):
            out = fn(ps[0]).reshape(-1)
            return (out * Tensor(weights[: out.shape[0]])).sum()

        assert finite_difference_check(loss, [x]) < 1e-5


@pytest.mark.parametrize("name", sorted(POSITIVE))
def test_positive_domain_kinds(name):
    rng = np.random.default_rng(7)
    for _ in range(100):
        x = leaf(_rand(rng, (5,), 0.5, 3.0))
        assert finite_difference_check(lambda ps: POSITIVE[name](ps[0]).sum(), [x]) < 1e-5


@pytest.mark.parametrize("kind", ["add", "sub", "mul", "div", "matmul", "min", "concat"])
def test_binary_kinds_match_finite_differences(kind):
    rng = np.random.default_rng(11)
    for _ in range(100):
        if kind == "matmul":
            a, b = leaf(_rand(rng, (2, 3))), leaf(_rand(rng, (3, 4)))
            fn = lambda ps: (ps[0] @ ps[1]).sum()
        elif kind == "min":
            a, b = leaf(_rand(rng, (3, 4))), leaf(_rand(rng, (4,)))
            fn = lambda ps: (minimum(ps[0], ps[1]) * Tensor(np.arange(12.0).reshape(3, 4))).sum()
        elif kind == "concat":
            a, b = leaf(_rand(rng, (2, 3))), leaf(_rand(rng, (1, 3)))
            fn = lambda ps: (square(concat([ps[0], ps[1]], axis=0))).sum()
        else:
            a, b = leaf(_rand(rng, (3, 4))), leaf(_rand(rng, (1, 4)))
            if kind == "div":
                b.data = np.sign(b.data) * (np.abs(b.data) + 0.5)
            op = {"add": "add", "sub": "sub", "mul": "mul", "div": "div"}[kind]
            fn = lambda ps, op=op: square(apply_op(op, [ps[0], ps[1]])).sum()
        assert finite_difference_check(fn, [a, b]) < 1e-5


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_logsumexp_matches_scipy(x):
    from scipy.special import logsumexp as ref

    np.testing.assert_allclose(logsumexp(Tensor(x), axis=0).data, ref(x, axis=0), rtol=1e-12, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6,), elements=st.floats(-30, 30)))
def test_softplus_matches_logaddexp(x):
    np.testing.assert_allclose(softplus(Tensor(x)).data, np.logaddexp(0.0, x), rtol=1e-14, atol=1e-300)
