import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_diff
from suede.errors import ContractError, DimensionError, DomainError
from suede.tensor import (
    Tensor,
    broadcast_to,
    concat,
    gelu,
    getitem,
    grad_check,
    l2_normalize,
    layer_norm,
    log,
    logsumexp,
    mean,
    minimum,
    no_grad,
    parameter,
    scatter_rows,
    softmax,
    sqrt,
    swapaxes,
    take_rows,
    tanh,
    tsum,
)


def numeric_grads(f, params, h=1e-6):
    out = []
    for p in params:
        g = np.zeros_like(p.data)
        for idx in np.ndindex(p.data.shape):
            g[idx] = central_diff(lambda: f().item(), p.data, idx, h)
        out.append(g)
    return out


def check(f, *params, tol=1e-6):
    for p in params:
        p.grad = None
    f().backward()
    for p, g in zip(params, numeric_grads(f, params)):
        np.testing.assert_allclose(p.grad, g, rtol=tol, atol=tol)


def rand(*shape, seed=0, positive=False):
    r = np.random.default_rng(seed).normal(size=shape)
    return parameter(np.abs(r) + 0.5 if positive else r)


def test_broadcast_add_mul_grads():
    a, b = rand(3, 4), rand(4, seed=1)
    check(lambda: tsum((a + b) * b - a / (b * b + 1.0)), a, b)


def test_unary_grads():
    a = rand(2, 5, positive=True)
    check(lambda: tsum(log(a) + sqrt(a) + tanh(a) + gelu(a) + (a.__neg__() * 2.0).__rsub__(1.0)), a)


def test_matmul_batched_grads():
    a, b = rand(2, 3, 4), rand(4, 5, seed=1)
    check(lambda: tsum(tanh(a @ b)), a, b)


def test_softmax_logsumexp_grads():
    a = rand(3, 6)
    w = np.random.default_rng(9).normal(size=(3, 6))
    check(lambda: tsum(softmax(a, axis=-1) * w) + tsum(logsumexp(a, axis=0)), a)


def test_layer_norm_grads():
    x, g, b = rand(2, 3, 8), rand(8, seed=1), rand(8, seed=2)
    w = np.random.default_rng(3).normal(size=(2, 3, 8))
    check(lambda: tsum(layer_norm(x, g, b) * w), x, g, b)


def test_shape_op_grads():
    a = rand(2, 3, 4)
    w = np.random.default_rng(5).normal(size=(4, 3, 2))
    check(lambda: tsum(a.transpose(2, 1, 0) * w) + tsum(swapaxes(a, 0, 2).reshape(4, 6)), a)
    c = rand(1, 4)
    check(lambda: tsum(broadcast_to(c, (3, 4)) * np.arange(12.0).reshape(3, 4)), c)


def test_getitem_fancy_and_basic():
    a = rand(5, 3)
    idx = np.array([0, 2, 2, 4])
    check(lambda: tsum(getitem(a, idx) * np.arange(12.0).reshape(4, 3)) + tsum(a[1:3] * 2.0), a)


def test_take_scatter_concat():
    a = rand(6, 2)
    rows = np.array([1, 4, 5])
    check(lambda: tsum(scatter_rows(6, rows, take_rows(a, rows) * 3.0) * np.arange(12.0).reshape(6, 2)), a)
    b = rand(2, 2, seed=3)
    check(lambda: tsum(concat([a, b], axis=0) * np.arange(16.0).reshape(8, 2)), a, b)


def test_l2_normalize_unit_norm_and_grad():
    a = rand(4, 7)
    out = l2_normalize(a)
    np.testing.assert_allclose(np.linalg.norm(out.data, axis=-1), 1.0, atol=1e-12)
    w = np.random.default_rng(1).normal(size=(4, 7))
    check(lambda: tsum(l2_normalize(a) * w), a)


def test_minimum_clamps_gradient():
    a = parameter(np.array([1.0, 5.0]))
    tsum(minimum(a, 2.0)).backward()
    np.testing.assert_array_equal(a.grad, [1.0, 0.0])


def test_mean_reduction_grad():
    a = rand(3, 4)
    check(lambda: mean(a, axis=1).sum() + mean(a), a)


def test_grad_accumulates_across_uses():
    a = parameter(np.array(3.0))
    (a * a + a).backward()
    assert a.grad == pytest.approx(7.0)


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        (rand(2) * 2.0).backward()


def test_matmul_dimension_error():
    with pytest.raises(DimensionError):
        rand(2, 3) @ rand(4, 2)


def test_log_domain_error():
    with pytest.raises(DomainError):
        log(Tensor(np.array([1.0, 0.0])))


def test_no_grad_builds_no_graph():
    a = rand(3)
    with no_grad():
        b = a * 2.0
    assert b._parents == () and not b.requires_grad


def test_softmax_shift_invariance_and_stability():
    x = np.array([[1000.0, 1001.0, 999.0]])
    s = softmax(Tensor(x)).data
    assert np.isfinite(s).all()
    np.testing.assert_allclose(s, softmax(Tensor(x - 1000.0)).data, atol=1e-15)


def test_grad_check_helper_agrees():
    a, b = rand(3, 4), rand(4, 2, seed=1)
    assert grad_check(lambda: tsum(gelu(a @ b)), [a, b]) < 1e-7


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_unbroadcast_property(n, m, seed):
    a = rand(n, m, seed=seed)
    b = rand(1, m, seed=seed + 1)
    tsum(a * b).backward()
    np.testing.assert_allclose(b.grad, a.data.sum(axis=0, keepdims=True), atol=1e-12)
    np.testing.assert_allclose(a.grad, np.broadcast_to(b.data, (n, m)), atol=1e-12)


def test_elementwise_examples():
    from suede.tensor import add, exp, square

    np.testing.assert_array_equal(add(Tensor(np.array([1.0, 2.0])), Tensor(np.array([3.0, 4.0]))).data, [4, 6])
    np.testing.assert_array_equal(exp(Tensor(np.zeros(3))).data, [1, 1, 1])
    assert square(log(exp(Tensor(np.array([2.0]))))).data[0] == pytest.approx(4.0, abs=1e-12)


def test_matmul_examples_and_triple_loop_oracle():
    m = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal((Tensor(np.eye(2)) @ m).data, m.data)
    assert (Tensor(np.array([[1.0, 0.0]])) @ Tensor(np.array([[0.0], [5.0]]))).data.tolist() == [[0.0]]
    rng = np.random.default_rng(8)
    for n, k, p in [(3, 4, 2), (8, 8, 8), (1, 7, 5)]:
        a, b = rng.normal(size=(n, k)), rng.normal(size=(k, p))
        ref = [[sum(a[i, t] * b[t, j] for t in range(k)) for j in range(p)] for i in range(n)]
        np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, ref, atol=1e-12, rtol=0)


def test_softmax_examples():
    from decimal import Decimal, getcontext

    np.testing.assert_allclose(softmax(Tensor(np.zeros(4))).data, 0.25, atol=1e-15)
    big = softmax(Tensor(np.array([1000.0, 0.0]))).data
    assert big[0] == 1.0 and big[1] < 1e-300 and np.isfinite(big).all()
    getcontext().prec = 40
    den = sum(Decimal(v).exp() for v in (1, 2, 3))
    ref = [float(Decimal(v).exp() / den) for v in (1, 2, 3)]
    np.testing.assert_allclose(softmax(Tensor(np.array([1.0, 2.0, 3.0]))).data, ref, rtol=1e-15)


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_array_equal(layer_norm(Tensor(np.full(4, 3.0)), one, zero).data, 0.0)
    out = layer_norm(Tensor(np.array([1.0, -1.0])), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(out, [1, -1], atol=1e-5)
    x = np.random.default_rng(4).normal(3.0, 5.0, size=(5, 16))
    y = layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-6)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-6)


def test_simple_backward_examples():
    x = parameter(np.random.default_rng(0).normal(size=(2, 3)))
    tsum(x).backward()
    np.testing.assert_array_equal(x.grad, 1.0)
    y = parameter(np.array([3.0]))
    tsum(y * y).backward()
    np.testing.assert_array_equal(y.grad, [6.0])


def test_grad_check_quadratic_and_softmax_ce():
    a = rand(4)
    assert grad_check(lambda: tsum(a * a * 0.5 + a * 3.0), [a]) < 1e-9
    z = rand(3, 5, seed=2)
    target = np.eye(5)[[0, 3, 1]]
    assert grad_check(lambda: (logsumexp(z, axis=-1) - tsum(z * target, axis=-1)).sum(), [z]) < 1e-6


def test_grad_check_through_sue_layer_with_guard():
    from suede.moe import ExpertFfn, SueLayer
    from suede.rng import SplitMix64

    rng = SplitMix64(5)
    layer = SueLayer.from_base(ExpertFfn(rng.child("b"), 6, 12), rng.child("s"), 4, 2)
    for p in layer.parameters():
        p.data *= 20.0
    x = Tensor(np.random.default_rng(6).normal(size=(5, 6)))
    w = np.random.default_rng(7).normal(size=(5, 6))

    def f():
        return tsum(layer(x)[0] * w)

    def guard():
        return layer(x)[1].selected.tobytes()

    assert grad_check(f, layer.parameters(), guard=guard) < 1e-4
