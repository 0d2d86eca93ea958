"""Finite-difference checks for every differentiation primitive."""

import numpy as np
import pytest

from wavunits.autodiff import (
    Tensor,
    gelu,
    layer_norm,
    log_softmax,
    logsumexp,
    softmax,
    take_pairs,
)


def numeric_grad(fn, arrays, index, h=1e-6):
    """Central finite differences of scalar fn w.r.t. arrays[index]."""
    base = [a.copy() for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    while not it.finished:
        ix = it.multi_index
        orig = target[ix]
        target[ix] = orig + h
        up = fn(*base)
        target[ix] = orig - h
        down = fn(*base)
        target[ix] = orig
        grad[ix] = (up - down) / (2 * h)
        it.iternext()
    return grad


def check_grads(builder, *shapes, seed=0, rtol=1e-6, atol=1e-8, positive=False):
    """builder maps Tensors -> scalar Tensor; compare grads against FD."""
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]
    if positive:
        arrays = [np.abs(a) + 0.5 for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = builder(*tensors)
    out.backward()

    def scalar_fn(*arrs):
        return float(builder(*[Tensor(a) for a in arrs]).data)

    for i, t in enumerate(tensors):
        fd = numeric_grad(scalar_fn, arrays, i)
        np.testing.assert_allclose(t.grad, fd, rtol=rtol, atol=atol)


class TestPrimitives:
    def test_add_broadcast(self):
        check_grads(lambda a, b: ((a + b) * (a + b)).sum(), (3, 4), (4,))

    def test_mul_broadcast(self):
        check_grads(lambda a, b: (a * b).sum(), (3, 4), (3, 1))

    def test_sub_neg_div(self):
        check_grads(lambda a, b: ((a - b) / (b * b + 1.0)).sum(), (5,), (5,))

    def test_pow(self):
        check_grads(lambda a: (a ** 3.0).sum(), (4, 2))

    def test_matmul_2d(self):
        check_grads(lambda a, b: (a @ b).sum(), (3, 4), (4, 2))

    def test_matmul_batched(self):
        check_grads(lambda a, b: ((a @ b) * (a @ b)).sum(), (2, 3, 4), (2, 4, 3))

    def test_reshape_transpose(self):
        check_grads(lambda a: (a.reshape(6, 2).transpose(1, 0) ** 2.0).sum(), (3, 4))

    def test_getitem_slice(self):
        check_grads(lambda a: (a[1:, :2] * a[:-1, 1:3]).sum(), (4, 4))

    def test_sum_axis_keepdims(self):
        check_grads(lambda a: (a - a.sum(axis=1, keepdims=True)).sum(), (3, 5))

    def test_mean(self):
        check_grads(lambda a: (a.mean(axis=0) ** 2.0).sum(), (6, 3))

    def test_exp_log_sqrt(self):
        check_grads(lambda a: (a.exp().log() * a.sqrt()).sum(), (7,), positive=True)

    def test_erf(self):
        check_grads(lambda a: a.erf().sum(), (9,))

    def test_softplus(self):
        check_grads(lambda a: a.softplus().sum(), (9,))

    def test_take_pairs(self):
        rows = np.array([0, 1, 2, 2])
        cols = np.array([1, 0, 3, 3])
        check_grads(lambda a: (take_pairs(a, rows, cols) ** 2.0).sum(), (3, 4))


class TestComposites:
    def test_gelu(self):
        check_grads(lambda a: gelu(a).sum(), (8,))

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((5, 7)))
        rows = softmax(x).data.sum(axis=1)
        np.testing.assert_allclose(rows, 1.0, atol=1e-12)

    def test_softmax_grad(self):
        check_grads(lambda a: (softmax(a) ** 2.0).sum(), (4, 5))

    def test_log_softmax_matches_log_of_softmax(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((4, 6)) * 10
        np.testing.assert_allclose(
            log_softmax(Tensor(x)).data, np.log(softmax(Tensor(x)).data), atol=1e-12
        )

    def test_log_softmax_grad(self):
        check_grads(lambda a: (log_softmax(a) * log_softmax(a)).sum(), (3, 6))

    def test_logsumexp_grad(self):
        check_grads(lambda a: logsumexp(a, axis=1).sum(), (4, 5))

    def test_logsumexp_value(self):
        x = np.array([[1000.0, 1000.0]])
        out = logsumexp(Tensor(x), axis=1)
        np.testing.assert_allclose(out.data, 1000.0 + np.log(2.0))

    def test_layer_norm_grad(self):
        check_grads(
            lambda x, g, b: (layer_norm(x, g, b) ** 2.0).sum(),
            (4, 6), (6,), (6,),
        )

    def test_layer_norm_stats(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((10, 16)) * 5 + 2)
        ones = Tensor(np.ones(16))
        zeros = Tensor(np.zeros(16))
        out = layer_norm(x, ones, zeros, eps=0.0).data
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.std(axis=1), 1.0, atol=1e-10)


class TestGraphMechanics:
    def test_grad_accumulates_across_reuse(self):
        a = Tensor(np.array([2.0, 3.0]), requires_grad=True)
        out = (a * a + a).sum()
        out.backward()
        np.testing.assert_allclose(a.grad, 2 * a.data + 1)

    def test_no_grad_without_flag(self):
        a = Tensor(np.array([1.0]))
        out = (a * 2.0).sum()
        out.backward()
        assert a.grad is None

    def test_backward_requires_scalar(self):
        a = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ValueError):
            (a * 1.0).backward()

    def test_detach_blocks_gradient(self):
        a = Tensor(np.array([4.0]), requires_grad=True)
        out = (a.detach() * a).sum()
        out.backward()
        np.testing.assert_allclose(a.grad, 4.0)
