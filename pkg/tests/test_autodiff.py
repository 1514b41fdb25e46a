import numpy as np
import pytest

from settransport import autodiff as ad
from settransport import numerics


def fd_grad(fn, x, idx, h=1e-6):
    plus = x.copy()
    plus[idx] += h
    minus = x.copy()
    minus[idx] -= h
    return (fn(plus) - fn(minus)) / (2 * h)


def grad_of(builder, x):
    leaf = ad.Var(x)
    ad.backward(builder(leaf))
    return leaf.grad


class TestVar:
    def test_wraps_float64(self):
        v = ad.Var(np.array([1, 2], dtype=np.int32))
        assert v.value.dtype == np.float64

    def test_numpy_cannot_hijack(self):
        v = ad.Var(np.ones(3))
        with pytest.raises(TypeError):
            np.add(v, np.ones(3))

    def test_val_passthrough(self):
        x = np.ones(2)
        assert ad.val(x) is x
        assert ad.val(ad.Var(x)) is not None


class TestGradients:
    """Spot finite-difference checks; the verify suite sweeps all ops."""

    def test_mul_exp_chain(self):
        rng = numerics.rng_from_seed(0)
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((3, 4))

        def builder(v):
            return ad.sum_(ad.mul(ad.exp(v), w))

        def plain(v):
            return float(np.sum(np.exp(v) * w))

        g = grad_of(builder, x)
        for idx in [(0, 0), (1, 2), (2, 3)]:
            assert g[idx] == pytest.approx(fd_grad(plain, x, idx), rel=1e-6)

    def test_matmul_both_sides(self):
        rng = numerics.rng_from_seed(1)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        la, lb = ad.Var(a), ad.Var(b)
        ad.backward(ad.sum_(ad.matmul(la, lb)))
        # d/dA sum(AB) = 1 B^T, d/dB = A^T 1
        ones = np.ones((3, 2))
        assert np.allclose(la.grad, ones @ b.T, atol=1e-12)
        assert np.allclose(lb.grad, a.T @ ones, atol=1e-12)

    def test_batched_matmul_broadcast(self):
        rng = numerics.rng_from_seed(2)
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((4, 5))

        def plain(v):
            return float(np.sum(a @ v))

        g = grad_of(lambda v: ad.sum_(ad.matmul(a, v)), b)
        assert g.shape == b.shape
        for idx in [(0, 0), (3, 4), (2, 2)]:
            assert g[idx] == pytest.approx(fd_grad(plain, b, idx), rel=1e-6)

    def test_logsumexp_grad_is_softmax(self):
        rng = numerics.rng_from_seed(3)
        x = rng.standard_normal((2, 5))
        g = grad_of(lambda v: ad.sum_(ad.logsumexp(v, axis=-1)), x)
        soft = np.exp(x - x.max(axis=1, keepdims=True))
        soft /= soft.sum(axis=1, keepdims=True)
        assert np.allclose(g, soft, atol=1e-12)

    def test_diamond_accumulates(self):
        x = np.array([2.0])
        leaf = ad.Var(x)
        y = ad.mul(leaf, leaf)       # x^2
        z = ad.add(y, y)             # 2 x^2 -> dz/dx = 4x
        ad.backward(ad.sum_(z))
        assert leaf.grad[0] == pytest.approx(8.0, abs=1e-12)

    def test_broadcast_add_unbroadcasts(self):
        a = ad.Var(np.zeros((3, 4)))
        b = ad.Var(np.zeros(4))
        ad.backward(ad.sum_(ad.add(a, b)))
        assert a.grad.shape == (3, 4)
        assert b.grad.shape == (4,)
        assert np.array_equal(b.grad, np.full(4, 3.0))

    def test_getitem_advanced_accumulates_repeats(self):
        x = ad.Var(np.arange(5.0))
        picked = ad.getitem(x, np.array([1, 1, 3]))
        ad.backward(ad.sum_(picked))
        assert np.array_equal(x.grad, np.array([0.0, 2.0, 0.0, 1.0, 0.0]))

    def test_getitem_slice(self):
        x = ad.Var(np.arange(12.0).reshape(3, 4))
        ad.backward(ad.sum_(ad.getitem(x, (slice(1, 3), slice(0, 2)))))
        want = np.zeros((3, 4))
        want[1:3, 0:2] = 1.0
        assert np.array_equal(x.grad, want)

    def test_concatenate_splits_gradient(self):
        a = ad.Var(np.zeros((2, 3)))
        b = ad.Var(np.zeros((1, 3)))
        out = ad.concatenate([a, b], axis=0)
        ad.backward(ad.sum_(ad.mul(out, np.arange(9.0).reshape(3, 3))))
        assert np.array_equal(a.grad, np.arange(6.0).reshape(2, 3))
        assert np.array_equal(b.grad, np.array([[6.0, 7.0, 8.0]]))

    def test_pad2d_pads_last_two_axes_only(self):
        x = np.ones((2, 3, 4, 5))
        out = ad.pad2d(x, 1)
        assert ad.val(out).shape == (2, 3, 6, 7)
        leaf = ad.Var(x)
        ad.backward(ad.sum_(ad.pad2d(leaf, 1)))
        assert np.array_equal(leaf.grad, np.ones_like(x))

    def test_maximum_routes_to_winner(self):
        x = ad.Var(np.array([-1.0, 2.0]))
        ad.backward(ad.sum_(ad.maximum(x, 0.0)))
        assert np.array_equal(x.grad, np.array([0.0, 1.0]))

    def test_mean_with_axis(self):
        x = ad.Var(np.ones((2, 4)))
        ad.backward(ad.sum_(ad.mean(x, axis=1)))
        assert np.allclose(x.grad, np.full((2, 4), 0.25), atol=0)

    def test_seed_grad_for_tensor_root(self):
        x = ad.Var(np.ones((2, 2)))
        out = ad.mul(x, 3.0)
        seed = np.array([[1.0, 0.0], [0.0, 2.0]])
        ad.backward(out, seed)
        assert np.array_equal(x.grad, 3.0 * seed)

    def test_ops_run_on_plain_arrays(self):
        # dispatch path without Vars returns ndarrays, no tape
        out = ad.matmul(np.ones((2, 3)), np.ones((3, 2)))
        assert isinstance(out, np.ndarray)
        assert np.array_equal(out, np.full((2, 2), 3.0))


class TestMacCounting:
    def test_matmul_counts_out_times_contracted(self):
        with ad.count_macs() as counter:
            ad.matmul(np.ones((3, 4)), np.ones((4, 5)))
        assert counter.total == 3 * 5 * 4

    def test_batched_matmul(self):
        with ad.count_macs() as counter:
            ad.matmul(np.ones((2, 3, 4)), np.ones((2, 4, 5)))
        assert counter.total == 2 * 3 * 5 * 4

    def test_logsumexp_counts_inputs(self):
        with ad.count_macs() as counter:
            ad.logsumexp(np.ones((3, 4)), axis=-1)
        assert counter.total == 12

    def test_elementwise_is_free(self):
        x = np.ones((10, 10))
        with ad.count_macs() as counter:
            ad.add(x, x)
            ad.mul(x, x)
            ad.exp(x)
            ad.sum_(x)
        assert counter.total == 0

    def test_inactive_outside_context(self):
        with ad.count_macs() as counter:
            ad.matmul(np.ones((2, 2)), np.ones((2, 2)))
        before = counter.total
        ad.matmul(np.ones((8, 8)), np.ones((8, 8)))
        assert counter.total == before

    def test_nested_counters_both_tally(self):
        with ad.count_macs() as outer:
            ad.matmul(np.ones((2, 2)), np.ones((2, 2)))
            with ad.count_macs() as inner:
                ad.matmul(np.ones((2, 2)), np.ones((2, 2)))
        assert inner.total == 8
        assert outer.total == 16

    def test_counts_vars_too(self):
        with ad.count_macs() as counter:
            ad.matmul(ad.Var(np.ones((3, 4))), np.ones((4, 5)))
        assert counter.total == 60
