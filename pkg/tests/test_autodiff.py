import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gode import autodiff as ad
from conftest import check_grads, rel_err


def leaf(shape, rng, low=-1.0, high=1.0):
    return ad.parameter(rng.uniform(low, high, size=shape))


class TestPrimitiveValues:
    def test_add(self):
        np.testing.assert_array_equal(ad.add(ad.Tensor([1.0, 2.0]), ad.Tensor([3.0, 4.0])).data, [4.0, 6.0])

    def test_matmul_identity(self):
        a = np.random.default_rng(0).normal(size=(3, 3))
        np.testing.assert_array_equal(ad.matmul(ad.Tensor(np.eye(3)), ad.Tensor(a)).data, a)

    def test_reduce_sum_ones(self):
        assert ad.reduce_sum(ad.Tensor(np.ones((2, 3)))).item() == 6.0

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ad.ShapeError, match=r"\(2,\).*\(3,\)"):
            ad.add(ad.Tensor(np.ones(2)), ad.Tensor(np.ones(3)))
        with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))

    def test_overflow_is_an_error(self):
        with pytest.raises(ad.NonFiniteError):
            ad.exp(ad.Tensor([1000.0]))
        with pytest.raises(ad.NonFiniteError):
            ad.log(ad.Tensor([0.0]))

    def test_pad_and_slice(self):
        x = ad.Tensor(np.arange(4.0).reshape(2, 2))
        p = ad.pad(x, [(1, 0), (0, 2)])
        assert p.shape == (3, 4)
        np.testing.assert_array_equal(ad.getitem(p, (slice(1, 3), slice(0, 2))).data, x.data)

    def test_precision_modes(self):
        with ad.precision("f32"):
            assert ad.Tensor([1.0]).data.dtype == np.float32
        assert ad.Tensor([1.0]).data.dtype == np.float64
        with pytest.raises(ValueError):
            ad.set_precision("f16")


class TestBackward:
    def test_square_sum(self):
        w = ad.parameter([1.0, 2.0, 3.0])
        ad.backward(ad.reduce_sum(ad.mul(w, w)))
        np.testing.assert_array_equal(w.grad, [2.0, 4.0, 6.0])

    def test_constant_loss_is_noop(self):
        c = ad.Tensor(3.0)
        ad.backward(c)
        assert c.grad is None

    def test_non_scalar_rejected(self):
        w = ad.parameter([1.0, 2.0])
        with pytest.raises(ValueError):
            ad.backward(ad.mul(w, w))

    def test_second_call_rejected(self):
        w = ad.parameter([1.0, 2.0])
        loss = ad.reduce_sum(ad.mul(w, w))
        ad.backward(loss)
        with pytest.raises(RuntimeError):
            ad.backward(loss)

    def test_fan_out_accumulates(self):
        # w used by three operations receives the sum of three contributions
        w = ad.parameter([1.5])
        loss = ad.reduce_sum(ad.add(ad.add(w, ad.scale(w, 2.0)), ad.mul(w, w)))
        ad.backward(loss)
        np.testing.assert_allclose(w.grad, [1 + 2 + 2 * 1.5])

    def test_tape_is_in_execution_order(self):
        w = ad.parameter([1.0])
        a = ad.scale(w, 2.0)
        b = ad.exp(a)
        c = ad.add(b, a)
        tape = ad.Tape.collect(c)
        assert [r[1] for r in tape.records] == [a, b, c]
        assert [r[1] for r in tape.reversed()] == [c, b, a]

    def test_no_grad_records_nothing(self):
        w = ad.parameter([1.0])
        with ad.no_grad():
            y = ad.mul(w, w)
        assert y.is_leaf and not y.requires_grad

    def test_matmul_chain_vs_finite_differences(self):
        rng = np.random.default_rng(3)
        a, b, c = leaf((3, 4), rng), leaf((4, 5), rng), leaf((5, 2), rng)
        err = check_grads(lambda: ad.reduce_sum(ad.exp(ad.matmul(ad.matmul(a, b), c))), [a, b, c])
        assert err < 1e-6

    def test_linearity(self):
        rng = np.random.default_rng(5)
        x0 = rng.normal(size=(3, 3))

        def grad_of(build):
            x = ad.parameter(x0)
            ad.backward(build(x))
            return x.grad

        f = lambda x: ad.reduce_sum(ad.exp(ad.scale(x, 0.5)))
        g = lambda x: ad.reduce_sum(ad.mul(x, ad.matmul(x, x)))
        a, b = 1.7, -0.3
        combo = grad_of(lambda x: ad.add(ad.scale(f(x), a), ad.scale(g(x), b)))
        np.testing.assert_allclose(combo, a * grad_of(f) + b * grad_of(g), rtol=0, atol=1e-12)

    def test_deterministic_forward(self):
        rng1, rng2 = np.random.default_rng(9), np.random.default_rng(9)
        x1 = ad.Tensor(rng1.normal(size=(2, 3, 6, 6)))
        x2 = ad.Tensor(rng2.normal(size=(2, 3, 6, 6)))
        w = ad.Tensor(np.random.default_rng(1).normal(size=(4, 3, 3, 3)))
        assert ad.conv2d(x1, w, padding=1).data.tobytes() == ad.conv2d(x2, w, padding=1).data.tobytes()


class TestFiniteDifference:
    def test_square(self):
        x = ad.Tensor([1.0, -1.0])
        fd = ad.finite_difference_grad(lambda t: ad.reduce_sum(ad.mul(t, t)), x, 1e-4)
        np.testing.assert_allclose(fd, [2.0, -2.0], atol=1e-8)

    def test_exp_at_zero(self):
        fd = ad.finite_difference_grad(lambda t: ad.reduce_sum(ad.exp(t)), ad.Tensor([0.0]), 1e-4)
        np.testing.assert_allclose(fd, [1.0], atol=1e-8)

    def test_nonfinite_rejected(self):
        with pytest.raises(ad.NonFiniteError):
            ad.finite_difference_grad(lambda t: ad.Tensor(np.inf * t.data.sum()), ad.Tensor([1.0]), 1e-4)


# one scalar-valued builder per primitive; inputs avoid kinks and poles
def _away_from_zero(rng, shape):
    x = rng.uniform(0.05, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


PRIMITIVES = {
    "add": lambda r: ([leaf((3, 4), r), leaf((1, 4), r)], lambda a, b: ad.add(a, b)),
    "sub": lambda r: ([leaf((3, 4), r), leaf((3, 1), r)], lambda a, b: ad.sub(a, b)),
    "mul": lambda r: ([leaf((2, 3), r), leaf((2, 3), r)], lambda a, b: ad.mul(a, b)),
    "div": lambda r: ([leaf((2, 3), r), ad.parameter(r.uniform(0.5, 2.0, (2, 3)))], lambda a, b: ad.div(a, b)),
    "scale": lambda r: ([leaf((5,), r)], lambda a: ad.scale(a, -2.5)),
    "matmul": lambda r: ([leaf((3, 4), r), leaf((4, 2), r)], lambda a, b: ad.matmul(a, b)),
    "reshape": lambda r: ([leaf((2, 6), r)], lambda a: ad.reshape(a, (3, 4))),
    "transpose": lambda r: ([leaf((2, 3, 4), r)], lambda a: ad.transpose(a, (2, 0, 1))),
    "pad": lambda r: ([leaf((2, 3), r)], lambda a: ad.pad(a, [(1, 2), (0, 1)])),
    "slice": lambda r: ([leaf((4, 5), r)], lambda a: ad.getitem(a, (slice(1, 3), slice(None, None, 2)))),
    "reduce_sum": lambda r: ([leaf((3, 4), r)], lambda a: ad.reduce_sum(a, axis=1)),
    "reduce_mean": lambda r: ([leaf((3, 4), r)], lambda a: ad.reduce_mean(a, axis=0, keepdims=True)),
    "max": lambda r: ([ad.parameter(r.permutation(12).reshape(3, 4) * 0.1)], lambda a: ad.reduce_max(a, axis=1)),
    "exp": lambda r: ([leaf((6,), r)], lambda a: ad.exp(a)),
    "log": lambda r: ([ad.parameter(r.uniform(0.2, 2.0, (6,)))], lambda a: ad.log(a)),
    "relu": lambda r: ([ad.parameter(_away_from_zero(r, (8,)))], lambda a: ad.relu(a)),
    "concat": lambda r: ([leaf((2, 3), r), leaf((2, 1), r)], lambda a, b: ad.concat([a, b], axis=1)),
    "lincomb": lambda r: ([leaf((2, 2), r), leaf((2, 2), r), leaf((2, 2), r)],
                          lambda a, b, c: ad.lincomb([0.2, 0.5, 0.3], [a, b, c])),
    "log_softmax": lambda r: ([leaf((3, 5), r)], lambda a: ad.log_softmax(a, axis=1)),
    "conv2d": lambda r: ([leaf((2, 2, 5, 5), r), leaf((3, 2, 3, 3), r), leaf((3,), r)],
                         lambda x, w, b: ad.conv2d(x, w, b, stride=2, padding=1)),
    "group_norm": lambda r: ([leaf((2, 4, 3, 3), r), ad.parameter(r.uniform(0.5, 1.5, 4)), leaf((4,), r)],
                             lambda x, g, b: ad.group_norm(x, 2, g, b)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_100_seeds(name):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        leaves, op = PRIMITIVES[name](rng)
        # random projection makes the loss sensitive to every output entry
        proj = rng.normal(size=op(*leaves).shape)
        loss = lambda: ad.reduce_sum(ad.mul(op(*leaves), ad.Tensor(proj)))
        worst = max(worst, check_grads(loss, leaves))
    assert worst < 1e-5, f"{name}: max relative error {worst:.2e}"


@settings(max_examples=50, deadline=None)
@given(
    shape=st.tuples(st.integers(1, 4), st.integers(1, 4)),
    seed=st.integers(0, 2**31 - 1),
)
def test_broadcast_add_grad_shapes(shape, seed):
    rng = np.random.default_rng(seed)
    a = ad.parameter(rng.normal(size=shape))
    b = ad.parameter(rng.normal(size=(1, shape[1])))
    ad.backward(ad.reduce_sum(ad.add(a, b)))
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    np.testing.assert_allclose(b.grad, np.full((1, shape[1]), shape[0]))
