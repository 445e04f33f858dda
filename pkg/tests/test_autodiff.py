import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snnmaml import autodiff as ad
from snnmaml.errors import StructuralError

from helpers import assert_grad_close, central_diff


def leaf(values, grad=True):
    return ad.tensor(values, requires_grad=grad)


class TestMakeNode:
    def test_constant(self):
        n = ad.make_node([2], [1, 2])
        np.testing.assert_array_equal(n.value, [1.0, 2.0])
        assert not n.requires_grad and n.is_leaf

    def test_scalar(self):
        n = ad.make_node([], [3.0])
        assert n.shape == () and n.item() == 3.0

    def test_length_mismatch(self):
        with pytest.raises(StructuralError):
            ad.make_node([2], [1, 2, 3])

    def test_float32_selectable(self):
        with ad.default_dtype("f32"):
            n = ad.make_node([2], [1, 2])
        assert n.dtype == np.float32
        assert ad.make_node([2], [1, 2]).dtype == np.float64


class TestElementwise:
    def test_add(self):
        out = ad.elementwise("add", ad.tensor([1, 2]), ad.tensor([3, 4]))
        np.testing.assert_array_equal(out.value, [4, 6])

    def test_square_gradient(self):
        x = leaf(3.0)
        (g,) = ad.backward(ad.mul(x, x), [x])
        assert g.item() == 6.0

    @pytest.mark.parametrize("x0, value, slope", [(-2.0, 2.0, -1.0), (0.0, 0.0, 0.0), (1.5, 1.5, 1.0)])
    def test_abs(self, x0, value, slope):
        x = leaf(x0)
        y = ad.abs(x)
        assert y.item() == value
        assert ad.grad(y, x).item() == slope

    def test_sign_has_zero_derivative(self):
        x = leaf([-1.0, 0.0, 2.0])
        y = ad.sum(ad.mul(ad.sign(x), x))
        np.testing.assert_array_equal(ad.grad(y, x).value, [-1.0, 0.0, 1.0])
        np.testing.assert_array_equal(ad.sign(x).value, [-1, 0, 1])

    def test_broadcast(self):
        a = leaf(np.ones((2, 3)))
        b = leaf([1.0, 2.0, 3.0])
        out = ad.sum(ad.mul(a, b))
        ga, gb = ad.backward(out, [a, b])
        np.testing.assert_array_equal(ga.value, [[1, 2, 3], [1, 2, 3]])
        np.testing.assert_array_equal(gb.value, [2, 2, 2])

    def test_incompatible_shapes(self):
        with pytest.raises(StructuralError):
            ad.add(ad.tensor([1, 2]), ad.tensor([1, 2, 3]))

    def test_div_by_zero_propagates(self):
        out = ad.div(ad.tensor([1.0]), ad.tensor([0.0]))
        assert np.isinf(out.value[0])

    def test_clamp_min(self):
        x = leaf([-1.0, 2.0])
        y = ad.clamp_min(x, 0.0)
        np.testing.assert_array_equal(y.value, [0.0, 2.0])
        np.testing.assert_array_equal(ad.grad(ad.sum(y), x).value, [0.0, 1.0])

    def test_scale_and_dispatch(self):
        x = leaf([1.0, -2.0])
        y = ad.elementwise("scale", x, 3.0)
        np.testing.assert_array_equal(y.value, [3.0, -6.0])
        with pytest.raises(StructuralError):
            ad.elementwise("bogus", x)


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(ad.tensor([[1, 0], [0, 1]]), ad.tensor([[5], [7]]))
        np.testing.assert_array_equal(out.value, [[5], [7]])

    def test_arithmetic(self):
        out = ad.matmul(ad.tensor([[1, 2]]), ad.tensor([[3], [4]]))
        np.testing.assert_array_equal(out.value, [[11]])

    def test_linearity_gradient(self):
        a = leaf([[2.0, 5.0]])
        out = ad.sum(ad.matmul(a, ad.tensor([[1.0], [1.0]])))
        np.testing.assert_array_equal(ad.grad(out, a).value, [[1.0, 1.0]])

    def test_mismatch(self):
        with pytest.raises(StructuralError):
            ad.matmul(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((2, 3))))

    def test_gradients_vs_fd(self):
        rng = np.random.default_rng(0)
        a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        a, b = leaf(a0), leaf(b0)
        y = ad.matmul(a, b)
        ga, gb = ad.backward(ad.sum(ad.mul(y, y)), [a, b])
        assert_grad_close(ga.value, central_diff(lambda v: float(np.sum((v @ b0) ** 2)), a0))
        assert_grad_close(gb.value, central_diff(lambda v: float(np.sum((a0 @ v) ** 2)), b0))


class TestConv2d:
    def test_sum_of_ones(self):
        out = ad.conv2d(ad.tensor(np.ones((1, 1, 3, 3))), ad.tensor(np.ones((1, 1, 3, 3))),
                        ad.tensor([0.0]))
        np.testing.assert_array_equal(out.value, [[[[9.0]]]])

    def test_delta_kernel_is_identity(self):
        x = np.random.default_rng(1).normal(size=(2, 1, 6, 7))
        k = np.zeros((1, 1, 5, 5))
        k[0, 0, 2, 2] = 1
        out = ad.conv2d(ad.tensor(x), ad.tensor(k), padding=2)
        np.testing.assert_array_equal(out.value, x)

    def test_cross_correlation_convention(self):
        x = np.arange(9.0).reshape(1, 1, 3, 3)
        k = np.zeros((1, 1, 2, 2))
        k[0, 0, 0, 1] = 1  # picks the right neighbour, no flip
        out = ad.conv2d(ad.tensor(x), ad.tensor(k))
        np.testing.assert_array_equal(out.value[0, 0], [[1, 2], [4, 5]])

    def test_output_size(self):
        out = ad.conv2d(ad.tensor(np.ones((1, 2, 9, 8))), ad.tensor(np.ones((3, 2, 3, 3))),
                        stride=2, padding=1)
        assert out.shape == (1, 3, 5, 4)

    def test_bias_gradient_fd(self):
        rng = np.random.default_rng(2)
        x0 = rng.normal(size=(2, 1, 4, 4))
        k0 = rng.normal(size=(3, 1, 3, 3))
        b0 = rng.normal(size=3)
        bias = leaf(b0)
        out = ad.conv2d(ad.tensor(x0), ad.tensor(k0), bias)
        g = ad.grad(ad.sum(out), bias).value

        def f(b):
            return float(ad.sum(ad.conv2d(ad.tensor(x0), ad.tensor(k0), ad.tensor(b))).value)

        numeric = central_diff(f, b0)
        assert_grad_close(g, numeric)
        # H'·W'·B = 2·2·2
        np.testing.assert_allclose(numeric, 8.0, rtol=1e-8)

    def test_all_gradients_fd(self):
        rng = np.random.default_rng(3)
        x0 = rng.normal(size=(2, 2, 5, 4))
        k0 = rng.normal(size=(3, 2, 3, 3))
        b0 = rng.normal(size=3)
        w = rng.normal(size=(2, 3, 5, 4))

        def loss(x, k, b):
            return ad.sum(ad.mul(ad.conv2d(x, k, b, padding=1), ad.tensor(w)))

        x, k, b = leaf(x0), leaf(k0), leaf(b0)
        gx, gk, gb = ad.backward(loss(x, k, b), [x, k, b])
        assert_grad_close(gx.value, central_diff(lambda v: loss(ad.tensor(v), ad.tensor(k0), ad.tensor(b0)).item(), x0))
        assert_grad_close(gk.value, central_diff(lambda v: loss(ad.tensor(x0), ad.tensor(v), ad.tensor(b0)).item(), k0))
        assert_grad_close(gb.value, central_diff(lambda v: loss(ad.tensor(x0), ad.tensor(k0), ad.tensor(v)).item(), b0))

    def test_second_order_fd(self):
        # d/dk of sum((d loss/dx)^2) checks the vjp of the input gradient
        rng = np.random.default_rng(4)
        x0 = rng.normal(size=(1, 2, 4, 4))
        k0 = rng.normal(size=(2, 2, 3, 3))

        def inner_sq(k_node, x_node):
            y = ad.conv2d(x_node, k_node, padding=1)
            gx = ad.grad(ad.sum(ad.mul(y, y)), x_node, create_graph=True)
            return ad.sum(ad.mul(gx, gx))

        k = leaf(k0)
        g = ad.grad(inner_sq(k, leaf(x0)), k).value
        numeric = central_diff(lambda v: inner_sq(ad.tensor(v), leaf(x0)).item(), k0)
        assert_grad_close(g, numeric, rtol=1e-6)

    def test_kernel_too_large(self):
        with pytest.raises(StructuralError):
            ad.conv2d(ad.tensor(np.ones((1, 1, 3, 3))), ad.tensor(np.ones((1, 1, 5, 5))))


class TestMaxpool:
    def test_single_window(self):
        out = ad.maxpool2(ad.tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.value, [[4.0]])

    def test_tie_break_first(self):
        x = leaf([[5.0, 5.0], [5.0, 5.0]])
        out = ad.maxpool2(x)
        assert out.value[0, 0] == 5.0
        np.testing.assert_array_equal(ad.grad(ad.sum(out), x).value, [[1, 0], [0, 0]])

    def test_fd_random(self):
        x0 = np.random.default_rng(5).normal(size=(1, 1, 4, 4))
        w = np.random.default_rng(6).normal(size=(1, 1, 2, 2))
        x = leaf(x0)
        g = ad.grad(ad.sum(ad.mul(ad.maxpool2(x), ad.tensor(w))), x).value
        numeric = central_diff(
            lambda v: ad.sum(ad.mul(ad.maxpool2(ad.tensor(v)), ad.tensor(w))).item(), x0)
        assert_grad_close(g, numeric)

    def test_odd_size_rejected(self):
        with pytest.raises(StructuralError):
            ad.maxpool2(ad.tensor(np.ones((1, 1, 3, 4))))


class TestReduce:
    def test_sum(self):
        assert ad.reduce("sum", ad.tensor([1, 2, 3])).item() == 6

    def test_mean_axis(self):
        out = ad.reduce("mean", ad.tensor([[1, 3], [3, 5]]), 0)
        np.testing.assert_array_equal(out.value, [2, 4])

    def test_max_tie_break(self):
        x = leaf([2.0, 7.0, 7.0])
        out = ad.reduce("max", x)
        assert out.item() == 7.0
        np.testing.assert_array_equal(ad.grad(out, x).value, [0, 1, 0])

    def test_invalid_axis(self):
        with pytest.raises(StructuralError):
            ad.reduce("sum", ad.tensor([1, 2]), 3)


class TestCrossEntropy:
    def test_uniform(self):
        loss = ad.softmax_cross_entropy(ad.tensor([[0.0] * 5]), [2])
        assert math.isclose(loss.item(), math.log(5), rel_tol=1e-12)

    def test_confident(self):
        loss = ad.softmax_cross_entropy(ad.tensor([[10.0, 0.0]]), [0])
        assert math.isclose(loss.item(), math.log1p(math.exp(-10)), rel_tol=1e-10)
        assert math.isclose(loss.item(), 4.54e-5, rel_tol=1e-3)

    def test_uniform_gradient(self):
        logits = leaf([[0.0] * 5])
        g = ad.grad(ad.softmax_cross_entropy(logits, [0]), logits).value
        np.testing.assert_allclose(g, [[-0.8, 0.2, 0.2, 0.2, 0.2]], atol=1e-15)

    def test_target_out_of_range(self):
        with pytest.raises(StructuralError):
            ad.softmax_cross_entropy(ad.tensor([[0.0, 1.0]]), [2])

    def test_hessian_vector_fd(self):
        rng = np.random.default_rng(7)
        z0 = rng.normal(size=(3, 4))
        v = ad.tensor(rng.normal(size=(3, 4)))
        t = np.array([0, 3, 1])

        def grad_dot_v(z):
            g = ad.grad(ad.softmax_cross_entropy(z, t), z, create_graph=True)
            return ad.sum(ad.mul(g, v))

        z = leaf(z0)
        hv = ad.grad(grad_dot_v(z), z).value
        assert_grad_close(hv, central_diff(lambda a: grad_dot_v(leaf(a)).item(), z0), rtol=1e-5)


class TestCustom:
    def test_identity(self):
        ident = ad.register_custom(lambda x: x, lambda x, g: g,
                                   lambda x, g, gg: (np.zeros_like(x), gg))
        x = leaf(2.0)
        g = ad.grad(ident(x), x, create_graph=True)
        assert g.item() == 1.0
        assert ad.grad(g, x).item() == 0.0

    def test_square_matches_builtin(self):
        square = ad.register_custom(lambda x: x * x, lambda x, g: 2 * x * g,
                                    lambda x, g, gg: (2 * g * gg, 2 * x * gg))
        x0 = np.array([-1.5, 0.5, 2.0])
        for op in (square, lambda n: ad.mul(n, n)):
            x = leaf(x0)
            y = ad.sum(ad.mul(op(x), op(x)))
            g = ad.grad(y, x, create_graph=True)
            h = ad.grad(ad.sum(g), x)
            if op is square:
                ref = (g.value, h.value)
            else:
                np.testing.assert_allclose(g.value, ref[0], rtol=1e-14)
                np.testing.assert_allclose(h.value, ref[1], rtol=1e-14)

    def test_missing_second_backward_rejected(self):
        op = ad.register_custom(np.tanh, lambda x, g: g / np.cosh(x) ** 2)
        x = leaf(0.3)
        assert ad.grad(op(x), x).item() == pytest.approx(1 / np.cosh(0.3) ** 2)
        with pytest.raises(StructuralError):
            ad.grad(op(x), x, create_graph=True)


class TestBackward:
    def test_second_derivative(self):
        x = leaf(3.0)
        g = ad.grad(ad.mul(x, x), x, create_graph=True)
        assert g.item() == 6.0 and g.requires_grad
        assert ad.grad(g, x).item() == 2.0

    def test_constant_loss(self):
        c = ad.tensor([1.0, 2.0])
        w = leaf([0.5, 0.5])
        (g,) = ad.backward(ad.sum(c), [w])
        np.testing.assert_array_equal(g.value, [0.0, 0.0])

    def test_unreachable_exactly_zero(self):
        a, b = leaf([1.0, 2.0]), leaf(np.ones((2, 2)))
        ga, gb = ad.backward(ad.sum(ad.exp(a)), [a, b])
        assert np.all(gb.value == 0) and gb.shape == (2, 2)

    def test_non_scalar_rejected(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(StructuralError):
            ad.backward(x * 2.0, [x])

    def test_dict_wrt(self):
        x = leaf(2.0)
        grads = ad.backward(ad.mul(x, x), {"x": x})
        assert grads["x"].item() == 4.0

    def test_first_order_drops_lineage(self):
        x = leaf(2.0)
        g = ad.grad(ad.mul(x, x), x)
        assert g.is_leaf and not g.requires_grad

    def test_random_graph_fd(self):
        rng = np.random.default_rng(8)
        a0, b0 = rng.uniform(0.5, 1.5, size=(3, 3)), rng.normal(size=(3,))

        def f(a, b):
            return ad.sum(ad.div(ad.exp(ad.mul(a, b)), ad.add(a, 2.0)))

        a, b = leaf(a0), leaf(b0)
        ga, gb = ad.backward(f(a, b), [a, b])
        na = central_diff(lambda v: f(ad.tensor(v), ad.tensor(b0)).item(), a0, h=1e-6)
        nb = central_diff(lambda v: f(ad.tensor(a0), ad.tensor(v)).item(), b0, h=1e-6)
        assert_grad_close(ga.value, na, rtol=1e-8, atol=1e-8)
        assert_grad_close(gb.value, nb, rtol=1e-8, atol=1e-8)

    def test_releases_intermediate_lineage(self):
        x = leaf(2.0)
        mid = ad.exp(x)
        loss = ad.mul(mid, mid)
        ad.grad(loss, x)
        assert mid.is_leaf
        assert not x.is_leaf or x.requires_grad

    def test_graph_stats_count_recorded_nodes(self):
        x = leaf(2.0)
        with ad.GraphStats() as stats:
            ad.mul(x, x)
            with ad.no_grad():
                ad.mul(x, x)
        assert stats.recorded == 1

    def test_deterministic_replay(self):
        rng = np.random.default_rng(9)
        x0 = rng.normal(size=(2, 1, 6, 6))
        k0 = rng.normal(size=(2, 1, 3, 3))
        outs = []
        for _ in range(2):
            k = leaf(k0)
            y = ad.conv2d(ad.tensor(x0), k, padding=1)
            loss = ad.sum(ad.exp(ad.scale(ad.maxpool2(y), 0.1)))
            outs.append((loss.value.tobytes(), ad.grad(loss, k).value.tobytes()))
        assert outs[0] == outs[1]


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=3, max_size=3),
       st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(xs, ca, cb):
    x0 = np.array(xs)

    def f(x):
        return ad.sum(ad.mul(ad.mul(x, x), x))

    def g(x):
        return ad.sum(ad.exp(ad.scale(x, 0.5)))

    x = leaf(x0)
    combo = ad.add(ad.scale(f(x), ca), ad.scale(g(x), cb))
    lhs = ad.grad(combo, x).value
    x1, x2 = leaf(x0), leaf(x0)
    rhs = ca * ad.grad(f(x1), x1).value + cb * ad.grad(g(x2), x2).value
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_polynomial_second_derivative(coeffs):
    # p(x) = c0 + c1 x + c2 x^2 + c3 x^3 ; p''(x) = 2 c2 + 6 c3 x
    c0, c1, c2, c3 = coeffs
    x0 = 0.7
    x = leaf(x0)
    p = ad.add(ad.add(ad.scale(x, c1), c0),
               ad.add(ad.scale(ad.mul(x, x), c2), ad.scale(ad.mul(ad.mul(x, x), x), c3)))
    g = ad.grad(p, x, create_graph=True)
    h = ad.grad(g, x).item()
    assert abs(h - (2 * c2 + 6 * c3 * x0)) <= 1e-10


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_random_composite_matches_fd(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(-1, 1, size=(2, 3))
    w0 = rng.uniform(-1, 1, size=(3, 2))

    def f(x):
        h = ad.matmul(x, ad.tensor(w0))
        return ad.sum(ad.mul(ad.abs(h), ad.exp(ad.scale(h, 0.3))))

    x = leaf(x0)
    g = ad.grad(f(x), x).value
    assert_grad_close(g, central_diff(lambda v: f(ad.tensor(v)).item(), x0))
