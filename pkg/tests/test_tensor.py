import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rvafm import tensor as T
from rvafm.gradcheck import grad_check, relative_error
from rvafm.tensor import NonFiniteError, ShapeError, StaleGraphError, Tensor

finite = st.floats(-20, 20, allow_nan=False, width=64)


def param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def naive_conv1d(x, k, b, stride, pad):
    c_out, c_in, kw = k.shape
    xp = np.pad(x, ((pad, pad), (0, 0)))
    l_out = (xp.shape[0] - kw) // stride + 1
    out = np.zeros((l_out, c_out))
    for t in range(l_out):
        for o in range(c_out):
            acc = b[o]
            for c in range(c_in):
                for j in range(kw):
                    acc += xp[t * stride + j, c] * k[o, c, j]
            out[t, o] = acc
    return out


def naive_conv2d(x, k, b, stride, pad):
    c_out, c_in, kh, kw = k.shape
    xp = np.pad(x, ((pad[0], pad[0]), (pad[1], pad[1]), (0, 0)))
    h_out = (xp.shape[0] - kh) // stride[0] + 1
    w_out = (xp.shape[1] - kw) // stride[1] + 1
    out = np.zeros((h_out, w_out, c_out))
    for i in range(h_out):
        for j in range(w_out):
            patch = xp[i * stride[0]: i * stride[0] + kh, j * stride[1]: j * stride[1] + kw, :]
            for o in range(c_out):
                out[i, j, o] = b[o] + sum(patch[u, v, c] * k[o, c, u, v]
                                          for u in range(kh) for v in range(kw) for c in range(c_in))
    return out


class TestOracleValues:
    def test_softmax_matches_high_precision(self):
        mpmath.mp.dps = 40
        exps = [mpmath.e ** v for v in (1, 2, 3)]
        expected = [float(e / sum(exps)) for e in exps]
        got = T.softmax(T.constant([1.0, 2.0, 3.0])).data
        np.testing.assert_allclose(got, expected, rtol=0, atol=1e-15)
        np.testing.assert_allclose(got, [0.09003, 0.24473, 0.66524], atol=5e-6)

    def test_tanh_and_sigmoid_high_precision(self):
        mpmath.mp.dps = 40
        assert abs(T.tanh(T.constant(1.0)).item() - float(mpmath.tanh(1))) < 1e-15
        assert abs(T.tanh(T.constant(1.0)).item() - 0.761594) < 1e-6
        for v in (-30.0, -2.5, 0.0, 0.7, 30.0):
            assert abs(T.sigmoid(T.constant(v)).item() - float(1 / (1 + mpmath.e ** (-v)))) < 1e-15

    def test_log_softmax_is_log_of_softmax(self, rng):
        x = T.constant(rng.normal(size=(3, 7)) * 10)
        np.testing.assert_allclose(T.log_softmax(x).data, np.log(T.softmax(x).data), atol=1e-12)

    def test_softmax_extreme_logits_stay_finite(self):
        y = T.softmax(T.constant([1000.0, 0.0, -1000.0])).data
        np.testing.assert_allclose(y, [1.0, 0.0, 0.0])


class TestElementwise:
    def test_add_mul_sub(self, rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        ta, tb = T.constant(a), T.constant(b)
        np.testing.assert_array_equal((ta + tb).data, a + b)
        np.testing.assert_array_equal((ta - tb).data, a - b)
        np.testing.assert_array_equal((ta * tb).data, a * b)
        np.testing.assert_array_equal((-ta).data, -a)

    @pytest.mark.parametrize("op", ["add", "sub", "mul"])
    def test_no_implicit_broadcasting(self, op):
        with pytest.raises(ShapeError):
            T.elementwise(op, T.constant(np.ones((2, 3))), T.constant(np.ones((3,))))

    def test_dtype_mismatch_rejected(self):
        with pytest.raises(TypeError):
            T.add(T.constant(np.ones(2, np.float32)), T.constant(np.ones(2)))

    def test_clamp_values_and_gradient(self):
        x = Tensor([-1.0, 0.5, 2.0], requires_grad=True)
        y = T.clamp(x, 0.0, 1.0)
        np.testing.assert_array_equal(y.data, [0.0, 0.5, 1.0])
        g = T.backward(T.tsum(y), inputs=[x])[x]
        np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])

    def test_dispatch_by_name(self):
        x = T.constant([0.3])
        assert T.elementwise("tanh", x).item() == pytest.approx(math.tanh(0.3))
        assert T.elementwise("clamp", x, lo=0.0, hi=0.1).item() == 0.1
        with pytest.raises(ValueError):
            T.elementwise("cosh", x)


class TestLinearMaps:
    def test_matmul_batched(self, rng):
        a, b = rng.normal(size=(4, 2, 3)), rng.normal(size=(3, 5))
        np.testing.assert_allclose(T.matmul(T.constant(a), T.constant(b)).data, a @ b)

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(T.constant(np.ones((2, 3))), T.constant(np.ones((4, 5))))

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 2), (2, 1), (3, 0)])
    def test_conv1d_matches_naive(self, rng, stride, pad):
        x, k, b = rng.normal(size=(9, 3)), rng.normal(size=(4, 3, 3)), rng.normal(size=4)
        got = T.conv1d(T.constant(x), T.constant(k), T.constant(b), stride, pad).data
        np.testing.assert_allclose(got, naive_conv1d(x, k, b, stride, pad), atol=1e-12)

    def test_conv1d_batched_equals_per_item(self, rng):
        x, k, b = rng.normal(size=(3, 8, 2)), rng.normal(size=(5, 2, 3)), rng.normal(size=5)
        got = T.conv1d(T.constant(x), T.constant(k), T.constant(b), 1, 1).data
        for i in range(3):
            np.testing.assert_allclose(got[i], naive_conv1d(x[i], k, b, 1, 1), atol=1e-12)

    @pytest.mark.parametrize("stride,pad", [((1, 1), (0, 0)), ((1, 1), (1, 1)), ((2, 2), (1, 1)), ((2, 1), (1, 0))])
    def test_conv2d_matches_naive(self, rng, stride, pad):
        x, k, b = rng.normal(size=(6, 7, 2)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        got = T.conv2d(T.constant(x), T.constant(k), T.constant(b), stride, pad).data
        np.testing.assert_allclose(got, naive_conv2d(x, k, b, stride, pad), atol=1e-12)

    def test_conv_kernel_larger_than_input(self):
        with pytest.raises(ShapeError):
            T.conv1d(T.constant(np.ones((2, 1))), T.constant(np.ones((1, 1, 5))), T.constant(np.zeros(1)))
        with pytest.raises(ShapeError):
            T.conv2d(T.constant(np.ones((2, 2, 1))), T.constant(np.ones((1, 1, 3, 3))), T.constant(np.zeros(1)))


class TestPooling:
    def test_bins_cover_width(self):
        assert T.pool_bins(10, 4) == [(0, 3), (2, 5), (5, 8), (7, 10)]
        assert T.pool_bins(8, 4) == [(0, 2), (2, 4), (4, 6), (6, 8)]

    def test_identity_when_widths_match(self, rng):
        x = rng.normal(size=(2, 3, 5, 4))
        np.testing.assert_array_equal(T.adaptive_max_pool_width(T.constant(x), 5).data, x)

    def test_values_match_naive(self, rng):
        x = rng.normal(size=(2, 7, 3))
        got = T.adaptive_max_pool_width(T.constant(x), 3).data
        for i, (s, e) in enumerate(T.pool_bins(7, 3)):
            np.testing.assert_array_equal(got[:, i], x[:, s:e].max(axis=1))

    def test_ties_route_gradient_to_lowest_index(self):
        x = Tensor(np.ones((1, 4, 1)), requires_grad=True)
        g = T.backward(T.tsum(T.adaptive_max_pool_width(x, 2)), inputs=[x])[x]
        np.testing.assert_array_equal(g[0, :, 0], [1, 0, 1, 0])

    def test_target_wider_than_input(self):
        with pytest.raises(ShapeError):
            T.adaptive_max_pool_width(T.constant(np.ones((1, 3, 2))), 4)


class TestMaskedSoftmax:
    def test_masked_entries_exactly_zero(self, rng):
        mask = np.array([[True, True, False, False], [True, True, True, True]])
        y = T.softmax(T.constant(rng.normal(size=(2, 4))), mask=mask).data
        assert (y[0, 2:] == 0).all()
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-15)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
    def test_rows_sum_to_one(self, x):
        y = T.softmax(T.constant(x)).data
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
        assert (y >= 0).all()


class TestGraph:
    def test_second_backward_raises(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = T.tsum(x * x)
        T.backward(loss)
        with pytest.raises(StaleGraphError):
            T.backward(loss)

    def test_gradients_accumulate_until_zeroed(self):
        x = Tensor([3.0], requires_grad=True)
        T.backward(T.tsum(x * x))
        T.backward(T.tsum(x * x))
        assert x.grad[0] == 12.0
        T.zero_grad([x])
        assert x.grad is None

    def test_shared_subexpression(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * x
        g = T.backward(T.tsum(y + y), inputs=[x])[x]
        assert g[0] == 8.0

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = x * x
        assert not y.requires_grad and y.is_leaf

    def test_unreachable_inputs_get_zero(self):
        x, z = Tensor([1.0], requires_grad=True), Tensor([[1.0, 2.0]], requires_grad=True)
        grads = T.backward(T.tsum(x * x), inputs=[x, z])
        np.testing.assert_array_equal(grads[z], np.zeros((1, 2)))

    def test_leaf_buffers_are_immutable(self):
        x = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            x.data[0] = 5.0
        x.assign([4.0, 5.0])
        assert x.data[0] == 4.0 and not x.data.flags.writeable

    def test_non_finite_output_is_an_error(self):
        with pytest.raises(NonFiniteError):
            T.constant([1.0]) * T.constant([np.inf])

    def test_backward_needs_scalar(self):
        with pytest.raises(ShapeError):
            T.backward(Tensor([1.0, 2.0], requires_grad=True) * T.constant([1.0, 1.0]))

    def test_deep_chain_does_not_recurse(self):
        x = Tensor([1.0], requires_grad=True)
        y = x
        for _ in range(5000):
            y = T.scale(y, 1.0)
        assert T.backward(T.tsum(y), inputs=[x])[x][0] == 1.0


class TestDropout:
    def test_zero_probability_is_identity(self, rng):
        x = T.constant([1.0, 2.0])
        assert T.dropout(x, 0.0, rng) is x

    def test_scaling_preserves_expectation(self):
        rng = np.random.default_rng(0)
        y = T.dropout(T.constant(np.ones(200_000)), 0.3, rng).data
        assert set(np.unique(y)) <= {0.0, 1 / 0.7}
        assert abs(y.mean() - 1.0) < 0.01


def _checks(rng):
    """(name, builder) pairs: builder returns (f, params)."""
    def un(op):
        def build():
            x = param(rng, 3, 4)
            return (lambda: T.tsum(op(x) * T.constant(np.arange(12.0).reshape(3, 4)))), [x]
        return build

    def conv1d():
        x, k, b = param(rng, 2, 7, 3), param(rng, 4, 3, 3), param(rng, 4)
        return (lambda: T.tsum(T.tanh(T.conv1d(x, k, b, 2, 1)))), [x, k, b]

    def conv2d():
        x, k, b = param(rng, 2, 5, 6, 2), param(rng, 3, 2, 3, 3), param(rng, 3)
        return (lambda: T.tsum(T.tanh(T.conv2d(x, k, b, (2, 1), (1, 1))))), [x, k, b]

    def linear():
        x, w, b = param(rng, 2, 3, 4), param(rng, 4, 5), param(rng, 5)
        return (lambda: T.tsum(T.tanh(T.linear(x, w, b)))), [x, w, b]

    def pool():
        x = Tensor(rng.permutation(60).reshape(1, 3, 5, 4) / 10.0, requires_grad=True)
        return (lambda: T.tsum(T.tanh(T.adaptive_max_pool_width(x, 3)))), [x]

    def softmax_masked():
        x = param(rng, 2, 5)
        w = T.constant(rng.normal(size=(2, 5)))
        mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=bool)
        return (lambda: T.tsum(T.softmax(x, mask=mask) * w)), [x]

    def log_softmax():
        x = param(rng, 3, 6)
        w = T.constant(rng.normal(size=(3, 6)))
        return (lambda: T.tsum(T.log_softmax(x) * w)), [x]

    def shaping():
        x, y = param(rng, 2, 3, 4), param(rng, 2, 3, 2)
        idx = np.array([0, 3, 3])

        def f():
            z = T.concat([x, y], axis=-1)
            z = T.reshape(z, (6, 6))[1:5, ::2]
            picked = T.take(x, np.zeros((2, 3), int) + idx[None])
            return T.tsum(T.tanh(T.mean(z, axis=0) * T.constant(np.arange(3.0)))) + T.tsum(picked)
        return f, [x, y]

    def expand_rowsum():
        w, x, v = param(rng, 2, 4), param(rng, 2, 4, 3, 5), param(rng, 2, 5)
        return (lambda: T.tsum(T.tanh(T.weighted_row_sum(w, x)) + T.tanh(T.expand(v, 1, 3)))), [w, x, v]

    def lstm():
        x, h, c = param(rng, 2, 4, 3), param(rng, 2, 5), param(rng, 2, 5)
        wx, wh, b = param(rng, 3, 20), param(rng, 5, 20), param(rng, 20)
        wt = T.constant(rng.normal(size=(2, 4, 10)))
        return (lambda: T.tsum(T.lstm_sequence(x, h, c, wx, wh, b) * wt)), [x, h, c, wx, wh, b]

    return {
        "tanh": un(T.tanh), "sigmoid": un(T.sigmoid), "conv1d": conv1d, "conv2d": conv2d, "linear": linear,
        "max_pool": pool, "softmax_masked": softmax_masked, "log_softmax": log_softmax, "shaping": shaping,
        "expand_rowsum": expand_rowsum, "lstm_sequence": lstm,
    }


@pytest.mark.parametrize("name", list(_checks(np.random.default_rng(0))))
def test_gradients_match_finite_differences(name):
    f, params = _checks(np.random.default_rng(7))[name]()
    report = grad_check(f, params)
    assert report.passed, report.summary()


class TestGradCheckTool:
    def test_detects_wrong_gradient(self):
        x = Tensor([0.5, -0.3], requires_grad=True)

        def broken():
            return T.custom_op(np.array(np.sum(x.data ** 2)), (x,), lambda g: (g * x.data,), "half_grad")

        assert not grad_check(broken, [x]).passed

    def test_refuses_float32(self):
        with pytest.raises(TypeError):
            grad_check(lambda: None, [Tensor(np.ones(2, np.float32), requires_grad=True)])

    def test_relative_error_floor(self):
        assert relative_error(np.zeros(3), np.full(3, 1e-12)) == pytest.approx(1e-5)
