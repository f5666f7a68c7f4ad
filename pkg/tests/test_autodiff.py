import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from swinlab.autodiff import (
    GraphConsumedError,
    NondeterministicError,
    NonFiniteError,
    Tensor,
    finite_difference_check,
    no_grad,
)
from swinlab.autodiff import functional as F
from swinlab.autodiff import kernels

TOL = 1e-4


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def projected(op, weights):
    """Scalar test function sum(w * op(...)) with fixed random weights."""
    w = Tensor(weights)
    return lambda *xs: F.sum(F.mul(op(*xs), w))


def brute_conv3d(x, w, stride, pad):
    n, _, h, wd, d = x.shape
    co, _, kh, kw, kd = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    oh, ow, od = ((e + 2 * pad - k) // stride + 1 for e, k in zip((h, wd, d), (kh, kw, kd)))
    out = np.zeros((n, co, oh, ow, od))
    for i in range(oh):
        for j in range(ow):
            for k in range(od):
                patch = xp[:, :, i * stride : i * stride + kh, j * stride : j * stride + kw,
                           k * stride : k * stride + kd]
                out[:, :, i, j, k] = np.einsum("niabc,oiabc->no", patch, w)
    return out


class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2))
        np.testing.assert_array_equal(F.matmul(eye, eye).data, np.eye(2))

    def test_hand_sum(self):
        out = F.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_shape_error_names_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
            F.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
        f = projected(F.matmul, rng.standard_normal((3, 2)))
        assert finite_difference_check(f, a, b) < TOL

    def test_batched_broadcast_gradcheck(self, rng):
        a, b = leaf(rng, 2, 3, 3, 4), leaf(rng, 3, 4, 2)
        f = projected(F.matmul, rng.standard_normal((2, 3, 3, 2)))
        assert finite_difference_check(f, a, b) < TOL


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(F.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)

    def test_no_overflow(self):
        out = F.softmax(Tensor([1000.0, 0.0])).data
        assert abs(out[0] - 1.0) < 1e-12 and abs(out[1]) < 1e-12

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_jacobian(self, seed):
        rng = np.random.default_rng(seed)
        x = leaf(rng, 5)
        f = projected(lambda t: F.softmax(t, axis=0), rng.standard_normal(5))
        assert finite_difference_check(f, x) < TOL

    def test_invalid_axis(self):
        with pytest.raises(ValueError):
            F.softmax(Tensor(np.ones((2, 2))), axis=2)

    @settings(max_examples=50, deadline=None)
    @given(
        hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                   elements=st.floats(-50, 50)),
        st.floats(-100, 100),
    )
    def test_rows_sum_to_one_and_shift_invariant(self, x, c):
        y = F.softmax(Tensor(x), axis=-1).data
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
        y2 = F.softmax(Tensor(x + c), axis=-1).data
        assert np.max(np.abs(y - y2)) < 1e-6


class TestLayerNorm:
    def test_constant_input(self):
        x = Tensor(np.full((2, 4), 3.0))
        out = F.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_hand_value(self):
        out = F.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
        np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-15)

    def test_affine_shape_mismatch(self):
        with pytest.raises(ValueError):
            F.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), None)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        x, g, b = leaf(rng, 3, 5), leaf(rng, 5), leaf(rng, 5)
        f = projected(lambda x, g, b: F.layer_norm(x, g, b), rng.standard_normal((3, 5)))
        assert finite_difference_check(f, x, g, b) < TOL


class TestInstanceNorm:
    def test_constant_channels(self):
        x = np.zeros((1, 2, 2, 2, 2))
        x[:, 0] = 5.0
        x[:, 1] = -1.0
        out = F.instance_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_hand_sequence(self):
        x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 4, 1, 1)
        out = F.instance_norm(Tensor(x), eps=0.0).data.ravel()
        # mean 2.5, population variance 1.25
        np.testing.assert_allclose(out, (np.array([1, 2, 3, 4]) - 2.5) / np.sqrt(1.25), atol=1e-14)
        assert abs(out.mean()) < 1e-15 and abs(out.var() - 1.0) < 1e-12

    def test_statistics_per_instance_channel(self, rng):
        x = rng.standard_normal((2, 3, 3, 4, 2)) * 4 + 7
        out = F.instance_norm(Tensor(x), eps=0.0).data
        np.testing.assert_allclose(out.mean(axis=(2, 3, 4)), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=(2, 3, 4)), 1.0, atol=1e-12)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        x, g, b = leaf(rng, 2, 2, 3, 2, 2), leaf(rng, 2), leaf(rng, 2)
        f = projected(lambda x, g, b: F.instance_norm(x, g, b), rng.standard_normal((2, 2, 3, 2, 2)))
        assert finite_difference_check(f, x, g, b) < TOL


class TestConv3d:
    def test_pointwise_identity(self, rng):
        x = rng.standard_normal((1, 1, 3, 4, 5))
        out = F.conv3d(Tensor(x), Tensor(np.ones((1, 1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    def test_counting(self):
        out = F.conv3d(Tensor(np.ones((1, 1, 3, 3, 3))), Tensor(np.ones((1, 1, 3, 3, 3))))
        assert out.shape == (1, 1, 1, 1, 1) and out.data.item() == 27.0

    def test_kernel_too_large(self):
        with pytest.raises(ValueError, match="larger than padded input"):
            F.conv3d(Tensor(np.ones((1, 1, 2, 2, 2))), Tensor(np.ones((1, 1, 3, 3, 3))))

    @pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 0, 2), (2, 1, 3), (1, 0, 1)])
    def test_matches_brute_force(self, rng, stride, pad, k):
        x = rng.standard_normal((2, 3, 5, 6, 4))
        w = rng.standard_normal((4, 3, k, k, k))
        out = F.conv3d(Tensor(x), Tensor(w), stride=stride, padding=pad).data
        np.testing.assert_allclose(out, brute_conv3d(x, w, stride, pad), atol=1e-12)

    def test_flat_and_im2col_paths_agree(self, rng):
        x = rng.standard_normal((1, 3, 6, 5, 7))
        w = rng.standard_normal((2, 3, 3, 3, 3))
        a = kernels.conv3d_forward(x, w, None, 1, 1, method="flat")
        b = kernels.conv3d_forward(x, w, None, 1, 1, method="col")
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_output_extent_formula(self):
        out = F.conv3d(Tensor(np.ones((1, 1, 9, 8, 7))), Tensor(np.ones((2, 1, 3, 3, 3))),
                       stride=2, padding=1)
        assert out.shape[2:] == ((9 + 2 - 3) // 2 + 1, (8 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        x, w, b = leaf(rng, 1, 2, 4, 4, 4), leaf(rng, 3, 2, 3, 3, 3), leaf(rng, 3)
        f = projected(lambda x, w, b: F.conv3d(x, w, b, padding=1), rng.standard_normal((1, 3, 4, 4, 4)))
        assert finite_difference_check(f, x, w, b) < TOL

    def test_strided_gradcheck(self, rng):
        x, w, b = leaf(rng, 1, 2, 4, 4, 4), leaf(rng, 3, 2, 2, 2, 2), leaf(rng, 3)
        f = projected(lambda x, w, b: F.conv3d(x, w, b, stride=2), rng.standard_normal((1, 3, 2, 2, 2)))
        assert finite_difference_check(f, x, w, b) < TOL


class TestConvTranspose3d:
    def test_single_voxel(self):
        out = F.conv_transpose3d(Tensor(np.ones((1, 1, 1, 1, 1))), Tensor(np.ones((1, 1, 2, 2, 2))))
        np.testing.assert_array_equal(out.data, np.ones((1, 1, 2, 2, 2)))

    def test_extent_doubles(self):
        out = F.conv_transpose3d(Tensor(np.ones((1, 2, 4, 4, 4))), Tensor(np.ones((2, 3, 2, 2, 2))))
        assert out.shape == (1, 3, 8, 8, 8)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_explicit_adjoint(self, seed):
        rng = np.random.default_rng(seed)
        # explicit adjoint: assemble conv3d as a dense matrix and apply its transpose
        w = rng.standard_normal((2, 3, 2, 2, 2))  # conv_transpose layout (Cin, Cout, k...)
        x = rng.standard_normal((1, 2, 3, 2, 3))
        in_shape = (1, 3, 6, 4, 6)
        n_in = int(np.prod(in_shape))
        cols = []
        for i in range(n_in):
            e = np.zeros(n_in)
            e[i] = 1.0
            cols.append(brute_conv3d(e.reshape(in_shape), w, 2, 0).ravel())
        A = np.stack(cols, axis=1)
        expected = (A.T @ x.ravel()).reshape(in_shape)
        out = F.conv_transpose3d(Tensor(x), Tensor(w)).data
        assert np.max(np.abs(out - expected)) < 1e-6

    @pytest.mark.parametrize("stride,pad,k,extent", [(2, 0, 2, (6, 4, 6)), (1, 1, 3, (6, 5, 6)),
                                                     (2, 1, 3, (5, 7, 5))])
    def test_inner_product_adjoint(self, rng, stride, pad, k, extent):
        # <conv(x), y> == <x, conv_transpose(y)> when the stride tiles the padded input evenly
        w = rng.standard_normal((4, 3, k, k, k))  # conv layout (Cout, Cin, ...)
        x = rng.standard_normal((2, 3) + extent)
        fwd = F.conv3d(Tensor(x), Tensor(w), stride=stride, padding=pad).data
        y = rng.standard_normal(fwd.shape)
        lhs = np.sum(fwd * y)
        xt = F.conv_transpose3d(Tensor(y), Tensor(w), stride=stride, padding=pad).data
        assert xt.shape == x.shape
        rhs = np.sum(x * xt)
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        x, w, b = leaf(rng, 1, 2, 2, 3, 2), leaf(rng, 2, 3, 2, 2, 2), leaf(rng, 3)
        f = projected(lambda x, w, b: F.conv_transpose3d(x, w, b), rng.standard_normal((1, 3, 4, 6, 4)))
        assert finite_difference_check(f, x, w, b) < TOL


class TestElementwise:
    def test_sigmoid_zero(self):
        assert F.elementwise("sigmoid", Tensor(np.zeros(3))).data.tolist() == [0.5, 0.5, 0.5]

    def test_add_zero_bit_identical(self, rng):
        x = rng.standard_normal((4, 5)).astype(np.float32)
        out = F.elementwise("add", Tensor(x), Tensor(np.zeros(1, np.float32)))
        assert out.data.tobytes() == x.tobytes()

    def test_broadcast_mismatch(self):
        with pytest.raises(ValueError, match="broadcastable"):
            F.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            F.elementwise("tanh", Tensor(np.zeros(1)))

    @pytest.mark.parametrize("name", ["gelu", "sigmoid", "leaky_relu"])
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_unary_gradcheck(self, name, seed):
        rng = np.random.default_rng(seed)
        x = leaf(rng, 3, 4)
        f = projected(lambda t: F.elementwise(name, t), rng.standard_normal((3, 4)))
        assert finite_difference_check(f, x) < TOL

    @pytest.mark.parametrize("name", ["add", "mul"])
    def test_binary_broadcast_gradcheck(self, rng, name):
        a, b = leaf(rng, 3, 4), leaf(rng, 1, 4)
        f = projected(lambda a, b: F.elementwise(name, a, b), rng.standard_normal((3, 4)))
        assert finite_difference_check(f, a, b) < TOL

    def test_scale_div_gradcheck(self, rng):
        a = leaf(rng, 3, 4)
        b = Tensor(rng.uniform(1.0, 2.0, (3, 4)), requires_grad=True)
        f = projected(lambda a, b: F.div(F.scale(a, 0.3), b), rng.standard_normal((3, 4)))
        assert finite_difference_check(f, a, b) < TOL


class TestStructural:
    def test_roll(self):
        out = F.roll(Tensor([1.0, 2.0, 3.0, 4.0]), 1, 0)
        assert out.data.tolist() == [4.0, 1.0, 2.0, 3.0]

    def test_roll_inverse_bit_exact(self, rng):
        x = rng.standard_normal((4, 4, 4))
        back = F.roll(F.roll(Tensor(x), (1, -2, 3), (0, 1, 2)), (-1, 2, -3), (0, 1, 2))
        assert back.data.tobytes() == x.tobytes()

    def test_concat_backward_splits(self, rng):
        a, b = leaf(rng, 2, 3), leaf(rng, 2, 5)
        F.sum(F.concat([a, b], axis=1)).backward()
        np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
        np.testing.assert_array_equal(b.grad, np.ones((2, 5)))

    def test_concat_extents_add(self):
        out = F.reshape_permute_concat_roll("concat", [Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4)))], axis=1)
        assert out.shape == (2, 7)

    def test_reshape_count_mismatch(self):
        with pytest.raises(ValueError, match="cannot reshape"):
            F.reshape(Tensor(np.ones(6)), (4, 2))

    def test_permute_reshape_bijection(self, rng):
        x = rng.standard_normal((2, 3, 4))
        y = F.permute(F.reshape(Tensor(x), (6, 4)), (1, 0))
        back = F.reshape(F.permute(y, (1, 0)), (2, 3, 4))
        assert back.data.tobytes() == x.tobytes()

    @pytest.mark.parametrize(
        "op",
        [
            lambda t: F.roll(t, (1, 2), (0, 1)),
            lambda t: F.permute(t, (1, 0, 2)),
            lambda t: F.reshape(t, (4, 6)),
            lambda t: F.pad(t, [(1, 0), (0, 2), (1, 1)]),
            lambda t: t[1:, ::2, :],
        ],
    )
    def test_gradcheck(self, rng, op):
        x = leaf(rng, 2, 3, 4)
        out_shape = op(Tensor(x.data)).shape
        f = projected(op, rng.standard_normal(out_shape))
        assert finite_difference_check(f, x) < TOL

    def test_take_accumulates(self):
        table = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        F.sum(F.take(table, np.array([0, 2, 0, 0]))).backward()
        np.testing.assert_array_equal(table.grad, [[3, 3], [0, 0], [1, 1]])


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = leaf(rng, 3, 2)
        F.sum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 2)))

    def test_square_gives_2x(self, rng):
        x = leaf(rng, 5)
        F.sum(F.mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=0, atol=0)

    def test_non_scalar_root(self, rng):
        with pytest.raises(ValueError, match="scalar"):
            F.mul(leaf(rng, 3), 2.0).backward()

    def test_double_backward_is_error(self, rng):
        x = leaf(rng, 3)
        loss = F.sum(F.mul(x, x))
        loss.backward()
        with pytest.raises(GraphConsumedError):
            loss.backward()

    def test_fan_out_accumulates(self, rng):
        x = leaf(rng, 4)
        w1, w2 = rng.standard_normal(4), rng.standard_normal(4)
        F.sum(F.mul(F.sigmoid(x), Tensor(w1))).backward()
        g1 = x.grad.copy()
        x.zero_grad()
        F.sum(F.mul(F.gelu(x), Tensor(w2))).backward()
        g2 = x.grad.copy()
        x.zero_grad()
        both = F.add(F.sum(F.mul(F.sigmoid(x), Tensor(w1))), F.sum(F.mul(F.gelu(x), Tensor(w2))))
        both.backward()
        np.testing.assert_allclose(x.grad, g1 + g2, atol=1e-15)

    def test_reverse_execution_order(self, rng):
        x = leaf(rng, 3)
        a = F.scale(x, 2.0)
        b = F.sigmoid(a)
        c = F.mul(a, b)
        assert a.node.seq < b.node.seq < c.node.seq

    def test_no_grad_records_nothing(self, rng):
        x = leaf(rng, 3)
        with no_grad():
            y = F.mul(x, x)
        assert y.node is None and not y.requires_grad

    @pytest.mark.filterwarnings("ignore:divide by zero:RuntimeWarning")
    def test_debug_mode_surfaces_non_finite(self):
        with pytest.raises(NonFiniteError):
            F.div(Tensor([1.0]), Tensor([0.0]))


class TestFiniteDifferenceCheck:
    def test_sum_exact(self, rng):
        x = leaf(rng, 6)
        assert finite_difference_check(F.sum, x) < 1e-10

    def test_quadratic(self, rng):
        x = leaf(rng, 6)
        assert finite_difference_check(lambda t: F.sum(F.mul(t, t)), x, eps=1e-4) < 1e-8

    def test_detects_nondeterminism(self, rng):
        x = leaf(rng, 3)
        noise = np.random.default_rng(0)
        with pytest.raises(NondeterministicError):
            finite_difference_check(lambda t: F.sum(F.scale(t, noise.uniform())), x)

    def test_detects_wrong_gradient(self, rng):
        from swinlab.autodiff.tensor import make_result

        def bad_square(t):
            return make_result(t.data**2, (t,), lambda g: (g * t.data,), "bad")

        x = leaf(rng, 4)
        assert finite_difference_check(lambda t: F.sum(bad_square(t)), x) > 0.3
