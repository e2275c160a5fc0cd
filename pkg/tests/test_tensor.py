"""Tests for the tensor engine: forward values, convolution oracles and gradients."""

import numpy as np
import pytest

from coactseg import tensor as T
from coactseg.tensor import Tape, Tensor, backward, grad_check, no_grad
from coactseg.utils import ShapeError


def _transposed_oracle(x, weight, stride, padding):
    """Scatter-accumulate every input voxel through the kernel."""
    n, c, d, h, w = x.shape
    _, k, kd, kh, kw = weight.shape
    full = np.zeros((n, k, (d - 1) * stride + kd, (h - 1) * stride + kh, (w - 1) * stride + kw))
    for b in range(n):
        for ci in range(c):
            for z in range(d):
                for y in range(h):
                    for v in range(w):
                        for ko in range(k):
                            full[b, ko, z * stride:z * stride + kd, y * stride:y * stride + kh,
                                 v * stride:v * stride + kw] += x[b, ci, z, y, v] * weight[ci, ko]
    p = padding
    return full[:, :, p:full.shape[2] - p, p:full.shape[3] - p, p:full.shape[4] - p]


class TestElementwise:

    def test_sigmoid_of_zero(self):
        assert T.sigmoid(Tensor([0.0])).item() == 0.5

    def test_sigmoid_is_finite_for_large_inputs(self):
        out = T.sigmoid(Tensor([-1000.0, 1000.0]))
        assert np.all(np.isfinite(out.values))
        np.testing.assert_allclose(out.values, [0.0, 1.0], atol=1e-300)

    def test_mean(self):
        assert T.mean(Tensor([1.0, 2.0, 3.0, 4.0])).item() == 2.5

    def test_prelu_scalar_slope(self):
        assert T.prelu(Tensor([-2.0]), 0.1).item() == pytest.approx(-0.2)

    def test_prelu_per_channel(self):
        x = Tensor(np.array([-1.0, -1.0]).reshape(1, 2, 1))
        out = T.prelu(x, Tensor([0.1, 0.5]))
        np.testing.assert_allclose(out.values.ravel(), [-0.1, -0.5])

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
        with pytest.raises(ShapeError):
            T.mul(Tensor(np.ones((2, 2))), Tensor(np.ones(4)))

    def test_scalar_broadcast(self):
        x = Tensor([1.0, 2.0])
        np.testing.assert_array_equal((x + 1).values, [2.0, 3.0])
        np.testing.assert_array_equal((3.0 * x).values, [3.0, 6.0])
        np.testing.assert_array_equal((1 - x).values, [0.0, -1.0])

    def test_concat_and_slice(self):
        a, b = Tensor(np.zeros((1, 2, 3))), Tensor(np.ones((1, 1, 3)))
        joined = T.concat([a, b], axis=1)
        assert joined.shape == (1, 3, 3)
        assert T.slice_(joined, (slice(None), slice(2, 3))).values.sum() == 3.0

    def test_pad(self):
        out = T.pad(Tensor(np.ones((2, 2))), [(1, 0), (0, 2)])
        assert out.shape == (3, 4)
        assert out.values.sum() == 4.0

    def test_forward_is_deterministic(self, rng):
        x = rng.standard_normal((1, 2, 5, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3, 3))
        first = T.conv3d(Tensor(x), Tensor(w), padding=1).values
        second = T.conv3d(Tensor(x), Tensor(w), padding=1).values
        assert np.array_equal(first, second)


class TestConv3d:

    def test_sum_of_ones(self):
        out = T.conv3d(Tensor(np.ones((1, 1, 3, 3, 3))), Tensor(np.ones((1, 1, 3, 3, 3))),
                       Tensor([0.0]))
        assert out.shape == (1, 1, 1, 1, 1)
        assert out.item() == 27.0

    def test_identity_kernel(self, rng):
        x = rng.standard_normal((2, 1, 4, 5, 6))
        w = np.zeros((1, 1, 3, 3, 3))
        w[0, 0, 1, 1, 1] = 1.0
        out = T.conv3d(Tensor(x), Tensor(w), padding=1)
        np.testing.assert_array_equal(out.values, x)

    @pytest.mark.parametrize("shape,kernel,stride,padding", [
        ((1, 2, 4, 4, 4), (3, 2, 2, 2, 2), 1, 0),
        ((2, 3, 5, 5, 5), (2, 3, 3, 3, 3), 1, 1),
        ((2, 3, 5, 5, 5), (2, 3, 3, 3, 3), 2, 1),
        ((1, 1, 4, 5, 3), (2, 1, 2, 3, 1), (2, 1, 1), (0, 1, 0)),
    ])
    def test_matches_loop_oracle(self, rng, shape, kernel, stride, padding):
        x = rng.standard_normal(shape)
        w = rng.standard_normal(kernel)
        b = rng.standard_normal(kernel[0])
        out = T.conv3d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
        expected = T.conv3d_reference(x, w, b, stride=stride, padding=padding)
        assert out.shape == expected.shape
        assert np.max(np.abs(out.values - expected)) <= 1e-12

    def test_output_extent(self):
        out = T.conv3d(Tensor(np.zeros((1, 1, 7, 6, 5))), Tensor(np.zeros((1, 1, 3, 2, 1))),
                       stride=(2, 2, 1), padding=(1, 0, 0))
        assert out.shape == (1, 1, 4, 3, 5)

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError):
            T.conv3d(Tensor(np.zeros((1, 1, 2, 2, 2))), Tensor(np.zeros((1, 1, 3, 3, 3))))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channels"):
            T.conv3d(Tensor(np.zeros((1, 2, 4, 4, 4))), Tensor(np.zeros((1, 3, 2, 2, 2))))

    def test_bad_stride(self):
        with pytest.raises(ShapeError):
            T.conv3d(Tensor(np.zeros((1, 1, 4, 4, 4))), Tensor(np.zeros((1, 1, 2, 2, 2))), stride=0)

    def test_randomized_shapes(self, rng):
        for _ in range(200):
            k = int(rng.integers(1, 4))
            stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, k))
            shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)), *rng.integers(k, 6, size=3))
            x = rng.standard_normal(shape)
            w = rng.standard_normal((int(rng.integers(1, 4)), shape[1], k, k, k))
            b = rng.standard_normal(w.shape[0])
            out = T.conv3d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
            expected = T.conv3d_reference(x, w, b, stride=stride, padding=padding)
            assert np.max(np.abs(out.values - expected)) <= 1e-12


class TestConv3dTransposed:

    def test_single_voxel_ones_kernel(self):
        out = T.conv3d_transposed(Tensor(np.full((1, 1, 1, 1, 1), 2.5)),
                                  Tensor(np.ones((1, 1, 2, 2, 2))), stride=2)
        assert out.shape == (1, 1, 2, 2, 2)
        np.testing.assert_array_equal(out.values, np.full((1, 1, 2, 2, 2), 2.5))

    def test_restores_extent_after_strided_conv(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 8, 6, 4)))
        down = T.conv3d(x, Tensor(rng.standard_normal((3, 2, 2, 2, 2))), stride=2)
        up = T.conv3d_transposed(down, Tensor(rng.standard_normal((3, 2, 2, 2, 2))), stride=2)
        assert up.shape == x.shape

    @pytest.mark.parametrize("stride,padding,kernel", [(2, 0, 2), (1, 1, 3), (2, 1, 3)])
    def test_matches_scatter_oracle(self, rng, stride, padding, kernel):
        x = rng.standard_normal((2, 2, 3, 3, 3))
        w = rng.standard_normal((2, 3, kernel, kernel, kernel))
        out = T.conv3d_transposed(Tensor(x), Tensor(w), stride=stride, padding=padding)
        expected = _transposed_oracle(x, w, stride, padding)
        assert out.shape == expected.shape
        assert np.max(np.abs(out.values - expected)) <= 1e-12

    def test_output_extent(self):
        out = T.conv3d_transposed(Tensor(np.zeros((1, 1, 3, 4, 5))),
                                  Tensor(np.zeros((1, 2, 3, 3, 3))), stride=2, padding=1)
        assert out.shape == (1, 2, 5, 7, 9)

    def test_randomized_shapes(self, rng):
        for _ in range(200):
            k = int(rng.integers(1, 4))
            stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, (k - 1) // 2 + 1))
            x = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 3)),
                                     *rng.integers(1, 4, size=3)))
            w = rng.standard_normal((x.shape[1], int(rng.integers(1, 3)), k, k, k))
            out = T.conv3d_transposed(Tensor(x), Tensor(w), stride=stride, padding=padding)
            assert np.max(np.abs(out.values - _transposed_oracle(x, w, stride, padding))) <= 1e-12


class TestBackward:

    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        backward(T.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_mean_square(self, rng):
        values = rng.standard_normal(7)
        x = Tensor(values, requires_grad=True)
        backward(T.mean(T.square(x)))
        np.testing.assert_allclose(x.grad, 2 * values / 7)

    def test_non_scalar_loss_raises(self):
        with pytest.raises(ShapeError):
            backward(Tensor(np.ones(3), requires_grad=True))

    def test_reused_tensor_sums_branches(self, rng):
        values = rng.standard_normal(5)
        x = Tensor(values, requires_grad=True)
        y = x * x + x
        backward(T.sum_all(y))
        np.testing.assert_allclose(x.grad, 2 * values + 1)

    def test_diamond_graph_visits_once(self, rng):
        x = Tensor(rng.standard_normal(4), requires_grad=True)
        shared = T.sigmoid(x)
        loss = T.sum_all(shared * 2.0 + shared)
        tape = Tape.record(loss)
        assert len(tape) == len({id(node) for node in tape.nodes})
        positions = {id(node): i for i, node in enumerate(tape.nodes)}
        for node in tape.nodes:
            for parent in node._parents:
                assert positions[id(parent)] < positions[id(node)]

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 3.0
        assert not y.requires_grad
        assert y._parents == ()

    def test_interior_gradients_released(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        hidden = x * 2.0
        backward(T.sum_all(hidden))
        assert hidden.grad is None
        assert x.grad is not None


class TestGradCheck:

    def test_quadratic(self, rng):
        x = Tensor(rng.standard_normal(6))
        assert grad_check(lambda t: T.sum_all(T.square(t)), x) < 1e-8

    def test_constant_function(self, rng):
        x = Tensor(rng.standard_normal(3))
        assert grad_check(lambda t: Tensor([4.0]), x) == 0.0

    def test_rejects_non_positive_eps(self):
        with pytest.raises(ValueError):
            grad_check(lambda t: T.sum_all(t), Tensor([1.0]), eps=0.0)

    @pytest.mark.parametrize("name", ["sigmoid", "square", "prelu", "div", "mul", "concat",
                                      "slice", "pad", "mean", "sub"])
    def test_primitives(self, rng, name):
        other = Tensor(rng.uniform(1.0, 2.0, size=(1, 2, 3)))
        slope = Tensor([0.2, 0.3], requires_grad=True)
        fns = {
            "sigmoid": lambda t: T.sum_all(T.sigmoid(t)),
            "square": lambda t: T.mean(T.square(t)),
            "prelu": lambda t: T.sum_all(T.prelu(t, slope) * other),
            "div": lambda t: T.sum_all(T.div(t, other)) + T.sum_all(T.div(other, T.square(t) + 1.0)),
            "mul": lambda t: T.sum_all(t * other * t),
            "concat": lambda t: T.sum_all(T.square(T.concat([t, other], axis=1))),
            "slice": lambda t: T.sum_all(T.square(T.slice_(t, (0, slice(1, 2))))),
            "pad": lambda t: T.sum_all(T.square(T.pad(t, [(0, 0), (1, 1), (2, 0)])) * 0.5),
            "mean": lambda t: T.mean(T.sigmoid(t) * other),
            "sub": lambda t: T.sum_all(T.square(t - other)),
        }
        x = Tensor(rng.standard_normal((1, 2, 3)))
        assert grad_check(fns[name], x) < 1e-4

    def test_prelu_slope_gradient(self, rng):
        x = Tensor(rng.standard_normal((2, 2, 3)))
        slope = Tensor([0.2, 0.3])
        assert grad_check(lambda s: T.sum_all(T.square(T.prelu(x, s))), slope) < 1e-4

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 0), (2, 1)])
    def test_conv3d_gradients(self, rng, stride, padding):
        x = Tensor(rng.standard_normal((2, 2, 4, 4, 4)))
        w = Tensor(rng.standard_normal((3, 2, 2, 2, 2)))
        b = Tensor(rng.standard_normal(3))

        def loss(_):
            return T.mean(T.square(T.conv3d(x, w, b, stride=stride, padding=padding)))
        for leaf in (x, w, b):
            assert grad_check(loss, leaf) < 1e-4

    def test_conv3d_transposed_gradients(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 3, 3, 3)))
        w = Tensor(rng.standard_normal((2, 3, 3, 3, 3)))
        b = Tensor(rng.standard_normal(3))

        def loss(_):
            return T.mean(T.square(T.conv3d_transposed(x, w, b, stride=2, padding=1)))
        for leaf in (x, w, b):
            assert grad_check(loss, leaf) < 1e-4

    def test_coordinate_budget(self, rng):
        x = Tensor(rng.standard_normal(50))
        assert grad_check(lambda t: T.sum_all(T.sigmoid(t)), x, n_coords=5,
                          rng=np.random.default_rng(1)) < 1e-6

    def test_step_straddling_prelu_kink(self):
        x = Tensor([5e-5])

        def f(t):
            return T.sum_all(T.prelu(t, 0.1))
        assert grad_check(f, x, eps=1e-4) > 0.2
        assert grad_check(f, x, eps=1e-4, shrink_steps=2) < 1e-8

    def test_shrinking_keeps_wrong_gradients_visible(self):
        x = Tensor([0.5, -0.7])
        # detaching one factor halves the analytic gradient of t*t
        def f(t):
            return T.sum_all(t * t.detach())
        assert grad_check(f, x, shrink_steps=3) > 0.3

    def test_rejects_negative_shrink_steps(self):
        with pytest.raises(ValueError):
            grad_check(lambda t: T.sum_all(t), Tensor([1.0]), shrink_steps=-1)
