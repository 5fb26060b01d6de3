"""Autodiff op tests: trivial identities plus finite-difference checks."""

import numpy as np
import pytest

from gradcheck import check_gradients
from noiselab import tensor as T
from noiselab.errors import ShapeError
from noiselab.rng import Rng
from noiselab.tensor import Tensor


def randt(rng, shape, scale=1.0, grad=True):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=grad)


class TestForward:
    def test_matmul_identity(self, rng):
        a = rng.standard_normal((3, 3))
        out = T.matmul(Tensor(np.eye(3)), Tensor(a))
        np.testing.assert_allclose(out.data, a, atol=1e-15)

    def test_silu_values(self):
        assert T.silu(Tensor(0.0)).item() == 0.0
        assert abs(T.silu(Tensor(20.0)).item() - 20.0) < 1e-6

    def test_conv1d_against_nested_loops(self, rng):
        # Cross-correlation orientation: y[o, i] = sum_c,k x[c, i*s + k] w[o, c, k]
        x = rng.standard_normal((1, 2, 9))
        w = rng.derive(1).standard_normal((3, 2, 3))
        out = T.conv1d(Tensor(x), Tensor(w), stride=1, padding=0)
        expected = np.zeros((1, 3, 7))
        for o in range(3):
            for i in range(7):
                acc = 0.0
                for c in range(2):
                    for k in range(3):
                        acc += x[0, c, i + k] * w[o, c, k]
                expected[0, o, i] = acc
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_conv1d_simple_signal(self):
        out = T.conv1d(
            Tensor(np.array([[[1.0, 0.0, 0.0]]])),
            Tensor(np.array([[[1.0, 2.0, 3.0]]])),
            padding=0,
        )
        np.testing.assert_allclose(out.data, [[[1.0]]])

    def test_conv2d_against_nested_loops(self, rng):
        x = rng.standard_normal((2, 3, 6, 5))
        w = rng.derive(1).standard_normal((4, 3, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(w), stride=2, padding=1)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ho, wo = out.shape[2], out.shape[3]
        expected = np.zeros((2, 4, ho, wo))
        for n in range(2):
            for o in range(4):
                for i in range(ho):
                    for j in range(wo):
                        patch = xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
                        expected[n, o, i, j] = (patch * w[o]).sum()
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_shape_errors_name_the_op(self):
        with pytest.raises(ShapeError, match="conv2d"):
            T.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))))
        with pytest.raises(ShapeError, match="matmul"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
        with pytest.raises(ShapeError, match="add"):
            T.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_upsample_nearest(self):
        x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
        y = T.upsample_nearest(x, 2)
        assert y.shape == (1, 1, 4, 4)
        np.testing.assert_allclose(y.data[0, 0, :2, :2], 0.0)
        np.testing.assert_allclose(y.data[0, 0, 2:, 2:], 3.0)

    def test_tensor_op_dispatch(self):
        out = T.tensor_op("add", Tensor(np.ones(3)), Tensor(np.ones(3)))
        np.testing.assert_allclose(out.data, 2.0)
        with pytest.raises(KeyError):
            T.tensor_op("not_an_op", Tensor(np.ones(3)))


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        loss = T.sum_all(T.mul(x, x))
        T.backward(loss)
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_mse_at_target_is_zero_grad(self, rng):
        v = rng.standard_normal((3, 4))
        pred = Tensor(v.copy(), requires_grad=True)
        T.backward(T.mse_loss(pred, v))
        np.testing.assert_allclose(pred.grad, 0.0)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            T.backward(T.mul(x, x))

    def test_repeated_forward_backward_identical(self, rng):
        w = randt(rng, (4, 4))
        x = rng.derive(5).standard_normal((2, 4))

        def run():
            w.zero_grad()
            loss = T.mse_loss(T.silu(T.matmul(Tensor(x), w)), np.zeros((2, 4)))
            T.backward(loss)
            return w.grad.copy()

        g1, g2 = run(), run()
        np.testing.assert_array_equal(g1, g2)

    def test_grad_accumulates_across_backwards(self, rng):
        w = randt(rng, (3,))
        T.backward(T.sum_all(T.mul(w, w)))
        g1 = w.grad.copy()
        T.backward(T.sum_all(T.mul(w, w)))
        np.testing.assert_allclose(w.grad, 2 * g1)

    def test_no_grad_suppresses_graph(self, rng):
        w = randt(rng, (3, 3))
        with T.no_grad():
            out = T.matmul(Tensor(np.ones((1, 3))), w)
        assert out._backward is None and out._parents == ()


# Finite-difference checks over every registered differentiable op,
# repeated across seeds per the gradient-check requirement.


def _op_cases(rng):
    return {
        "matmul": (
            lambda a, b: T.matmul(a, b),
            [randt(rng, (3, 4)), randt(rng.derive(1), (4, 2))],
        ),
        "bmm": (
            lambda a, b: T.bmm(a, b),
            [randt(rng, (2, 3, 4)), randt(rng.derive(1), (2, 4, 2))],
        ),
        "conv1d": (
            lambda x, w: T.conv1d(x, w, stride=2, padding=1),
            [randt(rng, (2, 3, 8)), randt(rng.derive(1), (4, 3, 3), 0.5)],
        ),
        "conv2d": (
            lambda x, w: T.conv2d(x, w, stride=1, padding=1),
            [randt(rng, (2, 2, 5, 5)), randt(rng.derive(1), (3, 2, 3, 3), 0.5)],
        ),
        "upsample": (
            lambda x: T.upsample_nearest(x, 2),
            [randt(rng, (1, 2, 3, 3))],
        ),
        "add": (T.add, [randt(rng, (3, 4)), randt(rng.derive(1), (3, 4))]),
        "mul": (T.mul, [randt(rng, (3, 4)), randt(rng.derive(1), (3, 4))]),
        "concat": (
            lambda a, b: T.concat([a, b], axis=1),
            [randt(rng, (2, 3, 2)), randt(rng.derive(1), (2, 2, 2))],
        ),
        "silu": (T.silu, [randt(rng, (4, 4))]),
        "sin": (T.sin, [randt(rng, (4, 4))]),
        "cos": (T.cos, [randt(rng, (4, 4))]),
        "layer_norm": (
            lambda x, g, b: T.layer_norm(x, g, b),
            [
                randt(rng, (2, 5, 3)),
                Tensor(1.0 + 0.1 * rng.derive(2).standard_normal(5), requires_grad=True),
                randt(rng.derive(3), (5,)),
            ],
        ),
        "instance_norm": (
            lambda x, g, b: T.instance_norm(x, g, b),
            [
                randt(rng, (2, 3, 4, 4)),
                Tensor(1.0 + 0.1 * rng.derive(4).standard_normal(3), requires_grad=True),
                randt(rng.derive(5), (3,)),
            ],
        ),
        "softmax": (
            lambda x: T.softmax(x, axis=1),
            [randt(rng, (3, 5))],
        ),
        "channel_affine": (
            T.channel_affine,
            [
                randt(rng, (2, 3, 4, 4)),
                randt(rng.derive(1), (2, 3), 0.2),
                randt(rng.derive(2), (2, 3), 0.2),
            ],
        ),
        "slice": (
            lambda x: T.slice_axis(x, 1, 1, 3),
            [randt(rng, (2, 4, 3))],
        ),
        "take_rows": (
            lambda t: T.take_rows(t, np.array([0, 2, 2])),
            [randt(rng, (4, 3))],
        ),
        "pad": (
            lambda x: T.pad_axis(x, 2, 1, 2),
            [randt(rng, (1, 2, 4))],
        ),
        "bias": (
            T.add_channel_bias,
            [randt(rng, (2, 3, 4)), randt(rng.derive(1), (3,))],
        ),
        "mse_loss": (
            lambda p, t: T.mse_loss(p, t),
            [randt(rng, (3, 4)), randt(rng.derive(1), (3, 4))],
        ),
        "l1_loss": (
            lambda p, t: T.l1_loss(p, t),
            [randt(rng, (3, 4)), randt(rng.derive(1), (3, 4))],
        ),
        "reshape_transpose": (
            lambda x: T.transpose(T.reshape(x, (2, 6)), (1, 0)),
            [randt(rng, (2, 3, 2))],
        ),
        "scale_sub": (
            lambda a, b: T.add(T.scale(a, 2.5), T.scale(b, -0.5)),
            [randt(rng, (3,)), randt(rng.derive(1), (3,))],
        ),
    }


@pytest.mark.parametrize("seed", range(20))
def test_gradcheck_all_ops(seed):
    rng = Rng(seed)
    for name, (fn, tensors) in _op_cases(rng.derive(hash(seed) % 1000)).items():

        def build():
            out = fn(*tensors)
            if out.data.size != 1:
                out = T.mean_all(T.mul(out, out))
            return out

        worst = check_gradients(build, [t for t in tensors if t.requires_grad])
        assert worst < 1e-4, f"{name} failed at seed {seed}"
