import itertools

import numpy as np
import pytest

from gradcheck import check, scalarize
from sdgan.errors import ContractError, DimensionError
from sdgan.tensor import (
    Tensor,
    activation,
    avg_pool2d,
    conv2d,
    conv_transpose2d,
    dense,
    leaky_relu,
    relu,
    sigmoid,
    upsample_zeros,
)


def naive_conv(x, k, stride, padding):
    """Quadruple-loop cross-correlation used as the conv2d oracle."""
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + w] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, o, i, j] = np.sum(patch * k[o])
    return out


def test_conv_zero_input():
    x = Tensor(np.zeros((1, 1, 3, 3)))
    k = Tensor(np.random.default_rng(0).normal(size=(1, 1, 3, 3)))
    assert np.all(conv2d(x, k).data == 0)


def test_conv_ones_gives_nine():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_conv_identity_kernel():
    x = np.random.default_rng(1).random((2, 1, 5, 4)).astype(np.float32)
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("h,w", [(h, w) for h in range(1, 9) for w in range(1, 9)])
def test_conv_shape_formula_and_oracle(h, w):
    rng = np.random.default_rng(h * 10 + w)
    for k, stride, padding in itertools.product((1, 2, 3), (1, 2, 3), (0, 1, 2)):
        if k > h + 2 * padding or k > w + 2 * padding:
            continue
        x = rng.integers(-3, 4, size=(2, 2, h, w)).astype(np.float64)
        kern = rng.integers(-2, 3, size=(3, 2, k, k)).astype(np.float64)
        out = conv2d(Tensor(x, dtype=np.float64), Tensor(kern, dtype=np.float64), stride=stride, padding=padding)
        assert out.shape[2] == (h + 2 * padding - k) // stride + 1
        assert out.shape[3] == (w + 2 * padding - k) // stride + 1
        np.testing.assert_array_equal(out.data, naive_conv(x, kern, stride, padding))


def test_conv_rejects_bad_shapes():
    with pytest.raises(DimensionError, match="channel"):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(DimensionError, match="axis 2"):
        conv2d(Tensor(np.zeros((1, 1, 2, 5))), Tensor(np.zeros((1, 1, 3, 3))))
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))))


def test_transposed_conv_equals_zero_insertion():
    rng = np.random.default_rng(3)
    for n, c, f, h, w in [(2, 3, 4, 5, 6), (1, 1, 1, 1, 1), (3, 2, 5, 4, 4)]:
        x = Tensor(rng.normal(size=(n, c, h, w)), dtype=np.float64)
        k = Tensor(rng.normal(size=(f, c, 3, 3)), dtype=np.float64)
        b = Tensor(rng.normal(size=f), dtype=np.float64)
        direct = conv_transpose2d(x, k, b)
        reference = conv2d(upsample_zeros(x, 2), k, b, stride=1, padding=1)
        assert direct.shape == (n, f, 2 * h, 2 * w)
        np.testing.assert_allclose(direct.data, reference.data, rtol=0, atol=1e-12)


def test_dense_examples():
    x = Tensor([[1.0, 2.0]])
    assert dense(x, Tensor([[1.0], [1.0]]), Tensor([0.0])).data.tolist() == [[3.0]]
    eye = dense(Tensor([[1.0, -2.0], [3.0, 4.0]]), Tensor(np.eye(2)), Tensor(np.zeros(2)))
    assert eye.data.tolist() == [[1.0, -2.0], [3.0, 4.0]]
    rows = dense(Tensor(np.ones((3, 2))), Tensor(np.zeros((2, 2))), Tensor([5.0, -1.0]))
    assert rows.data.tolist() == [[5.0, -1.0]] * 3
    with pytest.raises(DimensionError):
        dense(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 1))))


def test_activation_values():
    assert sigmoid(Tensor([0.0])).item() == 0.5
    assert relu(Tensor([-2.0, 3.0])).data.tolist() == [0.0, 3.0]
    assert leaky_relu(Tensor([-2.0]), 0.2).item() == pytest.approx(-0.4)
    out = activation(Tensor(np.linspace(-30, 30, 101)), "sigmoid").data
    assert np.all((out >= 0) & (out <= 1))
    t = activation(Tensor(np.linspace(-3, 3, 11)), "tanh").data
    assert np.all((t > -1) & (t < 1))
    with pytest.raises(ValueError):
        leaky_relu(Tensor([1.0]), 1.5)


def test_backward_sum_gives_ones():
    x = Tensor(np.zeros((2, 3)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square():
    x = Tensor([3.0], requires_grad=True)
    (x * x).sum().backward()
    assert x.grad.tolist() == [6.0]


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2).backward()


def test_no_grad_buffer_on_constants():
    x = Tensor(np.ones(3), requires_grad=True)
    c = Tensor(np.full(3, 2.0))
    (x * c).sum().backward()
    assert c.grad is None
    assert x.grad.tolist() == [2.0, 2.0, 2.0]


def test_flags_are_fixed_when_graph_is_built():
    w = Tensor(np.ones((2, 1)), requires_grad=False)
    x = Tensor(np.ones((1, 2)), requires_grad=True)
    loss = dense(x, w).sum()
    w.requires_grad = True
    loss.backward()
    assert w.grad is None
    assert x.grad is not None


def test_shared_subexpression_accumulates():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    (y + y * 3).sum().backward()
    assert x.grad.tolist() == [16.0]


def test_float32_default_and_float64_opt_in():
    assert Tensor([1.0]).dtype == np.float32
    t = Tensor([1.0], dtype=np.float64)
    assert (t * 2 + 1).dtype == np.float64
    assert conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3)))).dtype == np.float32


def test_determinism():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.random((2, 3, 8, 8)), requires_grad=True)
        k = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        loss = sigmoid(conv2d(x, k, stride=2, padding=1)).mean()
        loss.backward()
        return loss.data.tobytes(), x.grad.tobytes(), k.grad.tobytes()

    assert run() == run()


def test_avg_pool_matches_window_means():
    rng = np.random.default_rng(5)
    x = rng.random((1, 2, 7, 9))
    for size, stride in [(2, 2), (3, 1), (3, 2), (7, 1)]:
        out = avg_pool2d(Tensor(x, dtype=np.float64), size, stride).data
        for i in range(out.shape[2]):
            for j in range(out.shape[3]):
                window = x[:, :, i * stride : i * stride + size, j * stride : j * stride + size]
                np.testing.assert_allclose(out[:, :, i, j], window.mean(axis=(2, 3)), atol=1e-12)


# gradient checks against central differences (float64, h = 1e-3)

RTOL = 1e-4


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (3, 2)])
def test_conv_gradients(stride, padding):
    rng = np.random.default_rng(stride * 7 + padding)
    x = rng.normal(size=(2, 2, 6, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out_shape = conv2d(Tensor(x), Tensor(k), stride=stride, padding=padding).shape
    fn = scalarize(lambda x, k, b: conv2d(x, k, b, stride, padding), rng.normal(size=out_shape))
    assert check(fn, [x, k, b]) < RTOL


def test_transposed_conv_gradients():
    rng = np.random.default_rng(11)
    x, k, b = rng.normal(size=(2, 2, 3, 4)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    fn = scalarize(conv_transpose2d, rng.normal(size=(2, 3, 6, 8)))
    assert check(fn, [x, k, b]) < RTOL


def test_dense_gradients():
    rng = np.random.default_rng(12)
    fn = scalarize(dense, rng.normal(size=(4, 3)))
    assert check(fn, [rng.normal(size=(4, 5)), rng.normal(size=(5, 3)), rng.normal(size=3)]) < RTOL


@pytest.mark.parametrize("kind", ["sigmoid", "tanh", "relu", "leaky_relu"])
def test_activation_gradients(kind):
    rng = np.random.default_rng(13)
    x = rng.normal(size=(3, 4))
    x = np.where(np.abs(x) < 0.05, 0.5, x)  # keep away from the kink at 0
    fn = scalarize(lambda t: activation(t, kind, 0.2), rng.normal(size=(3, 4)))
    assert check(fn, [x]) < RTOL


@pytest.mark.parametrize("size,stride", [(2, 2), (3, 1), (3, 2)])
def test_avg_pool_gradients(size, stride):
    rng = np.random.default_rng(size + stride)
    x = rng.normal(size=(2, 1, 7, 6))
    out_shape = avg_pool2d(Tensor(x), size, stride).shape
    fn = scalarize(lambda t: avg_pool2d(t, size, stride), rng.normal(size=out_shape))
    assert check(fn, [x]) < RTOL


def test_elementwise_gradients():
    rng = np.random.default_rng(14)
    a = rng.uniform(0.5, 2.0, size=(2, 3))
    b = rng.uniform(0.5, 2.0, size=(1, 3))

    def fn(a, b):
        return ((a * b + a / b - b) ** 2 + (a.sqrt() + a.log()).abs()).mean(axis=1).sum()

    assert check(fn, [a, b]) < RTOL
