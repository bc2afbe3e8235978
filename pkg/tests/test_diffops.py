import zlib
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lipvsr import _kernels
from lipvsr.diffops import (
    Kernel,
    Tensor,
    abs_,
    add,
    backward,
    concat_channels,
    conv2d,
    conv2d_transpose,
    mse_loss,
    no_grad,
    pick,
    pixel_shuffle,
    pixel_unshuffle,
    relu,
    rgb_to_y,
    scale,
    slice_channels,
    sum_all,
)
from lipvsr.errors import ConfigError, ShapeError, UsageError

from conftest import brute_operator, numeric_grad, rel_err


def _vdot(a, b):
    return float(np.vdot(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)))


# ---------------------------------------------------------------- conv2d


def test_delta_kernel_is_identity(rng):
    x = rng.random((2, 1, 7, 5))
    np.testing.assert_array_equal(conv2d(x, Kernel.delta(1)).data, x)


def test_scaled_delta_scales(rng):
    x = rng.random((1, 1, 6, 6))
    np.testing.assert_allclose(conv2d(x, Kernel.delta(1, gain=2.0)).data, 2 * x)


@pytest.mark.parametrize("padding", ["circular", "zero"])
def test_conv_matches_brute_force_operator(rng, padding):
    x = rng.standard_normal((1, 2, 6, 6))
    k = Kernel.random(3, 2, rng=rng, padding=padding)
    m = brute_operator(k.weight.data, (2, 6, 6), padding)
    assert m.shape == (108, 72)
    np.testing.assert_allclose(conv2d(x, k).data.ravel(), m @ x.ravel(), atol=1e-6)


def test_conv_output_shape_and_bias(rng):
    k = Kernel.random(4, 3, k=5, rng=rng, bias=True)
    x = rng.random((2, 3, 9, 7))
    out = conv2d(x, k).data
    assert out.shape == (2, 4, 9, 7)
    no_bias = conv2d(x, k.linear_part()).data
    np.testing.assert_allclose(out - no_bias, np.broadcast_to(k.bias.data[None, :, None, None], out.shape))


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(np.zeros((1, 2, 4, 4)), Kernel.delta(3))


def test_even_kernel_rejected():
    with pytest.raises(ConfigError):
        Kernel.from_arrays(np.zeros((1, 1, 2, 2)))


@pytest.mark.parametrize("padding", ["zero", "circular"])
def test_linearity(rng, padding):
    k = Kernel.random(3, 2, rng=rng, padding=padding)
    x, y = rng.standard_normal((2, 1, 2, 8, 8))
    a, b = 0.7, -1.9
    lhs = conv2d(a * x + b * y, k).data
    rhs = a * conv2d(x, k).data + b * conv2d(y, k).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


def test_translation_equivariance_circular(rng):
    k = Kernel.random(2, 3, rng=rng, padding="circular")
    x = rng.standard_normal((1, 3, 8, 10))
    shifted = np.roll(x, (3, -2), axis=(2, 3))
    np.testing.assert_allclose(conv2d(shifted, k).data, np.roll(conv2d(x, k).data, (3, -2), axis=(2, 3)), atol=1e-12)


# ---------------------------------------------------------------- transpose


def test_transpose_delta_identity(rng):
    y = rng.random((1, 1, 5, 5))
    np.testing.assert_array_equal(conv2d_transpose(y, Kernel.delta(1)).data, y)


@given(
    c_in=st.integers(1, 3),
    c_out=st.integers(1, 3),
    h=st.integers(1, 9),
    w=st.integers(1, 9),
    k=st.sampled_from([1, 3, 5]),
    padding=st.sampled_from(["zero", "circular"]),
    seed=st.integers(0, 2**31 - 1),
)
@settings(max_examples=60, deadline=None)
def test_adjointness(c_in, c_out, h, w, k, padding, seed):
    rng = np.random.default_rng(seed)
    kern = Kernel.random(c_out, c_in, k=k, rng=rng, padding=padding, bias=True)
    x = rng.standard_normal((2, c_in, h, w))
    y = rng.standard_normal((2, c_out, h, w))
    lhs = _vdot(conv2d(x, kern.linear_part()).data, y)
    rhs = _vdot(x, conv2d_transpose(y, kern).data)
    assert abs(lhs - rhs) <= 1e-6 * np.linalg.norm(x) * np.linalg.norm(y)


def test_transpose_ignores_bias(rng):
    k = Kernel.random(2, 2, rng=rng, bias=True)
    y = rng.random((1, 2, 4, 4))
    np.testing.assert_array_equal(conv2d_transpose(y, k).data, conv2d_transpose(y, k.linear_part()).data)


def test_one_pixel_zero_padding_is_center_slice_transpose(rng):
    k = Kernel.random(3, 2, rng=rng, padding="zero")
    y = rng.standard_normal((1, 3, 1, 1))
    center = k.weight.data[:, :, 1, 1]
    np.testing.assert_allclose(conv2d_transpose(y, k).data[0, :, 0, 0], center.T @ y[0, :, 0, 0])


def test_one_pixel_circular_padding_folds_all_taps(rng):
    # on a 1x1 torus every tap wraps onto the same pixel
    k = Kernel.random(3, 2, rng=rng, padding="circular")
    y = rng.standard_normal((1, 3, 1, 1))
    folded = k.weight.data.sum(axis=(2, 3))
    np.testing.assert_allclose(conv2d_transpose(y, k).data[0, :, 0, 0], folded.T @ y[0, :, 0, 0])


def test_transpose_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d_transpose(np.zeros((1, 2, 3, 3)), Kernel.random(3, 2))


# ---------------------------------------------------------------- relu


def test_relu_values():
    assert relu(Tensor(np.array([-1.0]))).data[0] == 0
    assert relu(Tensor(np.array([3.0]))).data[0] == 3


def test_relu_idempotent(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    np.testing.assert_array_equal(relu(relu(x)).data, relu(x).data)


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
    backward(sum_all(relu(x)))
    np.testing.assert_array_equal(x.grad, 0)


def test_relu_negative_inputs_give_zero_gradient(rng):
    x = Tensor(-rng.random((1, 2, 3, 3)) - 0.1, requires_grad=True)
    backward(sum_all(relu(x)))
    np.testing.assert_array_equal(x.grad, 0)


# ---------------------------------------------------------------- pixel shuffle


def test_pixel_shuffle_shape(rng):
    assert pixel_shuffle(rng.random((1, 16, 8, 8)), 4).shape == (1, 1, 32, 32)


def test_pixel_shuffle_identity_s1(rng):
    x = rng.random((1, 3, 4, 4))
    np.testing.assert_array_equal(pixel_shuffle(x, 1).data, x)


def test_pixel_shuffle_layout(rng):
    x = rng.random((2, 8, 3, 5))
    s = 2
    out = pixel_shuffle(x, s).data
    for b in range(2):
        for c in range(2):
            for h in range(3):
                for w in range(5):
                    for i in range(s):
                        for j in range(s):
                            assert out[b, c, h * s + i, w * s + j] == x[b, c * s * s + i * s + j, h, w]


def test_pixel_shuffle_bijection(rng):
    x = rng.random((2, 32, 5, 6))
    y = pixel_shuffle(x, 4).data
    np.testing.assert_array_equal(np.sort(y.ravel()), np.sort(x.ravel()))
    assert np.array_equal(pixel_unshuffle(y, 4).data, x)


def test_pixel_shuffle_rejects_bad_channels():
    with pytest.raises(ShapeError):
        pixel_shuffle(np.zeros((1, 15, 2, 2)), 4)


def test_pixel_shuffle_gradient_is_unshuffle(rng):
    x = Tensor(rng.random((1, 16, 3, 3)), requires_grad=True)
    up = rng.standard_normal((1, 1, 12, 12))
    backward(sum_all(_weighted(pixel_shuffle(x, 4), up)))
    np.testing.assert_array_equal(x.grad, pixel_unshuffle(up, 4).data)


def _weighted(t, w):
    from lipvsr.diffops import _record

    return _record(t.data * w, [t], lambda g: (g * w,))


# ---------------------------------------------------------------- concat


def test_concat_shapes(rng):
    xs = [rng.random((1, 3, 4, 5)) for _ in range(3)]
    assert concat_channels(xs).shape == (1, 9, 4, 5)


def test_concat_single_identity(rng):
    x = Tensor(rng.random((1, 3, 4, 5)))
    assert concat_channels([x]) is x


def test_concat_slice_back(rng):
    a, b = rng.random((1, 2, 3, 3)), rng.random((1, 4, 3, 3))
    np.testing.assert_array_equal(slice_channels(concat_channels([a, b]), 0, 2).data, a)


def test_concat_spatial_mismatch():
    with pytest.raises(ShapeError):
        concat_channels([np.zeros((1, 1, 3, 3)), np.zeros((1, 1, 3, 4))])


# ---------------------------------------------------------------- mse


def test_mse_zero(rng):
    x = rng.random((1, 1, 4, 4))
    assert mse_loss(x, x.copy()).item() == 0.0


def test_mse_constant_offset(rng):
    x = rng.random((1, 1, 4, 4))
    assert mse_loss(x + 0.1, x).item() == pytest.approx(0.01, abs=1e-12)


def test_mse_matches_naive_loop(rng):
    a, b = rng.random((2, 1, 5, 7)), rng.random((2, 1, 5, 7))
    total, n = 0.0, 0
    for i in range(a.shape[0]):
        for y in range(a.shape[2]):
            for x in range(a.shape[3]):
                total += (a[i, 0, y, x] - b[i, 0, y, x]) ** 2
                n += 1
    assert mse_loss(a, b).item() == pytest.approx(total / n, rel=1e-12)


def test_mse_shape_mismatch():
    with pytest.raises(ShapeError):
        mse_loss(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))


# ---------------------------------------------------------------- backward


def test_backward_needs_scalar(rng):
    x = Tensor(rng.random((1, 1, 2, 2)), requires_grad=True)
    with pytest.raises(UsageError):
        backward(relu(x))


def test_backward_accumulates(rng):
    x = Tensor(rng.random((1, 1, 3, 3)), requires_grad=True)
    backward(sum_all(x))
    backward(sum_all(x))
    np.testing.assert_array_equal(x.grad, 2.0)
    x.zero_grad()
    assert x.grad is None


def test_no_grad_records_nothing(rng):
    x = Tensor(rng.random((1, 1, 3, 3)), requires_grad=True)
    with no_grad():
        y = relu(x)
    assert not y.requires_grad


def test_conv_weight_gradients_match_finite_differences(rng):
    x = rng.standard_normal((2, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    t = rng.standard_normal((2, 3, 5, 5))
    k = Kernel.from_arrays(w, b, requires_grad=True)
    backward(mse_loss(conv2d(x, k), t))

    def f():
        return mse_loss(conv2d(x, Kernel.from_arrays(w, b)), t).item()

    assert rel_err(k.weight.grad, numeric_grad(f, w)) <= 1e-4
    assert rel_err(k.bias.grad, numeric_grad(f, b)) <= 1e-4


# Every differentiable op, three shapes each, checked against central differences.
SHAPES = [(1, 2, 4, 4), (2, 3, 5, 3), (1, 4, 6, 7)]


def _op_cases():
    def conv_case(shape, rng, padding):
        k = Kernel.random(3, shape[1], rng=rng, padding=padding, bias=True, requires_grad=True)
        return [k.weight, k.bias], lambda x: conv2d(x, k)

    def convT_case(shape, rng, padding):
        k = Kernel.random(shape[1], 2, rng=rng, padding=padding, requires_grad=True)
        return [k.weight], lambda x: conv2d_transpose(x, k)

    def shuffle_case(shape, rng):
        return [], lambda x: pixel_shuffle(concat_channels([x] * 4 if shape[1] % 4 else [x]), 2)

    def unshuffle_case(shape, rng):
        return [], lambda x: pixel_unshuffle(_crop_even(x), 2)

    def concat_case(shape, rng):
        other = Tensor(rng.standard_normal(shape), requires_grad=True)
        return [other], lambda x: concat_channels([x, other, x])

    def slice_case(shape, rng):
        return [], lambda x: slice_channels(x, 1, shape[1])

    def add_scale_case(shape, rng):
        other = Tensor(rng.standard_normal(shape), requires_grad=True)
        return [other], lambda x: scale(add(x, other), -1.7)

    def relu_case(shape, rng):
        return [], relu

    def abs_pick_case(shape, rng):
        return [], lambda x: abs_(pick(x, (0, 0, 1, 1)))

    def rgb_case(shape, rng):
        return [], lambda x: rgb_to_y(slice_channels(concat_channels([x, x, x]), 0, 3))

    return {
        "conv2d_zero": lambda s, r: conv_case(s, r, "zero"),
        "conv2d_circular": lambda s, r: conv_case(s, r, "circular"),
        "conv2d_transpose_zero": lambda s, r: convT_case(s, r, "zero"),
        "conv2d_transpose_circular": lambda s, r: convT_case(s, r, "circular"),
        "pixel_shuffle": shuffle_case,
        "pixel_unshuffle": unshuffle_case,
        "concat": concat_case,
        "slice": slice_case,
        "add_scale": add_scale_case,
        "relu": relu_case,
        "abs_pick": abs_pick_case,
        "rgb_to_y": rgb_case,
    }


def _crop_even(x):
    from lipvsr.diffops import _record

    h, w = x.shape[2] - x.shape[2] % 2, x.shape[3] - x.shape[3] % 2
    pad = ((0, 0), (0, 0), (0, x.shape[2] - h), (0, x.shape[3] - w))
    return _record(x.data[:, :, :h, :w].copy(), [x], lambda g: (np.pad(g, pad),))


@pytest.mark.parametrize("op", sorted(_op_cases()))
@pytest.mark.parametrize("shape", SHAPES, ids=str)
def test_gradients_finite_difference(op, shape):
    rng = np.random.default_rng(zlib.crc32(f"{op}{shape}".encode()))
    extra, fn = _op_cases()[op](shape, rng)
    x = Tensor(rng.standard_normal(shape), requires_grad=True)
    out = fn(x)
    target = rng.standard_normal(out.shape)
    backward(mse_loss(out, target))

    def loss():
        with no_grad():
            return mse_loss(fn(Tensor(x.data)), target).item()

    assert rel_err(x.grad, numeric_grad(loss, x.data)) <= 1e-4
    for p in extra:
        assert rel_err(p.grad, numeric_grad(loss, p.data)) <= 1e-4


# ---------------------------------------------------------------- kernels


@pytest.mark.parametrize("k", [1, 3, 5])
def test_numba_and_numpy_kernels_agree(rng, k):
    xp = rng.standard_normal((2, 3, 7 + k - 1, 6 + k - 1))
    cols_np = _kernels.im2col_numpy(xp, k)
    np.testing.assert_array_equal(_kernels.im2col(xp, k), cols_np)
    back = _kernels.col2im(cols_np, 3, k, *xp.shape[2:])
    np.testing.assert_allclose(back, _kernels.col2im_numpy(cols_np, 3, k, *xp.shape[2:]), atol=1e-12)
