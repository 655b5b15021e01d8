import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgbp import _kernels_py, kernels
from mgbp import tensor as T
from oracles import conv_loop, conv_transposed_loop, dense_matrix, resize_1d

rng = np.random.default_rng(1234)


@pytest.mark.parametrize("shape,kernel,stride,pad,cout", [
    ((2, 3, 7, 6), (3, 3), (1, 1), (1, 1), 4),
    ((1, 2, 8, 8), (4, 4), (2, 2), (1, 1), 3),
    ((1, 2, 9, 9), (5, 5), (3, 3), (1, 1), 2),
    ((1, 1, 5, 7), (2, 3), (1, 2), (0, 1), 2),
])
def test_conv_matches_direct_loop(shape, kernel, stride, pad, cout):
    x = rng.standard_normal(shape)
    w = rng.standard_normal((cout, shape[1]) + kernel)
    b = rng.standard_normal(cout)
    spec = T.ConvSpec(kernel, stride, pad, shape[1], cout)
    np.testing.assert_allclose(T.conv(x, w, b, spec), conv_loop(x, w, b, stride, pad),
                               rtol=1e-12, atol=1e-12)


def test_conv3d_matches_direct_loop():
    x = rng.standard_normal((1, 2, 5, 6, 6))
    w = rng.standard_normal((3, 2, 3, 4, 4))
    spec = T.ConvSpec((3, 4, 4), (1, 2, 2), (0, 1, 1), 2, 3)
    np.testing.assert_allclose(T.conv(x, w, None, spec),
                               conv_loop(x, w, None, (1, 2, 2), (0, 1, 1)), atol=1e-12)


@pytest.mark.parametrize("shape,kernel,stride,pad", [
    ((1, 3, 4, 4), (4, 4), (2, 2), (1, 1)),
    ((2, 2, 3, 3), (5, 5), (3, 3), (1, 1)),
    ((1, 2, 3, 4, 4), (3, 4, 4), (1, 2, 2), (1, 1, 1)),
])
def test_transposed_conv_matches_scatter_loop(shape, kernel, stride, pad):
    cout = 2
    x = rng.standard_normal(shape)
    w = rng.standard_normal((shape[1], cout) + kernel)
    b = rng.standard_normal(cout)
    spec = T.ConvSpec(kernel, stride, pad, shape[1], cout)
    np.testing.assert_allclose(T.conv_transposed(x, w, b, spec),
                               conv_transposed_loop(x, w, b, stride, pad), atol=1e-12)


def test_transposed_conv_is_dense_adjoint():
    spec = T.ConvSpec((4, 4), (2, 2), (1, 1), 2, 3)
    w = rng.standard_normal(spec.weight_shape())
    x_shape = (1, 2, 6, 6)
    y_shape = (1, 3) + spec.out_extent((6, 6))
    A = dense_matrix(lambda v: T.conv(v, w, None, spec), x_shape)
    At = dense_matrix(lambda v: T.conv_transposed(v, w, None, spec.transposed()), y_shape)
    np.testing.assert_allclose(At, A.T, atol=1e-13)


@settings(max_examples=60, deadline=None)
@given(k=st.integers(1, 5), s=st.integers(1, 3), p=st.integers(0, 2), n=st.integers(5, 9),
       cin=st.integers(1, 3), cout=st.integers(1, 3), seed=st.integers(0, 10 ** 6))
def test_adjoint_inner_product_property(k, s, p, n, cin, cout, seed):
    spec = T.ConvSpec((k, k), (s, s), (p, p), cin, cout)
    if (n + 2 * p - k) // s + 1 < 1:
        return
    r = np.random.default_rng(seed)
    w = r.standard_normal(spec.weight_shape())
    x = r.standard_normal((2, cin, n, n))
    y = r.standard_normal((2, cout) + spec.out_extent((n, n)))
    lhs = np.sum(T.conv(x, w, None, spec) * y)
    # scattering onto the explicit input shape is the adjoint for any geometry
    cols = np.matmul(w.reshape(cout, -1).T, y.reshape(2, cout, -1))
    rhs = np.sum(x * T.col2im_nd(cols, x.shape, spec))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))
    # the transposed conv has the natural extent (m-1)s - 2p + k; when that
    # round-trips to n it is the same map
    if spec.transposed_extent(y.shape[2:]) == (n, n):
        back = T.conv_transposed(y, w, None, spec.transposed())
        assert abs(lhs - np.sum(x * back)) <= 1e-10 * max(1.0, abs(lhs))


def test_extents_and_errors():
    spec = T.ConvSpec((4, 4), (2, 2), (1, 1), 1, 1)
    assert spec.out_extent((8, 8)) == (4, 4)
    assert spec.transposed_extent((4, 4)) == (8, 8)
    with pytest.raises(T.InvalidSpecError):
        T.ConvSpec((3, 3), (0, 1), (0, 0), 1, 1)
    with pytest.raises(T.InvalidSpecError):
        T.ConvSpec((5, 5), (1, 1), (0, 0), 1, 1).out_extent((3, 3))
    with pytest.raises(T.DimensionError):
        T.conv(np.zeros((1, 2, 4, 4)), np.zeros((1, 1, 4, 4)), None, spec)
    with pytest.raises(T.DimensionError):
        T.conv(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)), None, spec)
    with pytest.raises(T.DimensionError):
        T.concat_channels(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 5)))


@pytest.mark.parametrize("n,factor,direction", [(8, 2, "down"), (12, 3, "down"),
                                                 (4, 2, "up"), (5, 4, "up")])
def test_bicubic_matrix_matches_per_sample_oracle(n, factor, direction):
    v = rng.uniform(0, 255, n)
    got = T.bicubic_matrix(n, factor, direction) @ v
    np.testing.assert_allclose(got, resize_1d(v, factor, direction), atol=1e-10)


def test_bicubic_preserves_constants_and_sizes():
    x = np.full((1, 3, 12, 8), 37.5)
    down = T.bicubic_resize(x, 4, "down")
    assert down.shape == (1, 3, 3, 2)
    np.testing.assert_allclose(down, 37.5, atol=1e-12)
    np.testing.assert_allclose(T.bicubic_resize(down, 4, "up"), 37.5, atol=1e-12)
    assert not T.bicubic_matrix(8, 2, "down").flags.writeable


def test_gaussian_blur_normalized_and_symmetric():
    g = T.gaussian_weights(7, 1.17)
    assert g.sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_array_equal(g, g[::-1])
    x = np.full((1, 1, 9, 9), 4.0)
    np.testing.assert_allclose(T.gaussian_blur(x, 7, 1.17), 4.0, atol=1e-12)
    with pytest.raises(T.InvalidSpecError):
        T.gaussian_weights(6, 1.0)


def test_shift_matrix_replicates_border():
    m = T.shift_matrix(4, 2)
    np.testing.assert_array_equal(m @ np.arange(4.0), [2, 3, 3, 3])


def test_backends_agree_bitwise():
    x = rng.standard_normal((1, 4, 3, 10, 10))
    ext = (1, 4, 4)
    cols = _kernels_py.im2col(x, (3, 4, 4), (1, 2, 2), ext)
    np.testing.assert_array_equal(kernels.im2col(x, (3, 4, 4), (1, 2, 2), ext), cols)
    np.testing.assert_array_equal(
        kernels.col2im(cols, x.shape, (3, 4, 4), (1, 2, 2), ext),
        _kernels_py.col2im(cols, x.shape, (3, 4, 4), (1, 2, 2), ext))
    assert kernels.BACKEND in ("cython", "python")


def test_float32_supported():
    spec = T.ConvSpec((3, 3), (1, 1), (1, 1), 2, 2)
    x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
    w = rng.standard_normal(spec.weight_shape()).astype(np.float32)
    out = T.conv(x, w, None, spec)
    assert out.dtype == np.float32
    np.testing.assert_allclose(out, conv_loop(x, w, None, (1, 1), (1, 1)), rtol=1e-4, atol=1e-4)
