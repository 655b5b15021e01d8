"""Dense tensor primitives for 2-D images and 3-D spatio-temporal cubes.

Tensors are plain numpy arrays laid out as ``(N, C, H, W)`` for images and
``(N, C, T, H, W)`` for video cubes. Convolutions use the cross-correlation
convention (no kernel flip); ``conv_transposed`` is the exact adjoint of
``conv`` for the same weights and spec.

Resampling and blurring are separable linear maps, implemented by applying
a small per-axis matrix along the height and width axes. The autograd
module reuses those matrices, so taped and untaped results agree bitwise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import kernels

DEFAULT_DTYPE = np.float64


class DimensionError(ValueError):
    """Tensor shapes are incompatible with an operation."""


class InvalidSpecError(ValueError):
    """An operator specification is invalid or produces an empty output."""


def _triple(v, nd):
    if isinstance(v, int):
        v = (v,) * nd
    v = tuple(int(e) for e in v)
    if len(v) != nd:
        raise InvalidSpecError(f"expected {nd} values, got {v}")
    return v


@dataclass(frozen=True)
class ConvSpec:
    """Kernel/stride/padding per axis plus channel counts.

    ``kernel`` has 2 entries (h, w) for images or 3 (t, h, w) for cubes.
    For a transposed convolution ``in_channels`` is the channel count of the
    tensor being upsampled.
    """

    kernel: tuple
    stride: tuple
    padding: tuple
    in_channels: int
    out_channels: int

    def __post_init__(self):
        nd = len(self.kernel) if not isinstance(self.kernel, int) else 2
        object.__setattr__(self, "kernel", _triple(self.kernel, nd))
        object.__setattr__(self, "stride", _triple(self.stride, nd))
        object.__setattr__(self, "padding", _triple(self.padding, nd))
        if nd not in (2, 3):
            raise InvalidSpecError(f"kernel must have 2 or 3 axes, got {nd}")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise InvalidSpecError(
                f"need kernel>=1, stride>=1, padding>=0; got {self.kernel}, "
                f"{self.stride}, {self.padding}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise InvalidSpecError("channel counts must be >= 1")

    @property
    def ndim(self):
        return len(self.kernel)

    @property
    def kernel_volume(self):
        return math.prod(self.kernel)

    def out_extent(self, extent):
        """Spatial (or spatio-temporal) output extent of ``conv``."""
        out = []
        for n, k, s, p, name in zip(extent, self.kernel, self.stride,
                                    self.padding, _axis_names(self.ndim)):
            o = (n + 2 * p - k) // s + 1
            if o < 1:
                raise InvalidSpecError(
                    f"conv output extent along {name} is {o} (input {n}, "
                    f"kernel {k}, stride {s}, pad {p})")
            out.append(o)
        return tuple(out)

    def transposed_extent(self, extent):
        """Output extent of ``conv_transposed``."""
        out = []
        for n, k, s, p, name in zip(extent, self.kernel, self.stride,
                                    self.padding, _axis_names(self.ndim)):
            o = (n - 1) * s - 2 * p + k
            if o < 1:
                raise InvalidSpecError(
                    f"transposed conv output extent along {name} is {o}")
            out.append(o)
        return tuple(out)

    def transposed(self):
        """Spec of the adjoint map (channel counts swapped)."""
        return ConvSpec(self.kernel, self.stride, self.padding,
                        self.out_channels, self.in_channels)

    def weight_shape(self, transposed=False):
        if transposed:
            return (self.in_channels, self.out_channels) + self.kernel
        return (self.out_channels, self.in_channels) + self.kernel


def _axis_names(nd):
    return ("time", "height", "width") if nd == 3 else ("height", "width")


def _check_input(x, w, spec, transposed):
    nd = spec.ndim
    if x.ndim != nd + 2:
        raise DimensionError(
            f"input has {x.ndim} axes, spec expects {nd + 2} (N, C, ...)")
    if x.shape[1] != spec.in_channels:
        raise DimensionError(
            f"channel axis: input has {x.shape[1]}, spec expects "
            f"{spec.in_channels}")
    expected = spec.weight_shape(transposed)
    if tuple(w.shape) != expected:
        raise DimensionError(
            f"weights shape {tuple(w.shape)} != expected {expected}")


def _to5(x):
    return x[:, :, None] if x.ndim == 4 else x


def _k3(t, nd):
    return (1,) + t if nd == 2 else t


def conv_forward(x, w, b, spec):
    """Strided convolution returning ``(out, cols)``; ``cols`` feeds backward."""
    _check_input(x, w, spec, transposed=False)
    nd = spec.ndim
    out_ext = spec.out_extent(x.shape[2:])
    pad = ((0, 0), (0, 0)) + tuple((p, p) for p in spec.padding)
    xp = np.pad(x, pad) if any(spec.padding) else x
    xp = np.ascontiguousarray(_to5(xp))
    cols = kernels.im2col(xp, _k3(spec.kernel, nd), _k3(spec.stride, nd),
                          _k3(out_ext, nd))
    w2 = w.reshape(spec.out_channels, -1)
    out = np.matmul(w2, cols)
    if b is not None:
        out += b.reshape(1, -1, 1)
    return out.reshape((x.shape[0], spec.out_channels) + out_ext), cols


def conv(x, weights, bias, spec):
    """Cross-correlation of ``x`` with ``weights`` (out, in, *kernel)."""
    return conv_forward(x, weights, bias, spec)[0]


def col2im_nd(cols, out_shape, spec):
    """Scatter-add columns back onto an unpadded tensor of ``out_shape``."""
    nd = spec.ndim
    in_ext = spec.out_extent(out_shape[2:])
    padded = tuple(n + 2 * p for n, p in zip(out_shape[2:], spec.padding))
    full = kernels.col2im(cols, (out_shape[0], out_shape[1]) + _k3(padded, nd),
                          _k3(spec.kernel, nd), _k3(spec.stride, nd),
                          _k3(in_ext, nd))
    if nd == 2:
        full = full[:, :, 0]
    sl = (slice(None), slice(None)) + tuple(
        slice(p, p + n) for p, n in zip(spec.padding, out_shape[2:]))
    return np.ascontiguousarray(full[sl])


def conv_transposed(x, weights, bias, spec):
    """Strided transposed convolution, the adjoint of :func:`conv`.

    ``weights`` has shape (in, out, *kernel): the same array used by ``conv``
    for the reverse direction.
    """
    _check_input(x, weights, spec, transposed=True)
    out_ext = spec.transposed_extent(x.shape[2:])
    adj = spec.transposed()
    w2 = weights.reshape(spec.in_channels, -1)
    cols = np.matmul(w2.T, x.reshape(x.shape[0], spec.in_channels, -1))
    out = col2im_nd(cols, (x.shape[0], spec.out_channels) + out_ext, adj)
    if bias is not None:
        out += bias.reshape((1, -1) + (1,) * spec.ndim)
    return out


def relu(x):
    return np.maximum(x, 0.0)


def concat_channels(a, b):
    if a.ndim != b.ndim or a.shape[:1] != b.shape[:1] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(
            f"cannot concatenate {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=1)


# -- separable linear resampling ------------------------------------------

def apply_rows(x, m):
    """Apply matrix ``m`` along the height axis (second to last)."""
    return np.matmul(m, x)


def apply_cols(x, m):
    """Apply matrix ``m`` along the width axis (last)."""
    return np.matmul(x, m.T)


def cubic(x, a=-0.5):
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    return np.where(
        ax <= 1, (a + 2) * ax3 - (a + 3) * ax2 + 1,
        np.where(ax < 2, a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a, 0.0))


@lru_cache(maxsize=256)
def bicubic_matrix(n_in, factor, direction):
    """Resampling matrix (n_out, n_in) with replicate borders.

    Downscaling widens the kernel by ``factor`` (antialiasing), as in the
    usual imresize convention. Rows are normalized to sum to one.
    """
    factor = int(factor)
    if factor < 1:
        raise InvalidSpecError(f"factor must be a positive integer, got {factor}")
    if direction == "up":
        n_out, scale = n_in * factor, 1.0 / factor
        width = 1.0
    elif direction == "down":
        n_out, scale = n_in // factor, float(factor)
        width = float(factor)
    else:
        raise InvalidSpecError(f"direction must be 'up' or 'down', got {direction!r}")
    if n_out < 1:
        raise InvalidSpecError(
            f"bicubic {direction} by {factor} of extent {n_in} is empty")
    m = np.zeros((n_out, n_in))
    support = 2.0 * width
    for i in range(n_out):
        u = (i + 0.5) * scale - 0.5
        lo = math.floor(u - support) + 1
        hi = math.ceil(u + support) - 1
        taps = np.arange(lo, hi + 1)
        w = cubic((u - taps) / width)
        w = w / w.sum()
        np.add.at(m[i], np.clip(taps, 0, n_in - 1), w)
    m.setflags(write=False)
    return m


def bicubic_resize(x, factor, direction):
    """Bicubic (a = -0.5) resize of the two trailing spatial axes."""
    if factor == 1:
        return x
    mh = bicubic_matrix(x.shape[-2], factor, direction).astype(x.dtype, copy=False)
    mw = bicubic_matrix(x.shape[-1], factor, direction).astype(x.dtype, copy=False)
    return apply_cols(apply_rows(x, mh), mw)


def gaussian_weights(kernel_size, sigma):
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise InvalidSpecError(f"gaussian kernel size must be odd, got {kernel_size}")
    if sigma <= 0:
        raise InvalidSpecError(f"sigma must be positive, got {sigma}")
    r = kernel_size // 2
    t = np.arange(-r, r + 1, dtype=float)
    g = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return g / g.sum()


@lru_cache(maxsize=256)
def blur_matrix(n, kernel_size, sigma):
    g = gaussian_weights(kernel_size, sigma)
    r = kernel_size // 2
    m = np.zeros((n, n))
    for i in range(n):
        np.add.at(m[i], np.clip(np.arange(i - r, i + r + 1), 0, n - 1), g)
    m.setflags(write=False)
    return m


def gaussian_blur(x, kernel_size, sigma):
    """Normalized separable Gaussian blur with replicate borders."""
    mh = blur_matrix(x.shape[-2], kernel_size, float(sigma)).astype(x.dtype, copy=False)
    mw = blur_matrix(x.shape[-1], kernel_size, float(sigma)).astype(x.dtype, copy=False)
    return apply_cols(apply_rows(x, mh), mw)


@lru_cache(maxsize=512)
def shift_matrix(n, offset):
    """Row ``i`` selects element ``clip(i + offset)`` (replicate border)."""
    m = np.zeros((n, n))
    m[np.arange(n), np.clip(np.arange(n) + offset, 0, n - 1)] = 1.0
    m.setflags(write=False)
    return m
