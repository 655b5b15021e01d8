"""Tiled inference, noise-amplitude sweeps and frozen-activation filters."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import graph as G
from .graph import ConfigError


class TilingError(RuntimeError):
    """The accumulated blending weight vanished somewhere (a planning bug)."""


def hann_window(n):
    """Raised-cosine taper of length ``n``: symmetric, strictly positive, <= 1.

    The endpoints sit one step inside the zeros of the cosine, so no sample
    gets zero weight.
    """
    i = np.arange(n)
    return 0.5 - 0.5 * np.cos(2.0 * math.pi * (i + 1) / (n + 1))


@dataclass(frozen=True)
class BlendWindow:
    """Separable tile weight: the outer product of per-axis vectors."""

    axes: tuple

    def weights(self):
        w = np.ones(())
        for v in self.axes:
            w = np.multiply.outer(w, v)
        return w


def axis_window(n, low_margin=0, high_margin=0, taper=hann_window):
    """Taper over ``[low_margin, n - high_margin)`` and zero outside.

    Margins discard tile-output samples close to an interior tile edge,
    where zero padding makes a tile disagree with the full image.
    """
    w = np.zeros(n)
    w[low_margin:n - high_margin] = taper(n - low_margin - high_margin)
    return w


@dataclass
class TilePlan:
    input_shape: tuple
    tile: tuple
    strides: tuple
    margin: tuple
    origins: list = field(default_factory=list)
    windows: list = field(default_factory=list)

    @property
    def overlap(self):
        return tuple(t - s for t, s in zip(self.tile, self.strides))

    def __len__(self):
        return len(self.origins)

    def slices(self, origin):
        return tuple(slice(o, o + t) for o, t in zip(origin, self.tile))

    def coverage(self):
        """Number of tiles containing each sample."""
        count = np.zeros(self.input_shape, dtype=int)
        for o in self.origins:
            count[self.slices(o)] += 1
        return count

    def weight_sum(self):
        acc = np.zeros(self.input_shape)
        for o, win in zip(self.origins, self.windows):
            acc[self.slices(o)] += win.weights()
        return acc


def axis_origins(n, tile, stride):
    """``0, stride, 2*stride, ...`` with the last tile clamped to the end."""
    if tile > n:
        raise ConfigError(f"tile extent {tile} exceeds input extent {n}")
    if stride < 1:
        raise ConfigError(f"tile stride must be >= 1, got {stride}")
    out = list(range(0, n - tile + 1, stride))
    if out[-1] != n - tile:
        out.append(n - tile)
    return out


def plan_tiles(input_shape, tile_extent, temporal_stride=5, spatial_stride=None,
               margin=0, taper=hann_window, align=1):
    """Cover ``input_shape`` (``(H, W)`` or ``(T, H, W)``) with tiles.

    ``spatial_stride`` defaults to half the tile. For 3-D inputs the first
    axis uses ``temporal_stride``. ``margin`` (an int or one value per axis)
    zeroes window weight that close to any tile edge lying inside the input.
    Spatial origins must be multiples of ``align`` (the network's total
    stride), otherwise tiles would see a shifted sampling grid.
    """
    shape = tuple(int(n) for n in input_shape)
    tile = tuple(int(t) for t in tile_extent)
    if len(shape) not in (2, 3) or len(tile) != len(shape):
        raise ConfigError(f"tile {tile} does not match input extent {shape}")
    spatial = [spatial_stride or max(1, t // 2) for t in tile[-2:]]
    if isinstance(spatial_stride, (tuple, list)):
        spatial = list(spatial_stride)
    strides = tuple(([temporal_stride] if len(shape) == 3 else []) + spatial)
    margins = (margin,) * len(shape) if isinstance(margin, int) else tuple(margin)
    per_axis = []
    for axis, (n, t, s, m) in enumerate(zip(shape, tile, strides, margins)):
        origins = axis_origins(n, t, s)
        if axis >= len(shape) - 2 and any(o % align for o in origins):
            raise ConfigError(
                f"tile origins {origins} are not multiples of {align}; choose "
                f"extents and strides divisible by it")
        if len(origins) > 1 and s > t - 2 * m:
            raise ConfigError(
                f"stride {s} leaves samples outside every tile window "
                f"(tile {t}, margin {m})")
        per_axis.append([(o, axis_window(t, m if o > 0 else 0, m if o + t < n else 0, taper))
                         for o in origins])
    plan = TilePlan(shape, tile, strides, margins)
    for combo in itertools.product(*per_axis):
        plan.origins.append(tuple(o for o, _ in combo))
        plan.windows.append(BlendWindow(tuple(w for _, w in combo)))
    return plan


def tiled_infer(graph, X, plan, W=None, seed=0, noise=None):
    """Window-weighted average of per-tile network outputs.

    One noise field is drawn for the whole input and cropped per tile, so
    overlapping tiles see the same noise.
    """
    X = np.asarray(X, dtype=float)
    if tuple(X.shape[2:]) != plan.input_shape:
        raise ConfigError(f"plan is for extent {plan.input_shape}, input is {X.shape[2:]}")
    m = G.input_multiple(graph.config)
    if any(o % m for origin in plan.origins for o in origin[-2:]):
        raise ConfigError(f"tile origins must be multiples of {m} for this network")
    if noise is None:
        noise = G.make_noise(X.shape, seed)
    lead = (slice(None), slice(None))
    num = np.zeros(X.shape)
    den = np.zeros(plan.input_shape)
    for origin, win in zip(plan.origins, plan.windows):
        sl = plan.slices(origin)
        out = G.forward(graph, X[lead + sl], W=W, noise=noise[lead + sl])
        w = win.weights()
        num[lead + sl] += out * w
        den[sl] += w
    if not np.all(den > 0):
        raise TilingError("zero accumulated window weight")
    return num / den


def direct_infer(graph, X, W=None, seed=0):
    X = np.asarray(X, dtype=float)
    return G.forward(graph, X, noise=G.make_noise(X.shape, seed), W=W)


# -- noise sweep ----------------------------------------------------------

def sweep_noise(graph, X, W_values, metrics, reference=None, seed=0):
    """Evaluate ``metrics`` on the output for each noise amplitude.

    ``metrics`` maps a name to ``fn(Y, reference)``. The same noise field is
    used throughout, so only the amplitude changes. Returns a list of
    ``(W, {name: value})`` in input order.
    """
    X = np.asarray(X, dtype=float)
    noise = G.make_noise(X.shape, seed)
    rows = []
    for W in W_values:
        W = float(W)
        if not math.isfinite(W) or W < 0:
            raise ConfigError(f"noise amplitude must be finite and >= 0, got {W}")
        Y = G.forward(graph, X, W=W, noise=noise)
        rows.append((W, {name: float(fn(Y, reference)) for name, fn in metrics.items()}))
    return rows


def default_sweep_metrics():
    from . import metrics as M
    from .perceptual import vn_statistic

    return {
        "l1": lambda Y, ref: M.l1(Y, ref),
        "l2": lambda Y, ref: M.rmse(Y, ref) ** 2,
        "rmse": lambda Y, ref: M.rmse(Y, ref),
        "psnr_y": lambda Y, ref: M.psnr_y(Y, ref, border_crop=0),
        "vn": lambda Y, ref: vn_statistic(Y),
    }


# -- frozen activations ---------------------------------------------------

class _RecordingRelu:
    def __init__(self):
        self.masks = []

    def __call__(self, x):
        mask = x > 0
        self.masks.append(mask)
        return np.where(mask, x, 0.0)


class _FrozenRelu:
    def __init__(self, masks):
        self.masks = masks
        self.i = 0

    def __call__(self, x):
        mask = self.masks[self.i]
        self.i += 1
        if mask.shape != x.shape:
            raise ConfigError("frozen activation mask does not match the input shape")
        return np.where(mask, x, 0.0)


def relu_masks(graph, X, W=0.0, seed=0):
    """Activation pattern of every relu for a forward pass on ``X``."""
    rec = _RecordingRelu()
    G.forward(graph, np.asarray(X, dtype=float), noise_seed=seed, W=W, relu=rec)
    return rec.masks


def frozen_forward(graph, Z, masks, W=0.0, seed=0, bias=True):
    """Forward pass on ``Z`` with every relu replaced by its recorded mask.

    The result is affine in ``Z``; with ``bias=False`` (and no noise) it is
    the linear part.
    """
    g = graph if bias else graph.with_params(
        {k: (np.zeros_like(v) if k.endswith(".bias") else v)
         for k, v in graph.params.items()})
    return G.forward(g, np.asarray(Z, dtype=float), noise_seed=seed, W=W if bias else 0.0,
                     relu=_FrozenRelu(masks))


def impulse(shape, pixel):
    """Unit impulse at ``pixel``; a short index addresses the trailing axes."""
    pixel = tuple(int(p) for p in pixel)
    if len(pixel) > len(shape):
        raise IndexError(f"pixel {pixel} has more axes than shape {shape}")
    full = (0,) * (len(shape) - len(pixel)) + pixel
    for p, n in zip(full, shape):
        if not 0 <= p < n:
            raise IndexError(f"pixel {pixel} outside input extent {shape}")
    e = np.zeros(shape)
    e[full] = 1.0
    return e


def dfv_response(graph, X, perturbation, delta=1.0, W=0.0, seed=0, method="linear",
                 masks=None):
    """``(f(X + delta*P) - f(X)) / delta`` with activations frozen at ``X``.

    ``method="linear"`` evaluates the bias-free frozen network on
    ``delta*P``, which is that difference quotient without the cancellation
    of subtracting two large outputs. ``method="difference"`` evaluates the
    quotient literally.
    """
    X = np.asarray(X, dtype=float)
    masks = relu_masks(graph, X, W, seed) if masks is None else masks
    P = np.asarray(perturbation, dtype=float)
    if method == "linear":
        return frozen_forward(graph, delta * P, masks, bias=False) / delta
    if method == "difference":
        hi = frozen_forward(graph, X + delta * P, masks, W, seed)
        lo = frozen_forward(graph, X, masks, W, seed)
        return (hi - lo) / delta
    raise ValueError(f"unknown method {method!r}")


def dfv_impulse_response(graph, X, pixel, delta=1.0, W=0.0, seed=0, method="linear"):
    """The adaptive filter the network applies around ``pixel`` of ``X``."""
    X = np.asarray(X, dtype=float)
    return dfv_response(graph, X, impulse(X.shape, pixel), delta, W, seed, method)
