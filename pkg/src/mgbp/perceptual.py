"""Natural-image-statistics features, the multiscale discriminator and losses.

All functions are built from :mod:`mgbp.autograd` ops, so they accept plain
arrays or taped values. Images are ``(N, 3, H, W)`` with values in [0, 255].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ad
from .tensor import ConvSpec, DimensionError

BT609 = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class VnscConfig:
    kernel_size: int = 7
    sigma: float = 1.17
    shift_range: int = 3
    luminance: str = "bt609"

    @property
    def channels(self):
        return (2 * self.shift_range + 1) ** 2


@dataclass(frozen=True)
class LossWeights:
    gan: float = 0.001
    cycle: float = 10.0
    cx: float = 0.1
    l1: float = 10.0

    def __post_init__(self):
        if min(self.gan, self.cycle, self.cx, self.l1) < 0:
            raise ValueError("loss weights must be >= 0")

    def coefficients(self):
        """The five coefficients in the order the terms are summed:
        GAN, cycle(W=1), CX, L1(W=0), cycle(W=0)."""
        return (self.gan, self.cycle, self.cx, self.l1, self.cycle)


def luminance_bt609(rgb):
    """Y = 0.299 R + 0.587 G + 0.114 B, keeping a singleton channel axis."""
    shape = ad.value_of(rgb).shape
    if len(shape) < 3 or shape[1] != 3:
        raise DimensionError(f"luminance needs 3 channels on axis 1, got shape {shape}")
    r = ad.getitem(rgb, (slice(None), slice(0, 1)))
    g = ad.getitem(rgb, (slice(None), slice(1, 2)))
    b = ad.getitem(rgb, (slice(None), slice(2, 3)))
    return ad.add(ad.add(ad.mul(r, BT609[0]), ad.mul(g, BT609[1])), ad.mul(b, BT609[2]))


def variance_normalize(I, cfg=VnscConfig()):
    """(I - mu) / (sigma + 1) with Gaussian local mean and variance.

    Statistics are computed on ``I`` minus its top-left pixel (a per-image
    constant), which leaves the result unchanged mathematically and makes a
    constant image normalize to exactly zero.
    """
    ref = ad.getitem(I, (Ellipsis, slice(0, 1), slice(0, 1)))
    d = ad.sub(I, ref)
    mu = ad.gaussian_blur(d, cfg.kernel_size, cfg.sigma)
    var = ad.sub(ad.gaussian_blur(ad.square(d), cfg.kernel_size, cfg.sigma), ad.square(mu))
    sigma = ad.sqrt(ad.clamp_min(var, 0.0))
    return ad.div(ad.sub(d, mu), ad.add(sigma, 1.0))


def shift_replicate(x, p, q):
    """``out[..., i, j] = x[..., clip(i + p), clip(j + q)]``."""
    h, w = ad.value_of(x).shape[-2:]
    rows = np.clip(np.arange(h) + p, 0, h - 1)
    cols = np.clip(np.arange(w) + q, 0, w - 1)
    nd = ad.value_of(x).ndim
    return ad.take(ad.take(x, rows, nd - 2), cols, nd - 1)


def vnsc(rgb, cfg=VnscConfig()):
    """Variance normalization followed by the shift correlator.

    Channel ``(2r+1)(p+r) + (q+r)`` holds ``Ihat[i,j] * Ihat[i+p, j+q]``
    for shifts ``p, q`` in ``[-r, r]``.
    """
    ihat = variance_normalize(luminance_bt609(rgb), cfg)
    r = cfg.shift_range
    products = [ad.mul(ihat, shift_replicate(ihat, p, q))
                for p in range(-r, r + 1) for q in range(-r, r + 1)]
    return ad.cat(products, axis=1)


# -- discriminator --------------------------------------------------------

LAYER_STRIDES = (1, 1, 1, 2)


@dataclass
class DiscriminatorGraph:
    """One 4-layer CNN per input scale, no sharing, plus a scalar head.

    Block ``i`` sees the VN+SC features of scale ``i``; for ``i > 0`` they are
    concatenated with the output of block ``i - 1``, which has already been
    brought to that resolution by its final stride-2 layer.
    """

    scales: int
    width: int
    params: dict
    vnsc: VnscConfig = field(default_factory=VnscConfig)

    def block_specs(self, i):
        cin = self.vnsc.channels + (self.width if i > 0 else 0)
        specs = []
        for layer, s in enumerate(LAYER_STRIDES):
            specs.append(ConvSpec((3, 3), (s, s), (1, 1),
                                  cin if layer == 0 else self.width, self.width))
        return specs

    def head_spec(self):
        return ConvSpec((1, 1), (1, 1), (0, 0), self.width, 1)

    def param_count(self):
        return sum(int(v.size) for v in self.params.values())


def build_discriminator(scales, width=64, seed=0, vnsc_cfg=VnscConfig(), zero_head=False):
    """He-uniform weights (bound sqrt(6 / fan_in)) and zero biases.

    The gain keeps activations from shrinking through the relu stacks, so
    the score stays sensitive to the input at initialization.
    """
    if scales < 1:
        raise ValueError("discriminator needs at least one scale")
    d = DiscriminatorGraph(scales, width, {}, vnsc_cfg)
    rng = np.random.default_rng(seed)
    named = [(f"D{i}.conv{j}", spec) for i in range(scales)
             for j, spec in enumerate(d.block_specs(i))]
    named.append(("Dhead", d.head_spec()))
    for name, spec in named:
        bound = math.sqrt(6.0 / (spec.in_channels * spec.kernel_volume))
        w = rng.uniform(-bound, bound, spec.weight_shape())
        b = np.zeros(spec.out_channels)
        if zero_head and name == "Dhead":
            w, b = np.zeros_like(w), np.zeros_like(b)
        d.params[name + ".weight"] = w
        d.params[name + ".bias"] = b
    return d


def discriminator_forward(scales, graph, params=None):
    """Pre-sigmoid score per batch item from the multiscale input list."""
    P = graph.params if params is None else params
    if len(scales) != graph.scales:
        raise DimensionError(
            f"discriminator has {graph.scales} scales, got {len(scales)} inputs")
    base = ad.value_of(scales[0]).shape
    for i, s in enumerate(scales):
        shape = ad.value_of(s).shape
        want = (base[0], base[1], base[2] // 2 ** i, base[3] // 2 ** i)
        if shape != want:
            raise DimensionError(f"scale {i} has shape {shape}, expected {want}")
    feat = None
    for i, s in enumerate(scales):
        h = vnsc(s, graph.vnsc)
        if feat is not None:
            h = ad.concat_channels(h, feat)
        for j, spec in enumerate(graph.block_specs(i)):
            h = ad.relu(ad.conv(h, P[f"D{i}.conv{j}.weight"], P[f"D{i}.conv{j}.bias"], spec))
        feat = h
    score = ad.conv(feat, P["Dhead.weight"], P["Dhead.bias"], graph.head_spec())
    return ad.mean(ad.reshape(score, (score.shape[0], -1)), axis=1)


def rsgan_losses(c_real, c_fake):
    """Relativistic GAN losses ``(L_D, L_G)``.

    Uses ``-log sigmoid(x) = softplus(-x)``, finite for any finite scores.
    """
    diff = ad.sub(c_real, c_fake)
    loss_d = ad.mean(ad.softplus(ad.mul(diff, -1.0)))
    loss_g = ad.mean(ad.softplus(diff))
    return loss_d, loss_g


# -- fidelity / cycle terms -----------------------------------------------

def pyramid_factors(f):
    """Downscaling factors ``{2, 4, ..., f}``; ``{3}`` for a 3x model."""
    if f == 3:
        return [3]
    out, k = [], 2
    while k <= f:
        out.append(k)
        k *= 2
    return out


def multiscale(Y, f):
    """``[Y, S_2(Y), S_4(Y), ...]``: the discriminator input set."""
    return [Y] + [ad.bicubic_resize(Y, k, "down") for k in pyramid_factors(f)]


def l1(a, b):
    sa, sb = ad.value_of(a).shape, ad.value_of(b).shape
    if sa != sb:
        raise DimensionError(f"L1 of shapes {sa} and {sb}")
    return ad.mean(ad.abs(ad.sub(a, b)))


def l2(a, b):
    sa, sb = ad.value_of(a).shape, ad.value_of(b).shape
    if sa != sb:
        raise DimensionError(f"L2 of shapes {sa} and {sb}")
    return ad.mean(ad.square(ad.sub(a, b)))


def cycle_terms(Y, X, f):
    return [l1(ad.bicubic_resize(Y, k, "down"), ad.bicubic_resize(X, k, "down"))
            for k in pyramid_factors(f)]


def high_fidelity_loss(Y0, X, f):
    """L1(Y0, X) plus the L1 of every bicubic-downscaled pair."""
    loss = l1(Y0, X)
    for term in cycle_terms(Y0, X, f):
        loss = ad.add(loss, term)
    return loss


def _mean_terms(terms):
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / len(terms))


def zero_cx(Y, X):
    """Default contextual-loss hook: the zero functional."""
    return 0.0


def perceptual_loss_terms(Y1, Y0, X, disc, f, cx_hook=zero_cx, disc_params=None,
                          weights=LossWeights()):
    """Unweighted terms of the perceptual objective, keyed by name.

    The GAN term is skipped (reported as 0) when its weight is zero, so the
    discriminator does not enter the computation at all.
    """
    terms = {}
    if weights.gan != 0:
        c_real = discriminator_forward(multiscale(X, f), disc, disc_params)
        c_fake = discriminator_forward(multiscale(Y1, f), disc, disc_params)
        terms["gan"] = rsgan_losses(c_real, c_fake)[1]
    else:
        terms["gan"] = 0.0
    terms["cycle_w1"] = _mean_terms(cycle_terms(Y1, X, f))
    terms["cx"] = cx_hook(Y1, X) if weights.cx != 0 else 0.0
    terms["l1_w0"] = l1(Y0, X)
    terms["cycle_w0"] = _mean_terms(cycle_terms(Y0, X, f))
    return terms


def weighted_loss_terms(Y1, Y0, X, disc, weights=LossWeights(), cx_hook=zero_cx,
                        f=4, disc_params=None):
    """The nonzero weighted summands of the total perceptual loss, in order."""
    terms = perceptual_loss_terms(Y1, Y0, X, disc, f, cx_hook, disc_params, weights)
    keys = ("gan", "cycle_w1", "cx", "l1_w0", "cycle_w0")
    return [ad.mul(terms[k], c) for c, k in zip(weights.coefficients(), keys) if c != 0]


def total_perceptual_loss(Y1, Y0, X, disc, weights=LossWeights(), cx_hook=zero_cx,
                          f=4, disc_params=None):
    total = 0.0
    for term in weighted_loss_terms(Y1, Y0, X, disc, weights, cx_hook, f, disc_params):
        total = ad.add(total, term)
    return total


def discriminator_loss(Y1, X, disc, f, disc_params=None):
    """L_D on the real/fake multiscale sets (generator output detached)."""
    c_real = discriminator_forward(multiscale(X, f), disc, disc_params)
    c_fake = discriminator_forward(multiscale(ad.value_of(Y1), f), disc, disc_params)
    return rsgan_losses(c_real, c_fake)[0]


def vn_statistic(Y):
    """Mean absolute variance-normalized luminance: a cheap naturalness probe."""
    ihat = variance_normalize(luminance_bt609(np.asarray(ad.value_of(Y))))
    return float(np.mean(np.abs(ihat)))
