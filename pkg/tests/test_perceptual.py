import math

import numpy as np
import pytest

from mgbp import autograd as ad
from mgbp import perceptual as P
from mgbp.tensor import DimensionError
from oracles import vnsc_loop

rng = np.random.default_rng(5)


def test_vnsc_matches_triple_loop_oracle():
    for _ in range(3):
        img = rng.uniform(0, 255, (1, 3, 12, 12))
        got = P.vnsc(img)[0]
        np.testing.assert_allclose(got, vnsc_loop(img[0]), atol=1e-8, rtol=0)


def test_vnsc_of_constant_image_is_exactly_zero():
    out = P.vnsc(np.full((2, 3, 10, 11), 91.3))
    assert out.shape == (2, 49, 10, 11)
    assert not np.any(out)


def test_vnsc_channel_layout():
    img = rng.uniform(0, 255, (1, 3, 9, 9))
    out = P.vnsc(img)
    ihat = P.variance_normalize(P.luminance_bt609(img))
    np.testing.assert_allclose(out[:, 24:25], ihat * ihat)  # p = q = 0 in the middle
    assert P.VnscConfig().channels == 49


def test_rsgan_closed_forms():
    c = rng.standard_normal(5)
    ld, lg = P.rsgan_losses(c, c)
    assert abs(ld - math.log(2)) < 1e-12 and abs(lg - math.log(2)) < 1e-12
    for big in (1e2, 1e4):
        ld, lg = P.rsgan_losses(np.array([big, -big]), np.array([-big, big]))
        assert np.isfinite(ld) and np.isfinite(lg)


def test_pyramid_and_weights():
    assert P.pyramid_factors(2) == [2]
    assert P.pyramid_factors(4) == [2, 4]
    assert P.pyramid_factors(16) == [2, 4, 8, 16]
    assert P.pyramid_factors(3) == [3]
    assert P.LossWeights().coefficients() == (0.001, 10, 0.1, 10, 10)
    with pytest.raises(ValueError):
        P.LossWeights(gan=-1)


def test_discriminator_shapes_and_errors():
    d = P.build_discriminator(2, width=8, seed=0)
    X = rng.uniform(0, 255, (3, 3, 16, 16))
    scores = P.discriminator_forward(P.multiscale(X, 2), d)
    assert scores.shape == (3,)
    with pytest.raises(DimensionError):
        P.discriminator_forward([X], d)
    with pytest.raises(DimensionError):
        P.discriminator_forward([X, X], d)


def test_zero_head_gives_ln2_discriminator_loss():
    d = P.build_discriminator(2, width=8, seed=0, zero_head=True)
    X = rng.uniform(0, 255, (2, 3, 16, 16))
    assert P.discriminator_loss(X + 3, X, d, 2) == pytest.approx(math.log(2), abs=1e-15)


def test_zero_gan_weight_leaves_discriminator_untouched():
    d = P.build_discriminator(2, width=8, seed=0)
    X = rng.uniform(0, 255, (1, 3, 16, 16))
    w = P.LossWeights(gan=0.0, cx=0.0)
    _, g = ad.value_and_grad(
        lambda i, p: P.total_perceptual_loss(i["Y1"], i["Y0"], X, d, w, f=2, disc_params=p),
        {"Y1": X + 2, "Y0": X - 1}, d.params)
    assert all(not np.any(g[k]) for k in d.params)


def test_high_fidelity_loss_closed_form():
    X = rng.uniform(0, 255, (1, 3, 16, 16))
    # a constant offset survives every bicubic downscale unchanged
    assert P.high_fidelity_loss(X + 2.0, X, 4) == pytest.approx(2.0 * 3, rel=1e-12)


def test_total_loss_gradient_check_small():
    d = P.build_discriminator(2, width=4, seed=1)
    X = np.random.default_rng(0).uniform(0, 255, (1, 3, 8, 8))
    r = np.random.default_rng(1)
    ins = {"Y1": X + r.normal(0, 4, X.shape), "Y0": X + r.normal(0, 1, X.shape), "X": X}

    def f(i, p):
        return P.total_perceptual_loss(i["Y1"], i["Y0"], i["X"], d, f=2, disc_params=p)

    def terms(i, p):
        return P.weighted_loss_terms(i["Y1"], i["Y0"], i["X"], d, f=2, disc_params=p)

    res = ad.finite_diff_check(f, ins, d.params, samples=40, wrt=list(d.params) + list(ins),
                               guard=1e-6, terms=terms, details=True)
    assert res.max_rel_error < 1e-4
