import os
import subprocess
import sys

import numpy as np
import pytest

from mgbp import autograd as ad
from mgbp.tensor import ConvSpec

rng = np.random.default_rng(7)


def away_from_zero(shape, lo=0.2):
    """Random values with |x| >= lo, so a 1e-5 step never crosses a kink."""
    x = rng.uniform(lo, 2.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


SPEC2 = ConvSpec((4, 4), (2, 2), (1, 1), 2, 3)
SPEC3 = ConvSpec((3, 4, 4), (1, 2, 2), (0, 1, 1), 2, 3)
SPEC_T = ConvSpec((4, 4), (2, 2), (1, 1), 3, 2)
ROWS = rng.standard_normal((5, 3))
COLS = rng.standard_normal((2, 4))

# name -> (function of (inputs, params), inputs, params)
OPS = {
    "add": (lambda i, p: ad.sum(ad.mul(ad.add(i["a"], i["b"]), i["c"])),
            {"a": rng.standard_normal((2, 3)), "b": rng.standard_normal((1, 3)),
             "c": rng.standard_normal((2, 3))}),
    "sub": (lambda i, p: ad.sum(ad.mul(ad.sub(i["a"], i["b"]), i["c"])),
            {"a": rng.standard_normal((2, 3)), "b": rng.standard_normal((2, 1)),
             "c": rng.standard_normal((2, 3))}),
    "mul": (lambda i, p: ad.sum(ad.mul(i["a"], i["b"])),
            {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((3, 4))}),
    "div": (lambda i, p: ad.sum(ad.div(i["a"], i["b"])),
            {"a": rng.standard_normal((3, 4)), "b": rng.uniform(0.5, 2, (3, 4))}),
    "square": (lambda i, p: ad.sum(ad.mul(ad.square(i["a"]), i["c"])),
               {"a": rng.standard_normal(5), "c": rng.standard_normal(5)}),
    "sqrt": (lambda i, p: ad.sum(ad.sqrt(i["a"])), {"a": rng.uniform(0.5, 3, 6)}),
    "abs": (lambda i, p: ad.sum(ad.mul(ad.abs(i["a"]), i["c"])),
            {"a": away_from_zero(6), "c": rng.standard_normal(6)}),
    "relu": (lambda i, p: ad.sum(ad.mul(ad.relu(i["a"]), i["c"])),
             {"a": away_from_zero(8), "c": rng.standard_normal(8)}),
    "clamp_min": (lambda i, p: ad.sum(ad.mul(ad.clamp_min(i["a"], 0.0), i["c"])),
                  {"a": away_from_zero(8), "c": rng.standard_normal(8)}),
    "softplus": (lambda i, p: ad.sum(ad.softplus(i["a"])),
                 {"a": rng.standard_normal(6) * 5}),
    "mean": (lambda i, p: ad.sum(ad.square(ad.mean(i["a"], axis=1))),
             {"a": rng.standard_normal((3, 4))}),
    "reshape": (lambda i, p: ad.sum(ad.mul(ad.reshape(i["a"], (4, 3)), i["c"])),
                {"a": rng.standard_normal((3, 4)), "c": rng.standard_normal((4, 3))}),
    "getitem": (lambda i, p: ad.sum(ad.square(ad.getitem(i["a"], (slice(1, 3), 2)))),
                {"a": rng.standard_normal((4, 4))}),
    "concat_channels": (lambda i, p: ad.sum(ad.mul(ad.concat_channels(i["a"], i["b"]), i["c"])),
                        {"a": rng.standard_normal((1, 2, 3)), "b": rng.standard_normal((1, 1, 3)),
                         "c": rng.standard_normal((1, 3, 3))}),
    "cat": (lambda i, p: ad.sum(ad.mul(ad.cat([i["a"], i["b"]], axis=0), i["c"])),
            {"a": rng.standard_normal((1, 3)), "b": rng.standard_normal((2, 3)),
             "c": rng.standard_normal((3, 3))}),
    "take": (lambda i, p: ad.sum(ad.mul(ad.take(i["a"], np.array([0, 0, 2, 3]), 1), i["c"])),
             {"a": rng.standard_normal((2, 4)), "c": rng.standard_normal((2, 4))}),
    "stack": (lambda i, p: ad.sum(ad.mul(ad.stack([i["a"], i["b"]]), i["c"])),
              {"a": rng.standard_normal(3), "b": rng.standard_normal(3),
               "c": rng.standard_normal((2, 3))}),
    "conv2d": (lambda i, p: ad.sum(ad.square(ad.conv(i["x"], p["w"], p["b"], SPEC2))),
               {"x": rng.standard_normal((2, 2, 6, 6))},
               {"w": rng.standard_normal(SPEC2.weight_shape()), "b": rng.standard_normal(3)}),
    "conv3d": (lambda i, p: ad.sum(ad.square(ad.conv(i["x"], p["w"], p["b"], SPEC3))),
               {"x": rng.standard_normal((1, 2, 4, 6, 6))},
               {"w": rng.standard_normal(SPEC3.weight_shape()), "b": rng.standard_normal(3)}),
    "conv_transposed": (
        lambda i, p: ad.sum(ad.square(ad.conv_transposed(i["x"], p["w"], p["b"], SPEC_T))),
        {"x": rng.standard_normal((1, 3, 3, 3))},
        {"w": rng.standard_normal(SPEC_T.weight_shape(transposed=True)),
         "b": rng.standard_normal(2)}),
    "bicubic_up": (lambda i, p: ad.sum(ad.square(ad.bicubic_resize(i["x"], 2, "up"))),
                   {"x": rng.standard_normal((1, 2, 4, 5))}),
    "bicubic_down": (lambda i, p: ad.sum(ad.square(ad.bicubic_resize(i["x"], 3, "down"))),
                     {"x": rng.standard_normal((1, 1, 9, 6))}),
    "gaussian_blur": (lambda i, p: ad.sum(ad.square(ad.gaussian_blur(i["x"], 7, 1.17))),
                      {"x": rng.standard_normal((1, 1, 8, 9))}),
    "apply_rows_cols": (
        lambda i, p: ad.sum(ad.square(ad.apply_cols(ad.apply_rows(i["x"], ROWS), COLS))),
        {"x": rng.standard_normal((2, 3, 4))}),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    entry = OPS[name]
    fn, inputs = entry[0], entry[1]
    params = entry[2] if len(entry) > 2 else {}
    wrt = list(inputs) + list(params)
    err = ad.finite_diff_check(fn, inputs, params, samples=30, wrt=wrt)
    assert err < 1e-6, f"{name}: {err}"


def test_untaped_and_taped_values_are_bitwise_equal():
    x = rng.standard_normal((1, 2, 8, 8))
    w = rng.standard_normal(SPEC2.weight_shape())

    def f(v, p):
        h = ad.relu(ad.conv(v, p["w"], None, SPEC2))
        return ad.gaussian_blur(ad.bicubic_resize(h, 2, "up"), 7, 1.17)

    plain = f(x, {"w": w})
    taped, _ = ad.record_forward(f, x, {"w": w})
    np.testing.assert_array_equal(plain, taped)


def test_tape_is_single_use():
    _, tape = ad.record_forward(lambda v, p: ad.sum(ad.square(v)), np.ones(3), {})
    ad.backward(tape)
    with pytest.raises(ad.TapeStateError):
        ad.backward(tape)


def test_numpy_conversion_of_taped_value_is_rejected():
    def f(v, p):
        return np.sum(np.asarray(v))

    with pytest.raises(ad.UnsupportedOpError):
        ad.record_forward(f, np.ones(3), {})
    with pytest.raises(TypeError):
        ad.record_forward(lambda v, p: np.exp(v), np.ones(3), {})


def test_unreached_leaf_gets_zero_gradient():
    _, g = ad.value_and_grad(lambda i, p: ad.sum(i["a"]),
                             {"a": np.ones(3), "b": np.ones((2, 2))}, {})
    np.testing.assert_array_equal(g["b"], np.zeros((2, 2)))
    np.testing.assert_array_equal(g["a"], np.ones(3))


def test_non_scalar_output_needs_cotangent():
    _, tape = ad.record_forward(lambda v, p: ad.square(v), np.arange(3.0), {})
    with pytest.raises(ad.ContractError):
        ad.backward(tape)
    _, tape = ad.record_forward(lambda v, p: ad.square(v), np.arange(3.0), {})
    np.testing.assert_array_equal(ad.backward(tape, np.ones(3))["input"], [0, 2, 4])


def test_sqrt_gradient_at_zero_is_zero():
    _, g = ad.value_and_grad(lambda v, p: ad.sum(ad.sqrt(v)), np.array([0.0, 4.0]), {})
    np.testing.assert_array_equal(g["input"], [0.0, 0.25])


def test_softplus_is_finite_for_large_arguments():
    v, g = ad.value_and_grad(lambda x, p: ad.sum(ad.softplus(x)), np.array([-1e4, 1e4]), {})
    assert np.isfinite(v) and v == pytest.approx(1e4)
    np.testing.assert_array_equal(g["input"], [0.0, 1.0])


def test_guard_skips_kink_crossings_but_keeps_real_errors():
    # |x| with x inside the stencil: the guard rejects the coordinate
    x = np.array([1e-6, 0.5, -0.7])
    res = ad.finite_diff_check(lambda v, p: ad.sum(ad.abs(v)), x, {}, wrt=["input"],
                               samples=20, guard=1e-6, details=True)
    assert res.max_rel_error < 1e-8 and res.skipped > 0

    # a wrong backward rule is not hidden: both step sizes agree with each other
    def wrong(v, p):
        return ad.sum(ad.add(ad.square(v), ad.mul(ad.value_of(v), 1.0)))

    err = ad.finite_diff_check(wrong, np.array([0.3, 1.2]), {}, wrt=["input"], samples=10,
                               guard=1e-6)
    assert err > 0.1


def test_termwise_differencing_removes_large_term_roundoff():
    big = 1e6

    def terms(i, p):
        return [ad.mul(ad.sum(ad.abs(i["x"])), big), ad.mul(ad.sum(ad.square(p["w"])), 1e-3)]

    def total(i, p):
        t = terms(i, p)
        return ad.add(t[0], t[1])

    inputs = {"x": np.array([3.0, -2.0])}
    params = {"w": np.array([1e-3, 2e-3])}
    plain = ad.finite_diff_check(total, inputs, params, samples=10)
    split = ad.finite_diff_check(total, inputs, params, samples=10, terms=terms)
    assert split < 1e-8 < plain


def test_pure_python_backend_selected_by_environment():
    env = dict(os.environ, MGBP_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import mgbp.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
