"""Reverse-mode differentiation over the tensor primitives.

Every differentiable op in this module is polymorphic: called with plain
arrays it forwards straight to :mod:`mgbp.tensor` and returns an array;
called with at least one :class:`Var` it also appends a backward rule to
the owning :class:`Tape`. Graph code is written once against these
functions and runs both taped and untaped, with bitwise-equal values.
"""
from __future__ import annotations

import builtins
import math
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from . import tensor as T


class UnsupportedOpError(TypeError):
    """A taped value was passed to an operation without a backward rule."""


class TapeStateError(RuntimeError):
    """Backward was requested on a tape that was already consumed."""


class ContractError(ValueError):
    pass


class Var:
    """A value recorded on a tape."""

    __slots__ = ("value", "tape", "index", "name")
    __array_ufunc__ = None  # numpy ufuncs on a Var raise TypeError

    def __init__(self, value, tape, index, name=None):
        self.value = value
        self.tape = tape
        self.index = index
        self.name = name

    def __array__(self, *args, **kwargs):
        raise UnsupportedOpError(
            "numpy conversion of a taped value; use mgbp.autograd ops instead")

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Tape:
    """Ordered record of op applications.

    Entries are appended in execution order, so each entry's inputs precede
    it. A tape supports exactly one backward pass.
    """

    def __init__(self):
        self.entries = []  # (output index, parent indices, backward fn)
        self.values = []
        self.leaves = {}  # name -> Var
        self.output = None
        self.consumed = False

    def leaf(self, value, name):
        v = self._new(np.asarray(value), name)
        self.leaves[name] = v
        return v

    def _new(self, value, name=None):
        v = Var(value, self, len(self.values), name)
        self.values.append(v)
        return v

    def record(self, value, parents, backward):
        out = self._new(value)
        self.entries.append((out.index, [p.index if isinstance(p, Var) else None
                                         for p in parents], backward))
        return out


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*args):
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ContractError("values from different tapes were mixed")
    return tape


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic -----------------------------------------------

def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape.record(out, [a, b], lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape.record(out, [a, b], lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape.record(out, [a, b], lambda g: (_unbroadcast(g * bv, sa),
                                               _unbroadcast(g * av, sb)))


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape.record(out, [a, b], lambda g: (_unbroadcast(g / bv, sa),
                                               _unbroadcast(-g * out / bv, sb)))


def square(x):
    xv = value_of(x)
    out = xv * xv
    if not isinstance(x, Var):
        return out
    return x.tape.record(out, [x], lambda g: (2.0 * g * xv,))


def sqrt(x):
    """Square root; the derivative at exactly 0 is taken as 0."""
    xv = value_of(x)
    out = np.sqrt(xv)
    if not isinstance(x, Var):
        return out

    def back(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)
    return x.tape.record(out, [x], back)


def abs(x):  # noqa: A001 - mirrors numpy naming
    xv = value_of(x)
    out = np.abs(xv)
    if not isinstance(x, Var):
        return out
    return x.tape.record(out, [x], lambda g: (g * np.sign(xv),))


def relu(x):
    """max(0, x); derivative at 0 is 0."""
    xv = value_of(x)
    out = T.relu(xv)
    if not isinstance(x, Var):
        return out
    return x.tape.record(out, [x], lambda g: (g * (xv > 0),))


def clamp_min(x, lo=0.0):
    xv = value_of(x)
    out = np.maximum(xv, lo)
    if not isinstance(x, Var):
        return out
    return x.tape.record(out, [x], lambda g: (g * (xv > lo),))


def softplus(x):
    """log(1 + exp(x)) in overflow-free form."""
    xv = value_of(x)
    out = np.logaddexp(0.0, xv)
    if not isinstance(x, Var):
        return out

    def back(g):
        return (g * _sigmoid(xv),)
    return x.tape.record(out, [x], back)


def _sigmoid(v):
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# -- reductions and reshaping ---------------------------------------------

def sum(x, axis=None):  # noqa: A001
    xv = value_of(x)
    out = np.sum(xv, axis=axis)
    if not isinstance(x, Var):
        return out
    shape = xv.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return x.tape.record(out, [x], back)


def mean(x, axis=None):
    xv = value_of(x)
    out = np.mean(xv, axis=axis)
    if not isinstance(x, Var):
        return out
    shape = xv.shape
    count = xv.size if axis is None else math.prod(
        shape[a] for a in np.atleast_1d(axis))

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)
    return x.tape.record(out, [x], back)


def reshape(x, shape):
    xv = value_of(x)
    out = xv.reshape(shape)
    if not isinstance(x, Var):
        return out
    old = xv.shape
    return x.tape.record(out, [x], lambda g: (g.reshape(old),))


def getitem(x, idx):
    xv = value_of(x)
    out = xv[idx]
    if not isinstance(x, Var):
        return out
    shape, dtype = xv.shape, xv.dtype

    def back(g):
        # basic (slice) indexing only: no repeated coordinates
        full = np.zeros(shape, dtype=dtype)
        full[idx] += g
        return (full,)
    return x.tape.record(out, [x], back)


def concat_channels(a, b):
    av, bv = value_of(a), value_of(b)
    out = T.concat_channels(av, bv)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    ca = av.shape[1]
    return tape.record(out, [a, b], lambda g: (g[:, :ca], g[:, ca:]))


def cat(xs, axis=1):
    vals = [value_of(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*xs)
    if tape is None:
        return out
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return tape.record(out, list(xs), lambda g: tuple(np.split(g, bounds, axis=axis)))


def take(x, idx, axis):
    """Gather ``x`` along ``axis`` at integer positions ``idx``."""
    xv = value_of(x)
    out = np.take(xv, idx, axis=axis)
    if not isinstance(x, Var):
        return out
    shape = xv.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)
    return x.tape.record(out, [x], back)


def stack(xs, axis=0):
    vals = [value_of(x) for x in xs]
    out = np.stack(vals, axis=axis)
    tape = _tape_of(*xs)
    if tape is None:
        return out
    return tape.record(out, list(xs), lambda g: tuple(
        np.take(g, i, axis=axis) for i in range(len(vals))))


# -- linear operators -----------------------------------------------------

def conv(x, w, b, spec):
    xv, wv, bv = value_of(x), value_of(w), value_of(b)
    tape = _tape_of(x, w, b)
    if tape is None:
        return T.conv(xv, wv, bv, spec)
    out, cols = T.conv_forward(xv, wv, bv, spec)
    xshape = xv.shape

    def back(g):
        n = g.shape[0]
        g2 = g.reshape(n, spec.out_channels, -1)
        w2 = wv.reshape(spec.out_channels, -1)
        gx = T.col2im_nd(np.matmul(w2.T, g2), xshape, spec) if isinstance(x, Var) else None
        gw = None
        if isinstance(w, Var):
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wv.shape)
        gb = g2.sum(axis=(0, 2)) if isinstance(b, Var) else None
        return gx, gw, gb
    return tape.record(out, [x, w, b], back)


def conv_transposed(x, w, b, spec):
    xv, wv, bv = value_of(x), value_of(w), value_of(b)
    out = T.conv_transposed(xv, wv, bv, spec)
    tape = _tape_of(x, w, b)
    if tape is None:
        return out
    adj = spec.transposed()

    def back(g):
        gx = gw = gb = None
        if isinstance(x, Var) or isinstance(w, Var):
            gcol, cols = T.conv_forward(g, wv, None, adj)
            gx = gcol
            if isinstance(w, Var):
                n = xv.shape[0]
                x2 = xv.reshape(n, spec.in_channels, -1)
                gw = np.matmul(x2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wv.shape)
        if isinstance(b, Var):
            gb = g.reshape(g.shape[0], spec.out_channels, -1).sum(axis=(0, 2))
        return gx, gw, gb
    return tape.record(out, [x, w, b], back)


def apply_rows(x, m):
    xv = value_of(x)
    out = T.apply_rows(xv, m)
    if not isinstance(x, Var):
        return out
    return x.tape.record(out, [x], lambda g: (np.matmul(m.T, g),))


def apply_cols(x, m):
    xv = value_of(x)
    out = T.apply_cols(xv, m)
    if not isinstance(x, Var):
        return out
    return x.tape.record(out, [x], lambda g: (np.matmul(g, m),))


def bicubic_resize(x, factor, direction):
    if not isinstance(x, Var):
        return T.bicubic_resize(x, factor, direction)
    if factor == 1:
        return x
    dt = x.value.dtype
    mh = T.bicubic_matrix(x.shape[-2], factor, direction).astype(dt, copy=False)
    mw = T.bicubic_matrix(x.shape[-1], factor, direction).astype(dt, copy=False)
    return apply_cols(apply_rows(x, mh), mw)


def gaussian_blur(x, kernel_size, sigma):
    if not isinstance(x, Var):
        return T.gaussian_blur(x, kernel_size, sigma)
    dt = x.value.dtype
    mh = T.blur_matrix(x.shape[-2], kernel_size, float(sigma)).astype(dt, copy=False)
    mw = T.blur_matrix(x.shape[-1], kernel_size, float(sigma)).astype(dt, copy=False)
    return apply_cols(apply_rows(x, mh), mw)


# -- recording and differentiation ----------------------------------------

def _as_dict(obj, default_name):
    if obj is None:
        return {}
    if isinstance(obj, Mapping):
        return dict(obj)
    return {default_name: obj}


def record_forward(graph_fn, inputs, params):
    """Run ``graph_fn(inputs, params)`` with every leaf on a fresh tape.

    ``inputs`` and ``params`` are mappings name -> array (a bare array is
    named ``"input"``). Returns ``(output array, tape)``.
    """
    tape = Tape()
    inputs = _as_dict(inputs, "input")
    params = _as_dict(params, "params")
    ins = {k: tape.leaf(v, k) for k, v in inputs.items()}
    ps = {k: tape.leaf(v, k) for k, v in params.items()}
    out = graph_fn(ins if len(ins) != 1 or "input" not in ins else ins["input"], ps)
    if not isinstance(out, Var):
        # output does not depend on any leaf
        out = tape._new(np.asarray(out))
    tape.output = out
    return out.value, tape


def backward(tape, loss_grad=None):
    """Propagate ``loss_grad`` from the tape's output back to its leaves.

    Returns a dict leaf name -> gradient of the same shape as the leaf;
    leaves not reached by the forward pass get zeros.
    """
    if tape.consumed:
        raise TapeStateError("tape already consumed; record a new forward pass")
    tape.consumed = True
    out = tape.output
    if loss_grad is None:
        if out.value.size != 1:
            raise ContractError(
                f"output has shape {out.value.shape}; supply a cotangent")
        loss_grad = np.ones_like(out.value)
    loss_grad = np.asarray(loss_grad, dtype=out.value.dtype).reshape(out.value.shape)
    grads = {out.index: loss_grad}
    for index, parents, back in reversed(tape.entries):
        g = grads.pop(index, None)
        if g is None:
            continue
        for p, gp in zip(parents, back(g)):
            if p is None or gp is None:
                continue
            if p in grads:
                grads[p] = grads[p] + gp
            else:
                grads[p] = gp
    result = {}
    for name, leaf in tape.leaves.items():
        g = grads.get(leaf.index)
        result[name] = (np.zeros_like(leaf.value) if g is None
                        else np.asarray(g).reshape(leaf.value.shape))
    return result


def value_and_grad(graph_fn, inputs, params):
    out, tape = record_forward(graph_fn, inputs, params)
    return out, backward(tape)


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int

    def __float__(self):
        return float(self.max_rel_error)


def finite_diff_check(graph_fn, inputs, params, h=1e-5, seed=0, samples=50,
                      wrt=None, mask=None, guard=None, details=False, terms=None):
    """Worst relative error between taped and central-difference gradients.

    Samples ``samples`` random coordinates across the leaves named in
    ``wrt`` (default: all params). ``mask(name, flat_index)`` may reject a
    coordinate up front, e.g. one whose perturbation crosses a relu kink.

    With ``guard`` set, a coordinate is resampled when the central
    differences at ``h`` and ``h/2`` disagree by more than ``guard``
    (relative): there the function is not smooth at that scale (an
    abs/relu kink inside the stencil) or the change is below roundoff, and
    the finite difference is no oracle. ``details=True`` returns a
    :class:`GradCheckResult` with the skip count.

    ``terms``, if given, returns the summands of ``graph_fn`` as a list of
    scalars. The oracle then differences each summand before adding, so a
    large term that does not depend on the perturbed coordinate cancels
    exactly instead of swamping a small one with roundoff.
    """
    inputs = _as_dict(inputs, "input")
    params = _as_dict(params, "params")
    leaves = {**inputs, **params}
    out, grads = value_and_grad(graph_fn, inputs, params)
    if np.size(out) != 1:
        raise ContractError(f"finite_diff_check needs a scalar output, got {np.shape(out)}")
    names = list(wrt) if wrt is not None else list(params)
    sizes = np.array([np.size(leaves[n]) for n in names])
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = skipped = 0
    while done < samples and skipped + done < 50 * samples:
        which = rng.choice(len(names), p=sizes / sizes.sum())
        name = names[which]
        flat = int(rng.integers(sizes[which]))
        if mask is not None and not mask(name, flat):
            skipped += 1
            continue
        numeric = _central_difference(graph_fn, inputs, params, name, flat, h, terms)
        if guard is not None:
            half = _central_difference(graph_fn, inputs, params, name, flat, h / 2, terms)
            if _rel(numeric, half) > guard:
                skipped += 1
                continue
        analytic = grads[name].reshape(-1)[flat]
        worst = max(worst, _rel(numeric, analytic))
        done += 1
    if done < samples:
        raise ContractError(f"only {done} admissible coordinates found")
    if details:
        return GradCheckResult(worst, done, skipped)
    return worst


def _rel(a, b):
    a, b = float(a), float(b)
    if a == b:
        return 0.0
    return builtins.abs(a - b) / max(builtins.abs(a), builtins.abs(b))


def _central_difference(graph_fn, inputs, params, name, flat, h, terms=None):
    fn = graph_fn if terms is None else terms

    def evaluate(delta):
        ins = {k: np.array(v, dtype=float, copy=True) if k == name else v
               for k, v in inputs.items()}
        ps = {k: np.array(v, dtype=float, copy=True) if k == name else v
              for k, v in params.items()}
        target = ins if name in ins else ps
        target[name].reshape(-1)[flat] += delta
        arg = ins if len(ins) != 1 or "input" not in ins else ins["input"]
        return np.array([float(np.asarray(t).reshape(()))
                         for t in (fn(arg, ps) if terms is not None else [fn(arg, ps)])])
    return float(np.sum(evaluate(h) - evaluate(-h))) / (2.0 * h)
