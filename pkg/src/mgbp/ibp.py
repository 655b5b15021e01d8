"""Classic iterative back-projection, the linear ancestor of the BP blocks.

    e_k     = x - R(y_k)
    y_{k+1} = y_k + P(e_k)

``R`` downscales and ``P`` upscales. Each can be given as a callable, as a
dense matrix acting on the flattened trailing axes, or as a
``(ConvSpec, weights)`` / ``(ConvSpec, weights, bias)`` tuple (``R`` is then
a strided conv and ``P`` a transposed conv).
"""
from __future__ import annotations

import numpy as np

from .tensor import ConvSpec, DimensionError, bicubic_matrix, conv, conv_transposed


def _as_operator(op, transposed):
    if callable(op):
        return op
    if isinstance(op, tuple) and op and isinstance(op[0], ConvSpec):
        spec, w = op[0], op[1]
        b = op[2] if len(op) > 2 else None
        fn = conv_transposed if transposed else conv
        return lambda x: fn(x, w, b, spec)
    m = np.asarray(op, dtype=float)
    if m.ndim != 2:
        raise TypeError("operator must be callable, a (ConvSpec, weights) tuple or a matrix")

    def apply(x, m=m):
        x = np.asarray(x, dtype=float)
        if x.size % m.shape[1]:
            raise DimensionError(f"matrix {m.shape} cannot act on shape {x.shape}")
        lead = x.shape[:x.ndim - _trailing_axes(x.shape, m.shape[1])]
        flat = x.reshape(lead + (m.shape[1],))
        return flat @ m.T

    return apply


def _trailing_axes(shape, n):
    size = 1
    for i, d in enumerate(reversed(shape)):
        size *= d
        if size == n:
            return i + 1
    raise DimensionError(f"no trailing axes of {shape} hold {n} elements")


def ibp_classic(x, R, P, y0, iters, tol=None):
    """Run ``iters`` back-projection steps from ``y0``.

    Returns ``(y, residual_norms)``. ``residual_norms[k]`` is
    ``||x - R(y_k)||_2`` for ``k = 0 .. iters``. Matrix operators act on
    the flattened data, and their output is reshaped to ``x`` or ``y``.

    With ``tol`` set, iteration stops early once the residual norm drops
    below it, before roundoff takes over.
    """
    R = _as_operator(R, transposed=False)
    P = _as_operator(P, transposed=True)
    x = np.asarray(x, dtype=float)
    y = np.array(y0, dtype=float, copy=True)
    r = R(y)
    if np.size(r) != x.size:
        raise DimensionError(f"R(y0) has shape {np.shape(r)}, x has shape {x.shape}")
    r = np.reshape(r, x.shape)
    norms = []
    for _ in range(iters):
        e = x - r
        norms.append(float(np.linalg.norm(e)))
        if tol is not None and norms[-1] < tol:
            return y, norms
        y = y + np.reshape(P(e), y.shape)
        r = np.reshape(R(y), x.shape)
    norms.append(float(np.linalg.norm(x - r)))
    return y, norms


def bicubic_operator_pair(height, width, factor):
    """Dense bicubic downscale ``R`` and upscale ``P`` on flattened images."""
    R = np.kron(bicubic_matrix(height, factor, "down"), bicubic_matrix(width, factor, "down"))
    P = np.kron(bicubic_matrix(height // factor, factor, "up"),
                bicubic_matrix(width // factor, factor, "up"))
    return R, P


def averaging_operator_pair(height, width, factor):
    """Box-average subsampling ``R`` and ``P = factor**2 * R.T``, so ``RP = I``."""
    def box(n):
        m = np.zeros((n // factor, n))
        for i in range(n // factor):
            m[i, i * factor:(i + 1) * factor] = 1.0 / factor
        return m

    R = np.kron(box(height), box(width))
    return R, factor * factor * R.T


def contraction_norm(R, P):
    """Spectral norm of ``I - RP``; IBP residuals contract when it is < 1."""
    R, P = np.asarray(R), np.asarray(P)
    return float(np.linalg.norm(np.eye(R.shape[0]) - R @ P, 2))
