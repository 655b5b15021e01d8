"""Slow, obviously-correct reference implementations used as test oracles.

Nothing here shares code with the package beyond plain numpy.
"""
import itertools
import math

import numpy as np


def conv_loop(x, w, b, stride, pad):
    """Direct cross-correlation with zero padding, any number of spatial axes."""
    nd = x.ndim - 2
    xp = np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in pad])
    k = w.shape[2:]
    out_ext = [(xp.shape[2 + a] - k[a]) // stride[a] + 1 for a in range(nd)]
    out = np.zeros((x.shape[0], w.shape[0], *out_ext))
    for n in range(x.shape[0]):
        for o in range(w.shape[0]):
            for pos in itertools.product(*[range(e) for e in out_ext]):
                acc = 0.0
                for c in range(x.shape[1]):
                    for off in itertools.product(*[range(kk) for kk in k]):
                        src = tuple(pos[a] * stride[a] + off[a] for a in range(nd))
                        acc += xp[(n, c) + src] * w[(o, c) + off]
                out[(n, o) + pos] = acc + (b[o] if b is not None else 0.0)
    return out


def conv_transposed_loop(x, w, b, stride, pad):
    """Scatter form: each input sample paints a weighted kernel footprint."""
    nd = x.ndim - 2
    k = w.shape[2:]
    full_ext = [(x.shape[2 + a] - 1) * stride[a] + k[a] for a in range(nd)]
    full = np.zeros((x.shape[0], w.shape[1], *full_ext))
    for n in range(x.shape[0]):
        for c in range(x.shape[1]):
            for pos in itertools.product(*[range(e) for e in x.shape[2:]]):
                v = x[(n, c) + pos]
                for o in range(w.shape[1]):
                    for off in itertools.product(*[range(kk) for kk in k]):
                        dst = tuple(pos[a] * stride[a] + off[a] for a in range(nd))
                        full[(n, o) + dst] += v * w[(c, o) + off]
    sl = tuple(slice(p, e - p) for p, e in zip(pad, full_ext))
    out = full[(slice(None), slice(None)) + sl]
    if b is not None:
        out = out + b.reshape((1, -1) + (1,) * nd)
    return out


def dense_matrix(fn, in_shape):
    """Matrix of a linear map by probing it with every unit vector."""
    n = int(np.prod(in_shape))
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        cols.append(np.asarray(fn(e.reshape(in_shape))).ravel())
    return np.stack(cols, axis=1)


def keys_cubic(t, a=-0.5):
    t = abs(t)
    if t <= 1:
        return (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1
    if t < 2:
        return a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a
    return 0.0


def resize_1d(v, factor, direction):
    """Per-sample bicubic resampling, antialiased when shrinking."""
    n = len(v)
    if direction == "up":
        n_out, scale, width = n * factor, 1.0 / factor, 1.0
    else:
        n_out, scale, width = n // factor, float(factor), float(factor)
    out = []
    for i in range(n_out):
        u = (i + 0.5) * scale - 0.5
        taps = range(math.floor(u - 2 * width) + 1, math.ceil(u + 2 * width))
        ws = [keys_cubic((u - t) / width) for t in taps]
        s = sum(ws)
        out.append(sum(w / s * v[min(max(t, 0), n - 1)] for w, t in zip(ws, taps)))
    return np.array(out)


def gauss(size, sigma):
    r = size // 2
    g = [math.exp(-(t * t) / (2 * sigma * sigma)) for t in range(-r, r + 1)]
    s = sum(g)
    return [x / s for x in g]


def vnsc_loop(rgb, size=7, sigma=1.17, r=3):
    """Variance-normalized shift correlator, one pixel at a time."""
    Y = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
    H, W = Y.shape
    g = gauss(size, sigma)
    h = size // 2

    def at(i, j):
        return Y[min(max(i, 0), H - 1), min(max(j, 0), W - 1)]

    ihat = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            mu = 0.0
            m2 = 0.0
            for a in range(-h, h + 1):
                for b in range(-h, h + 1):
                    wgt = g[a + h] * g[b + h]
                    v = at(i + a, j + b)
                    mu += wgt * v
                    m2 += wgt * v * v
            sd = math.sqrt(max(m2 - mu * mu, 0.0))
            ihat[i, j] = (Y[i, j] - mu) / (sd + 1.0)
    out = np.zeros(((2 * r + 1) ** 2, H, W))
    for p in range(-r, r + 1):
        for q in range(-r, r + 1):
            ch = (2 * r + 1) * (p + r) + (q + r)
            for i in range(H):
                for j in range(W):
                    ii = min(max(i + p, 0), H - 1)
                    jj = min(max(j + q, 0), W - 1)
                    out[ch, i, j] = ihat[i, j] * ihat[ii, jj]
    return out


def ssim_loop(ya, yb, size=11, sigma=1.5, k1=0.01, k2=0.03, L=255.0):
    g = np.outer(gauss(size, sigma), gauss(size, sigma))
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    H, W = ya.shape
    vals = []
    for i in range(H - size + 1):
        for j in range(W - size + 1):
            pa, pb = ya[i:i + size, j:j + size], yb[i:i + size, j:j + size]
            ma, mb = (g * pa).sum(), (g * pb).sum()
            va = (g * (pa - ma) ** 2).sum()
            vb = (g * (pb - mb) ** 2).sum()
            cov = (g * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2)
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def adam_scalar(w, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return w


def unroll_leaf_calls(mu, L):
    """Count level-1 visits by literally walking the recursion."""
    def bp(k):
        if k == 1:
            return 1
        return sum(bp(k - 1) for _ in range(mu))
    return bp(L)


def recurrence_unrolled(f_by_level, mu):
    """Sum over the call tree: level j is visited mu**j times."""
    return sum(f * mu ** j for j, f in enumerate(f_by_level))
