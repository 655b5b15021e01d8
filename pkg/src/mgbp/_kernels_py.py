"""Pure numpy im2col / col2im over 5-D (N, C, T, H, W) arrays.

Both functions expect an already padded input. The accumulation order in
``col2im`` (kernel offsets outermost, row-major) is mirrored exactly by the
compiled kernels so the two backends agree bitwise.
"""
import numpy as np


def im2col(xp, kernel, stride, out_extent):
    n, c = xp.shape[:2]
    kt, kh, kw = kernel
    st, sh, sw = stride
    ot, oh, ow = out_extent
    cols = np.empty((n, c, kt, kh, kw, ot, oh, ow), dtype=xp.dtype)
    for a in range(kt):
        ta = a + st * ot
        for b in range(kh):
            hb = b + sh * oh
            for d in range(kw):
                wd = d + sw * ow
                cols[:, :, a, b, d] = xp[:, :, a:ta:st, b:hb:sh, d:wd:sw]
    return cols.reshape(n, c * kt * kh * kw, ot * oh * ow)


def col2im(cols, padded_shape, kernel, stride, out_extent):
    n, c = padded_shape[:2]
    kt, kh, kw = kernel
    st, sh, sw = stride
    ot, oh, ow = out_extent
    cols = cols.reshape(n, c, kt, kh, kw, ot, oh, ow)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for a in range(kt):
        ta = a + st * ot
        for b in range(kh):
            hb = b + sh * oh
            for d in range(kw):
                wd = d + sw * ow
                out[:, :, a:ta:st, b:hb:sh, d:wd:sw] += cols[:, :, a, b, d]
    return out
