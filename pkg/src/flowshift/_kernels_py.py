"""Pure-numpy im2col / col2im, used when the compiled extension is unavailable.

Same contract as the Cython module: columns are (N*H'*W', C*kh*kw) with the
patch flattened in (c, i, j) order.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, pad):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # N,C,H',W',kh,kw
    oh, ow = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)


def col2im(cols, n, c, h, w, kh, kw, pad):
    oh = h + 2 * pad - kh + 1
    ow = w + 2 * pad - kw + 1
    if cols.shape != (n * oh * ow, c * kh * kw):
        raise ValueError("column buffer does not match the requested geometry")
    patches = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + oh, j:j + ow] += patches[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)
