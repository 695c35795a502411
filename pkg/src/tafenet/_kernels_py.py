"""Pure-numpy convolution kernels (fallback when the compiled core is absent).

Layout is NHWC input and (k, k, C_in, C_out) filters; padding keeps H and W,
with the extra pad row/column on the high side for even k.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _pads(k):
    lo = (k - 1) // 2
    return lo, k - 1 - lo


def _windows(x, lo, hi, k):
    xp = np.pad(x, ((0, 0), (lo, hi), (lo, hi), (0, 0)))
    # (N, H, W, C, k, k)
    return sliding_window_view(xp, (k, k), axis=(1, 2))


def conv2d_same_forward(x, w):
    k = w.shape[0]
    lo, hi = _pads(k)
    win = _windows(x, lo, hi, k)
    return np.einsum("nhwcab,abco->nhwo", win, w, optimize=True).astype(x.dtype)


def conv2d_same_backward_input(gy, w):
    k = w.shape[0]
    lo, hi = _pads(k)
    wflip = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
    win = _windows(gy, k - 1 - lo, lo, k)
    return np.einsum("nhwoab,abok->nhwk", win, wflip, optimize=True).astype(gy.dtype)


def conv2d_same_backward_filter(x, gy, k):
    lo, hi = _pads(k)
    win = _windows(x, lo, hi, k)
    return np.einsum("nhwcab,nhwo->abco", win, gy, optimize=True).astype(x.dtype)
