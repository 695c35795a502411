"""Kernel selection: the compiled extension when importable, else numpy.

The compiled loops beat the BLAS-backed einsum only on small problems, so
calls above ``CYTHON_MAX_MACS`` multiply-adds go to numpy either way (see
benchmarks/bench_kernels.py). Set ``TAFENET_PURE_PYTHON=1`` to force the
numpy path everywhere.
"""

import os

import numpy as np

from tafenet import _kernels_py

BACKEND = "python"
CYTHON_MAX_MACS = 1_000_000

_c = None
if os.environ.get("TAFENET_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from tafenet import _ckernels as _c

        BACKEND = "cython"
    except ImportError:
        _c = None


def _small(n_pixels: int, w_shape) -> bool:
    return _c is not None and n_pixels * int(np.prod(w_shape)) <= CYTHON_MAX_MACS


def _pick(n_pixels, w_shape, arrays):
    if _small(n_pixels, w_shape):
        return _c, [np.ascontiguousarray(a) for a in arrays]
    return _kernels_py, arrays


def conv2d_same_forward(x, w):
    mod, (x, w) = _pick(x.shape[0] * x.shape[1] * x.shape[2], w.shape, (x, w))
    return mod.conv2d_same_forward(x, w)


def conv2d_same_backward_input(gy, w):
    mod, (gy, w) = _pick(gy.shape[0] * gy.shape[1] * gy.shape[2], w.shape, (gy, w))
    return mod.conv2d_same_backward_input(gy, w)


def conv2d_same_backward_filter(x, gy, k):
    w_shape = (k, k, x.shape[3], gy.shape[3])
    mod, (x, gy) = _pick(x.shape[0] * x.shape[1] * x.shape[2], w_shape, (x, gy))
    return mod.conv2d_same_backward_filter(x, gy, k)
