"""Hot numeric kernels with backend selection at import time.

The compiled Cython extension is used when present; otherwise the numpy
fallback takes over. Set ``LANGBENCH_PURE_PYTHON=1`` to force the fallback
(useful for the backend-parity tests and the kernel benchmark).
"""

import os

import numpy as np

from . import _numpy

if os.environ.get("LANGBENCH_PURE_PYTHON"):
    _impl = _numpy
else:
    try:
        from . import _fast as _impl
    except ImportError:
        _impl = _numpy

BACKEND = "numpy" if _impl is _numpy else "cython"


def _as_input(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def im2col(x, kh, kw, stride=1, pad=0):
    """Patch matrix (N*OH*OW, C*kh*kw) of a (N, C, H, W) input."""
    return _impl.im2col(_as_input(x), kh, kw, stride, pad)


def col2im(cols, shape, kh, kw, stride=1, pad=0):
    """Adjoint of im2col; `shape` is the (N, C, H, W) of the original input."""
    n, c, h, w = shape
    return _impl.col2im(_as_input(cols), n, c, h, w, kh, kw, stride, pad)


def maxpool_forward(x, kh, kw, stride):
    return _impl.maxpool_forward(_as_input(x), kh, kw, stride)


def maxpool_backward(dout, argmax, h, w):
    return _impl.maxpool_backward(_as_input(dout), np.ascontiguousarray(argmax, dtype=np.int64), h, w)


def conv_output_hw(h, w, kh, kw, stride=1, pad=0):
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1
