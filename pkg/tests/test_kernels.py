"""Backend parity and structural checks for the hot kernels."""

import os
import subprocess
import sys

import numpy as np
import pytest

from langbench import _kernels as K
from langbench._kernels import _numpy as slow

try:
    from langbench._kernels import _fast as fast
except ImportError:
    fast = None

needs_ext = pytest.mark.skipif(fast is None, reason="compiled extension not built")

GEOMETRIES = [
    # n, c, h, w, kh, kw, stride, pad
    (2, 3, 7, 6, 3, 3, 1, 1),
    (1, 1, 4, 4, 1, 1, 1, 0),
    (3, 2, 9, 9, 5, 5, 1, 2),
    (2, 4, 8, 8, 3, 3, 2, 1),
    (1, 2, 5, 7, 2, 2, 2, 0),
]


@needs_ext
@pytest.mark.parametrize("n,c,h,w,kh,kw,stride,pad", GEOMETRIES)
def test_im2col_backends_bitwise_equal(n, c, h, w, kh, kw, stride, pad):
    x = np.random.default_rng(0).normal(size=(n, c, h, w))
    a = fast.im2col(np.ascontiguousarray(x), kh, kw, stride, pad)
    b = slow.im2col(x, kh, kw, stride, pad)
    assert a.shape == b.shape
    assert np.array_equal(a, b)


@needs_ext
@pytest.mark.parametrize("n,c,h,w,kh,kw,stride,pad", GEOMETRIES)
def test_col2im_backends_bitwise_equal(n, c, h, w, kh, kw, stride, pad):
    rng = np.random.default_rng(1)
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = rng.normal(size=(n * oh * ow, c * kh * kw))
    a = fast.col2im(np.ascontiguousarray(cols), n, c, h, w, kh, kw, stride, pad)
    b = slow.col2im(cols, n, c, h, w, kh, kw, stride, pad)
    assert np.array_equal(a, b)


@needs_ext
def test_maxpool_backends_bitwise_equal():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 2, 8, 6))
    oa, aa = fast.maxpool_forward(np.ascontiguousarray(x), 2, 2, 2)
    ob, ab = slow.maxpool_forward(x, 2, 2, 2)
    assert np.array_equal(oa, ob)
    assert np.array_equal(aa, ab)
    dout = rng.normal(size=oa.shape)
    da = fast.maxpool_backward(np.ascontiguousarray(dout), aa, 8, 6)
    db = slow.maxpool_backward(dout, ab, 8, 6)
    assert np.array_equal(da, db)


@pytest.mark.parametrize("n,c,h,w,kh,kw,stride,pad", GEOMETRIES)
def test_col2im_is_adjoint_of_im2col(n, c, h, w, kh, kw, stride, pad):
    # <col2im(c), x> must equal <c, im2col(x)> for the pair to be adjoint.
    rng = np.random.default_rng(3)
    x = rng.normal(size=(n, c, h, w))
    cols = K.im2col(x, kh, kw, stride, pad)
    c_rand = rng.normal(size=cols.shape)
    lhs = np.vdot(K.col2im(c_rand, x.shape, kh, kw, stride, pad), x)
    rhs = np.vdot(c_rand, cols)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(rhs))


def test_im2col_patch_content():
    # one sample, one channel: first patch of a stride-1 unpadded 3x3 window
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    cols = K.im2col(x, 3, 3, stride=1, pad=0)
    assert cols.shape == (4, 9)
    np.testing.assert_array_equal(cols[0], [0, 1, 2, 4, 5, 6, 8, 9, 10])
    np.testing.assert_array_equal(cols[3], [5, 6, 7, 9, 10, 11, 13, 14, 15])


def test_maxpool_tie_breaks_to_first_row_major_position():
    x = np.zeros((1, 1, 2, 2))
    out, argmax = K.maxpool_forward(x, 2, 2, 2)
    assert out[0, 0, 0, 0] == 0.0
    assert argmax[0, 0, 0, 0] == 0  # all equal: first position in the window


def test_maxpool_argmax_points_at_the_max():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 6, 6))
    out, argmax = K.maxpool_forward(x, 2, 2, 2)
    n, c, oh, ow = out.shape
    for i in range(n):
        for ci in range(c):
            flat = x[i, ci].ravel()
            assert np.array_equal(flat[argmax[i, ci]], out[i, ci])


def test_pure_python_env_var_forces_numpy_backend():
    env = dict(os.environ, LANGBENCH_PURE_PYTHON="1")
    code = "import langbench; print(langbench.KERNEL_BACKEND)"
    result = subprocess.run([sys.executable, "-c", code], env=env,
                            capture_output=True, text=True, check=True)
    assert result.stdout.strip() == "numpy"
