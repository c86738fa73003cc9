"""Pure-numpy implementations of the hot kernels.

Semantics (shapes, tie-breaking, accumulation order) are kept identical to
the compiled versions in ``_fast.pyx`` so the two backends are
interchangeable bit for bit.
"""

import numpy as np

from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride, pad):
    """Lower (N, C, H, W) input to a patch matrix of shape (N*OH*OW, C*kh*kw).

    Row r = (n*OH + oh)*OW + ow holds the receptive field of output pixel
    (oh, ow) of sample n; columns are ordered (channel, ki, kj) row-major.
    """
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols)


def col2im(cols, n, c, h, w, kh, kw, stride, pad):
    """Adjoint of im2col: scatter-add patch columns back to (N, C, H, W)."""
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    dxp = np.zeros((n, c, hp, wp), dtype=np.float64)
    # (n, c, ki, kj, oh, ow); loop over kernel offsets so each cell
    # accumulates its contributions in ascending (ki, kj) order.
    cols6 = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for ki in range(kh):
        for kj in range(kw):
            dxp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += cols6[:, :, ki, kj]
    if pad:
        dxp = dxp[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(dxp)


def maxpool_forward(x, kh, kw, stride):
    """Max-pool (N, C, H, W); returns (out, argmax of flat spatial index).

    Ties go to the first occurrence in row-major window order.
    """
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, oh, ow, kh * kw)
    idx = flat.argmax(axis=4)
    out = np.take_along_axis(flat, idx[..., None], axis=4)[..., 0]
    ih = (np.arange(oh) * stride)[None, None, :, None] + idx // kw
    iw = (np.arange(ow) * stride)[None, None, None, :] + idx % kw
    argmax = (ih * w + iw).astype(np.int64)
    return np.ascontiguousarray(out), argmax


def maxpool_backward(dout, argmax, h, w):
    """Route each pooled gradient back to its argmax input position."""
    n, c, oh, ow = dout.shape
    dx = np.zeros((n, c, h * w), dtype=np.float64)
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(dx, (ni, ci, argmax), dout)
    return dx.reshape(n, c, h, w)
