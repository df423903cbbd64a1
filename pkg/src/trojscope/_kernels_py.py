"""Pure-numpy reference kernels.

These back the engine when the compiled ``_ckernels`` extension is not
available, and serve as the cross-check for it in the test-suite.  All
image tensors are NHWC.
"""
import numpy as np


def im2col(x, k, stride, pad):
    n, h, w, c = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    cols = np.empty((n, ho, wo, k * k * c), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            j0 = (di * k + dj) * c
            cols[..., j0:j0 + c] = xp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride, :]
    return cols


def col2im(cols, x_shape, k, stride, pad):
    n, h, w, c = x_shape
    ho, wo = cols.shape[1], cols.shape[2]
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    for di in range(k):
        for dj in range(k):
            j0 = (di * k + dj) * c
            xp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride, :] += cols[..., j0:j0 + c]
    if pad:
        return xp[:, pad:pad + h, pad:pad + w, :]
    return xp


def maxpool2(x):
    """2x2/stride-2 max-pool. Returns (out, argmax-in-window as int8)."""
    n, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    win = x[:, :2 * ho, :2 * wo, :].reshape(n, ho, 2, wo, 2, c)
    win = win.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, 4)
    arg = win.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, arg


def maxpool2_backward(dout, arg, x_shape):
    n, h, w, c = x_shape
    ho, wo = dout.shape[1], dout.shape[2]
    win = np.zeros((n, ho, wo, c, 4), dtype=dout.dtype)
    np.put_along_axis(win, arg[..., None].astype(np.intp), dout[..., None], axis=-1)
    win = win.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, :2 * ho, :2 * wo, :] = win.reshape(n, 2 * ho, 2 * wo, c)
    return dx


def masked_ssd(base, patch, mask):
    """SSD of ``patch`` against every window of ``base``, over ``mask`` only.

    Returns an array indexed by the window's top-left corner, shape
    ``(H - h + 1, W - w + 1)``.
    """
    base = np.asarray(base, dtype=np.float64)
    patch = np.asarray(patch, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    h, w = m.shape
    ho, wo = base.shape[0] - h + 1, base.shape[1] - w + 1
    out = np.zeros((ho, wo))
    # direct differences (not the expanded a^2-2ab+b^2 form) keep exact zeros exact
    for i, j in zip(*np.nonzero(m)):
        d = base[i:i + ho, j:j + wo, :] - patch[i, j]
        out += np.einsum("xyc,xyc->xy", d, d)
    return out
