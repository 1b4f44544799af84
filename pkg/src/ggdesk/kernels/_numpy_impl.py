"""Pure-numpy convolution kernels (im2col + BLAS matmul).

Cross-correlation convention throughout: no kernel flip.  Shared-weight
kernels are (Co, Ci, kh, kw); per-sample kernels are (N, Co, Ci, kh, kw).
The backward kernels are exact adjoints of the forward, derived from the
trilinear form <dy, conv(x, w)>.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _im2col(x, kh, kw, stride, pad):
    """Return patches as a contiguous (N, Ho*Wo, Ci*kh*kw) array."""
    N, C, H, W = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = _out_size(H, kh, stride, pad)
    Wo = _out_size(W, kw, stride, pad)
    s0, s1, s2, s3 = x.strides
    view = as_strided(
        x,
        shape=(N, Ho, Wo, C, kh, kw),
        strides=(s0, s2 * stride, s3 * stride, s1, s2, s3),
    )
    return np.ascontiguousarray(view).reshape(N, Ho * Wo, C * kh * kw), Ho, Wo


def conv2d(x, w, stride, pad):
    N, Ci, H, W = x.shape
    Co, _, kh, kw = w.shape
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        y = np.matmul(w.reshape(Co, Ci), x.reshape(N, Ci, H * W))
        return np.ascontiguousarray(y.reshape(N, Co, H, W))
    cols, Ho, Wo = _im2col(x, kh, kw, stride, pad)
    y = np.matmul(cols.reshape(N * Ho * Wo, -1), w.reshape(Co, -1).T)
    y = y.reshape(N, Ho * Wo, Co).transpose(0, 2, 1)
    return np.ascontiguousarray(y.reshape(N, Co, Ho, Wo))


def psconv2d(x, w, stride, pad):
    N, Ci, H, W = x.shape
    _, Co, _, kh, kw = w.shape
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        y = np.matmul(w.reshape(N, Co, Ci), x.reshape(N, Ci, H * W))
        return np.ascontiguousarray(y.reshape(N, Co, H, W))
    cols, Ho, Wo = _im2col(x, kh, kw, stride, pad)
    y = np.matmul(cols, w.reshape(N, Co, -1).transpose(0, 2, 1))
    return np.ascontiguousarray(y.transpose(0, 2, 1).reshape(N, Co, Ho, Wo))


def _zero_stuffed(dy, stride, Hp, Wp, kh, kw):
    """Zero-stuff dy so dx becomes a stride-1 full correlation."""
    N, Co, Ho, Wo = dy.shape
    up = np.zeros((N, Co, Hp + kh - 1, Wp + kw - 1), dtype=dy.dtype)
    up[:, :, kh - 1 : kh - 1 + (Ho - 1) * stride + 1 : stride,
        kw - 1 : kw - 1 + (Wo - 1) * stride + 1 : stride] = dy
    return up


def conv2d_dx(dy, w, stride, pad, H, W):
    Co, Ci, kh, kw = w.shape
    N = dy.shape[0]
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        dx = np.matmul(w.reshape(Co, Ci).T, dy.reshape(N, Co, H * W))
        return np.ascontiguousarray(dx.reshape(N, Ci, H, W))
    up = _zero_stuffed(dy, stride, H + 2 * pad, W + 2 * pad, kh, kw)
    wr = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dx = conv2d(up, wr, 1, 0)
    if pad:
        dx = np.ascontiguousarray(dx[:, :, pad : pad + H, pad : pad + W])
    return dx


def psconv2d_dx(dy, w, stride, pad, H, W):
    N, Co, Ci, kh, kw = w.shape
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        dx = np.matmul(w.reshape(N, Co, Ci).transpose(0, 2, 1),
                       dy.reshape(N, Co, H * W))
        return np.ascontiguousarray(dx.reshape(N, Ci, H, W))
    up = _zero_stuffed(dy, stride, H + 2 * pad, W + 2 * pad, kh, kw)
    wr = np.ascontiguousarray(w[:, :, :, ::-1, ::-1].transpose(0, 2, 1, 3, 4))
    dx = psconv2d(up, wr, 1, 0)
    if pad:
        dx = np.ascontiguousarray(dx[:, :, pad : pad + H, pad : pad + W])
    return dx


def conv2d_dw(x, dy, stride, pad, kh, kw):
    N, Ci, H, W = x.shape
    Co = dy.shape[1]
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        dymat = dy.reshape(N, Co, H * W).transpose(1, 0, 2).reshape(Co, N * H * W)
        xmat = x.reshape(N, Ci, H * W).transpose(1, 0, 2).reshape(Ci, N * H * W)
        dw = np.matmul(np.ascontiguousarray(dymat), np.ascontiguousarray(xmat).T)
        return np.ascontiguousarray(dw.reshape(Co, Ci, 1, 1))
    cols, Ho, Wo = _im2col(x, kh, kw, stride, pad)
    dymat = dy.reshape(N, Co, Ho * Wo).transpose(1, 0, 2).reshape(Co, N * Ho * Wo)
    dw = np.matmul(np.ascontiguousarray(dymat), cols.reshape(N * Ho * Wo, -1))
    return np.ascontiguousarray(dw.reshape(Co, Ci, kh, kw))


def psconv2d_dw(x, dy, stride, pad, kh, kw):
    N, Ci, H, W = x.shape
    Co = dy.shape[1]
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        dw = np.matmul(dy.reshape(N, Co, H * W),
                       x.reshape(N, Ci, H * W).transpose(0, 2, 1))
        return np.ascontiguousarray(dw.reshape(N, Co, Ci, 1, 1))
    cols, Ho, Wo = _im2col(x, kh, kw, stride, pad)
    dw = np.matmul(dy.reshape(N, Co, Ho * Wo), cols)
    return np.ascontiguousarray(dw.reshape(N, Co, Ci, kh, kw))
