"""Numba convolution kernels.

Same contracts as ``_numpy_impl``.  Patch gathering is fused with the
BLAS matmul per sample inside ``@njit``, which avoids materializing the
full-batch im2col buffer and the batched-transpose copies of the numpy
path.  ``cache=True`` persists compilation across processes.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _gather_cols(xn, cols, kh, kw, stride, pad, Ho, Wo):
    # cols is pre-zeroed; out-of-bounds taps stay zero (same pattern for
    # every sample, so the buffer can be reused without re-zeroing).
    Ci, H, W = xn.shape
    for p in range(Ho):
        for q in range(Wo):
            row = p * Wo + q
            col = 0
            for c in range(Ci):
                for u in range(kh):
                    ih = p * stride - pad + u
                    if 0 <= ih < H:
                        for v in range(kw):
                            iw = q * stride - pad + v
                            if 0 <= iw < W:
                                cols[row, col + v] = xn[c, ih, iw]
                    col += kw


@njit(cache=True)
def _conv_all(x, w, stride, pad):
    N, Ci, H, W = x.shape
    Co, _, kh, kw = w.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    K = Ci * kh * kw
    wmat = np.ascontiguousarray(w.reshape(Co, K).T)
    y = np.empty((N, Co, Ho, Wo), x.dtype)
    cols = np.zeros((Ho * Wo, K), x.dtype)
    for n in range(N):
        _gather_cols(x[n], cols, kh, kw, stride, pad, Ho, Wo)
        out = np.dot(cols, wmat)  # (Ho*Wo, Co)
        for o in range(Co):
            for p in range(Ho):
                for q in range(Wo):
                    y[n, o, p, q] = out[p * Wo + q, o]
    return y


@njit(cache=True)
def _psconv_all(x, w, stride, pad):
    N, Ci, H, W = x.shape
    Co, kh, kw = w.shape[1], w.shape[3], w.shape[4]
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    K = Ci * kh * kw
    y = np.empty((N, Co, Ho, Wo), x.dtype)
    cols = np.zeros((Ho * Wo, K), x.dtype)
    for n in range(N):
        _gather_cols(x[n], cols, kh, kw, stride, pad, Ho, Wo)
        wmat = np.ascontiguousarray(w[n].reshape(Co, K).T)
        out = np.dot(cols, wmat)
        for o in range(Co):
            for p in range(Ho):
                for q in range(Wo):
                    y[n, o, p, q] = out[p * Wo + q, o]
    return y


@njit(cache=True)
def _zero_stuffed(dy, stride, Hp, Wp, kh, kw):
    N, Co, Ho, Wo = dy.shape
    up = np.zeros((N, Co, Hp + kh - 1, Wp + kw - 1), dy.dtype)
    for n in range(N):
        for o in range(Co):
            for p in range(Ho):
                for q in range(Wo):
                    up[n, o, kh - 1 + p * stride, kw - 1 + q * stride] = dy[n, o, p, q]
    return up


@njit(cache=True)
def _flip_oi(w):
    Co, Ci, kh, kw = w.shape
    wr = np.empty((Ci, Co, kh, kw), w.dtype)
    for o in range(Co):
        for c in range(Ci):
            for u in range(kh):
                for v in range(kw):
                    wr[c, o, u, v] = w[o, c, kh - 1 - u, kw - 1 - v]
    return wr


@njit(cache=True)
def _flip_oi_ps(w):
    N, Co, Ci, kh, kw = w.shape
    wr = np.empty((N, Ci, Co, kh, kw), w.dtype)
    for n in range(N):
        for o in range(Co):
            for c in range(Ci):
                for u in range(kh):
                    for v in range(kw):
                        wr[n, c, o, u, v] = w[n, o, c, kh - 1 - u, kw - 1 - v]
    return wr


@njit(cache=True)
def _crop(x, pad, H, W):
    N, C = x.shape[0], x.shape[1]
    out = np.empty((N, C, H, W), x.dtype)
    for n in range(N):
        for c in range(C):
            for h in range(H):
                for w_ in range(W):
                    out[n, c, h, w_] = x[n, c, pad + h, pad + w_]
    return out


@njit(cache=True)
def _conv_dx(dy, w, stride, pad, H, W):
    kh, kw = w.shape[2], w.shape[3]
    up = _zero_stuffed(dy, stride, H + 2 * pad, W + 2 * pad, kh, kw)
    dx = _conv_all(up, _flip_oi(w), 1, 0)
    if pad:
        dx = _crop(dx, pad, H, W)
    return dx


@njit(cache=True)
def _psconv_dx(dy, w, stride, pad, H, W):
    kh, kw = w.shape[3], w.shape[4]
    up = _zero_stuffed(dy, stride, H + 2 * pad, W + 2 * pad, kh, kw)
    dx = _psconv_all(up, _flip_oi_ps(w), 1, 0)
    if pad:
        dx = _crop(dx, pad, H, W)
    return dx


@njit(cache=True)
def _conv_dw(x, dy, stride, pad, kh, kw):
    N, Ci = x.shape[0], x.shape[1]
    Co, Ho, Wo = dy.shape[1], dy.shape[2], dy.shape[3]
    K = Ci * kh * kw
    dw = np.zeros((Co, K), x.dtype)
    cols = np.zeros((Ho * Wo, K), x.dtype)
    for n in range(N):
        _gather_cols(x[n], cols, kh, kw, stride, pad, Ho, Wo)
        dyn = np.ascontiguousarray(dy[n].reshape(Co, Ho * Wo))
        dw += np.dot(dyn, cols)
    return dw.reshape(Co, Ci, kh, kw)


@njit(cache=True)
def _psconv_dw(x, dy, stride, pad, kh, kw):
    N, Ci = x.shape[0], x.shape[1]
    Co, Ho, Wo = dy.shape[1], dy.shape[2], dy.shape[3]
    K = Ci * kh * kw
    dw = np.empty((N, Co, K), x.dtype)
    cols = np.zeros((Ho * Wo, K), x.dtype)
    for n in range(N):
        _gather_cols(x[n], cols, kh, kw, stride, pad, Ho, Wo)
        dyn = np.ascontiguousarray(dy[n].reshape(Co, Ho * Wo))
        dw[n] = np.dot(dyn, cols)
    return dw.reshape(N, Co, Ci, kh, kw)


def conv2d(x, w, stride, pad):
    return _conv_all(x, w, stride, pad)


def psconv2d(x, w, stride, pad):
    return _psconv_all(x, w, stride, pad)


def conv2d_dx(dy, w, stride, pad, H, W):
    return _conv_dx(dy, w, stride, pad, H, W)


def psconv2d_dx(dy, w, stride, pad, H, W):
    return _psconv_dx(dy, w, stride, pad, H, W)


def conv2d_dw(x, dy, stride, pad, kh, kw):
    return _conv_dw(x, dy, stride, pad, kh, kw)


def psconv2d_dw(x, dy, stride, pad, kh, kw):
    return _psconv_dw(x, dy, stride, pad, kh, kw)
