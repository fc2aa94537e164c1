"""Pure-numpy fallback kernels.

Convolution runs through an im2col + BLAS matmul; the bilinear gather and
its transpose use fancy indexing and bincount. Shapes are NHWC with
weights (kh, kw, cin, cout). Everything is float64 and deterministic.
"""

from __future__ import annotations

import numpy as np


def _out_hw(h, w, kh, kw, stride, pad, dil):
    eh, ew = dil * (kh - 1) + 1, dil * (kw - 1) + 1
    return (h + 2 * pad - eh) // stride + 1, (w + 2 * pad - ew) // stride + 1


def _im2col(x, kh, kw, stride, pad, dil):
    n, h, w, ci = x.shape
    ho, wo = _out_hw(h, w, kh, kw, stride, pad, dil)
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    col = np.empty((n, ho, wo, kh, kw, ci), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            oi, oj = i * dil, j * dil
            col[:, :, :, i, j, :] = x[:, oi : oi + ho * stride : stride, oj : oj + wo * stride : stride, :]
    return col


def conv2d_forward(x, w, stride, pad, dil=1):
    n, h, wd, ci = x.shape
    kh, kw, _, co = w.shape
    ho, wo = _out_hw(h, wd, kh, kw, stride, pad, dil)
    col = _im2col(x, kh, kw, stride, pad, dil)
    y = col.reshape(n * ho * wo, kh * kw * ci) @ w.reshape(kh * kw * ci, co)
    return y.reshape(n, ho, wo, co)


def conv2d_grad_input(gy, w, x_shape, stride, pad, dil=1):
    n, h, wd, ci = x_shape
    kh, kw, _, co = w.shape
    ho, wo = gy.shape[1], gy.shape[2]
    gcol = gy.reshape(n * ho * wo, co) @ w.reshape(kh * kw * ci, co).T
    gcol = gcol.reshape(n, ho, wo, kh, kw, ci)
    gx = np.zeros((n, h + 2 * pad, wd + 2 * pad, ci), dtype=gy.dtype)
    for i in range(kh):
        for j in range(kw):
            oi, oj = i * dil, j * dil
            gx[:, oi : oi + ho * stride : stride, oj : oj + wo * stride : stride, :] += gcol[:, :, :, i, j, :]
    if pad:
        gx = gx[:, pad:-pad, pad:-pad, :]
    return gx


def conv2d_grad_weights(gy, x, w_shape, stride, pad, dil=1):
    kh, kw, ci, co = w_shape
    n, ho, wo, _ = gy.shape
    col = _im2col(x, kh, kw, stride, pad, dil)
    gw = col.reshape(n * ho * wo, kh * kw * ci).T @ gy.reshape(n * ho * wo, co)
    return gw.reshape(kh, kw, ci, co)


def gather4(p, idx, wts):
    """out[k] = sum_j wts[k, j] * p[idx[k, j]] for 4-tap bilinear stencils."""
    out = wts[:, 0:1] * p[idx[:, 0]]
    for j in range(1, 4):
        out += wts[:, j : j + 1] * p[idx[:, j]]
    return out


def gather4_grad(idx, wts, g, rows):
    """Transpose of gather4: scatter-add g back onto a (rows, C) buffer."""
    c = g.shape[1]
    gp = np.zeros((rows, c), dtype=g.dtype)
    for j in range(4):
        contrib = g * wts[:, j : j + 1]
        flat = idx[:, j]
        for ch in range(c):
            gp[:, ch] += np.bincount(flat, weights=contrib[:, ch], minlength=rows)
    return gp
