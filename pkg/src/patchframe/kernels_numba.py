"""Numba-jitted kernels, mirror of kernels_numpy.

All loops are written gather-form: every output element is accumulated by
exactly one thread in a fixed order, so results are bit-reproducible even
under prange. fastmath stays off for parity with the numpy path.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange


@njit(cache=True, parallel=True, nogil=True)
def _conv2d_forward(x, w, stride, pad, dil):
    n, h, wd, ci = x.shape
    kh, kw, _, co = w.shape
    ho = (h + 2 * pad - (dil * (kh - 1) + 1)) // stride + 1
    wo = (wd + 2 * pad - (dil * (kw - 1) + 1)) // stride + 1
    y = np.zeros((n, ho, wo, co), dtype=np.float64)
    for t in prange(n * ho):
        b = t // ho
        oy = t % ho
        iy0 = oy * stride - pad
        for ox in range(wo):
            ix0 = ox * stride - pad
            for i in range(kh):
                iy = iy0 + i * dil
                if iy < 0 or iy >= h:
                    continue
                for j in range(kw):
                    ix = ix0 + j * dil
                    if ix < 0 or ix >= wd:
                        continue
                    for c in range(ci):
                        v = x[b, iy, ix, c]
                        for o in range(co):
                            y[b, oy, ox, o] += v * w[i, j, c, o]
    return y


def conv2d_forward(x, w, stride, pad, dil=1):
    return _conv2d_forward(x, w, stride, pad, dil)


@njit(cache=True, parallel=True, nogil=True)
def _conv2d_grad_input(gy, w, h, wd, stride, pad, dil):
    n, ho, wo, co = gy.shape
    kh, kw, ci, _ = w.shape
    gx = np.zeros((n, h, wd, ci), dtype=np.float64)
    for t in prange(n * h):
        b = t // h
        iy = t % h
        for ix in range(wd):
            for i in range(kh):
                num_y = iy + pad - i * dil
                if num_y < 0 or num_y % stride != 0:
                    continue
                oy = num_y // stride
                if oy >= ho:
                    continue
                for j in range(kw):
                    num_x = ix + pad - j * dil
                    if num_x < 0 or num_x % stride != 0:
                        continue
                    ox = num_x // stride
                    if ox >= wo:
                        continue
                    for c in range(ci):
                        acc = 0.0
                        for o in range(co):
                            acc += gy[b, oy, ox, o] * w[i, j, c, o]
                        gx[b, iy, ix, c] += acc
    return gx


def conv2d_grad_input(gy, w, x_shape, stride, pad, dil=1):
    return _conv2d_grad_input(gy, w, x_shape[1], x_shape[2], stride, pad, dil)


@njit(cache=True, parallel=True, nogil=True)
def _conv2d_grad_weights(gy, x, kh, kw, stride, pad, dil):
    n, ho, wo, co = gy.shape
    _, h, wd, ci = x.shape
    gw = np.zeros((kh, kw, ci, co), dtype=np.float64)
    for q in prange(kh * kw * ci):
        i = q // (kw * ci)
        rem = q % (kw * ci)
        j = rem // ci
        c = rem % ci
        for b in range(n):
            for oy in range(ho):
                iy = oy * stride - pad + i * dil
                if iy < 0 or iy >= h:
                    continue
                for ox in range(wo):
                    ix = ox * stride - pad + j * dil
                    if ix < 0 or ix >= wd:
                        continue
                    v = x[b, iy, ix, c]
                    for o in range(co):
                        gw[i, j, c, o] += v * gy[b, oy, ox, o]
    return gw


def conv2d_grad_weights(gy, x, w_shape, stride, pad, dil=1):
    return _conv2d_grad_weights(gy, x, w_shape[0], w_shape[1], stride, pad, dil)


@njit(cache=True, nogil=True)
def gather4(p, idx, wts):
    k, c = idx.shape[0], p.shape[1]
    out = np.empty((k, c), dtype=np.float64)
    for i in range(k):
        for ch in range(c):
            acc = 0.0
            for j in range(4):
                acc += wts[i, j] * p[idx[i, j], ch]
            out[i, ch] = acc
    return out


@njit(cache=True, nogil=True)
def gather4_grad(idx, wts, g, rows):
    k, c = g.shape
    gp = np.zeros((rows, c), dtype=np.float64)
    for i in range(k):
        for j in range(4):
            w = wts[i, j]
            r = idx[i, j]
            for ch in range(c):
                gp[r, ch] += w * g[i, ch]
    return gp
