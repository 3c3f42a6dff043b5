"""Numba-compiled hot kernels (serial, branchless inner loops).

Inputs are zero-padded up front so the inner loops carry no bounds
checks and vectorize along the contiguous x axis.  Accumulation happens
in float64 with a fixed term order (no fastmath), so results are
bit-stable run to run and match the numpy backend within rounding.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _pad5(x, p):
    n, c, d, h, w = x.shape
    xp = np.zeros((n, c, d + 2 * p, h + 2 * p, w + 2 * p), dtype=np.float64)
    xp[:, :, p : p + d, p : p + h, p : p + w] = x
    return xp


@njit(cache=True)
def conv3d_forward(x, w, b, padding):
    n, ci, d, h, wd = x.shape
    co, _, k, _, _ = w.shape
    xp = _pad5(x, padding)
    out = np.empty((n, co, d, h, wd), dtype=x.dtype)
    acc = np.empty((d, h, wd), dtype=np.float64)
    for nn in range(n):
        for o in range(co):
            acc[:, :, :] = np.float64(b[o])
            for i in range(ci):
                for dz in range(k):
                    for dy in range(k):
                        for dx in range(k):
                            wv = np.float64(w[o, i, dz, dy, dx])
                            for z in range(d):
                                for y in range(h):
                                    for xx in range(wd):
                                        acc[z, y, xx] += wv * xp[nn, i, z + dz, y + dy, xx + dx]
            out[nn, o] = acc.astype(x.dtype)
    return out


@njit(cache=True)
def conv3d_backward_input(gout, w, padding):
    n, co, d, h, wd = gout.shape
    _, ci, k, _, _ = w.shape
    gp = _pad5(gout, k - 1 - padding)
    gx = np.empty((n, ci, d, h, wd), dtype=gout.dtype)
    acc = np.empty((d, h, wd), dtype=np.float64)
    for nn in range(n):
        for i in range(ci):
            acc[:, :, :] = 0.0
            for o in range(co):
                for dz in range(k):
                    for dy in range(k):
                        for dx in range(k):
                            wv = np.float64(w[o, i, k - 1 - dz, k - 1 - dy, k - 1 - dx])
                            for z in range(d):
                                for y in range(h):
                                    for xx in range(wd):
                                        acc[z, y, xx] += wv * gp[nn, o, z + dz, y + dy, xx + dx]
            gx[nn, i] = acc.astype(gout.dtype)
    return gx


@njit(cache=True)
def conv3d_backward_weights(x, gout, k, padding):
    n, ci, d, h, wd = x.shape
    co = gout.shape[1]
    xp = _pad5(x, padding)
    gw = np.empty((co, ci, k, k, k), dtype=x.dtype)
    for o in range(co):
        for i in range(ci):
            for dz in range(k):
                for dy in range(k):
                    for dx in range(k):
                        acc = 0.0
                        for nn in range(n):
                            for z in range(d):
                                for y in range(h):
                                    for xx in range(wd):
                                        acc += xp[nn, i, z + dz, y + dy, xx + dx] * np.float64(
                                            gout[nn, o, z, y, xx]
                                        )
                        gw[o, i, dz, dy, dx] = acc
    return gw


@njit(cache=True)
def tconv3d_forward(x, w, b):
    n, ci, d, h, wd = x.shape
    co = w.shape[1]
    out = np.empty((n, co, 2 * d, 2 * h, 2 * wd), dtype=x.dtype)
    acc = np.empty((d, h, wd), dtype=np.float64)
    for nn in range(n):
        for o in range(co):
            for dz in range(2):
                for dy in range(2):
                    for dx in range(2):
                        acc[:, :, :] = np.float64(b[o])
                        for i in range(ci):
                            wv = np.float64(w[i, o, dz, dy, dx])
                            for z in range(d):
                                for y in range(h):
                                    for xx in range(wd):
                                        acc[z, y, xx] += wv * x[nn, i, z, y, xx]
                        out[nn, o, dz::2, dy::2, dx::2] = acc.astype(x.dtype)
    return out


@njit(cache=True)
def tconv3d_backward_input(gout, w):
    n, co, d2, h2, w2 = gout.shape
    ci = w.shape[0]
    d, h, wd = d2 // 2, h2 // 2, w2 // 2
    gx = np.empty((n, ci, d, h, wd), dtype=gout.dtype)
    acc = np.empty((d, h, wd), dtype=np.float64)
    for nn in range(n):
        for i in range(ci):
            acc[:, :, :] = 0.0
            for o in range(co):
                for dz in range(2):
                    for dy in range(2):
                        for dx in range(2):
                            wv = np.float64(w[i, o, dz, dy, dx])
                            for z in range(d):
                                for y in range(h):
                                    for xx in range(wd):
                                        acc[z, y, xx] += wv * gout[
                                            nn, o, 2 * z + dz, 2 * y + dy, 2 * xx + dx
                                        ]
            gx[nn, i] = acc.astype(gout.dtype)
    return gx


@njit(cache=True)
def tconv3d_backward_weights(x, gout):
    n, ci, d, h, wd = x.shape
    co = gout.shape[1]
    gw = np.empty((ci, co, 2, 2, 2), dtype=x.dtype)
    for i in range(ci):
        for o in range(co):
            for dz in range(2):
                for dy in range(2):
                    for dx in range(2):
                        acc = 0.0
                        for nn in range(n):
                            for z in range(d):
                                for y in range(h):
                                    for xx in range(wd):
                                        acc += np.float64(x[nn, i, z, y, xx]) * np.float64(
                                            gout[nn, o, 2 * z + dz, 2 * y + dy, 2 * xx + dx]
                                        )
                        gw[i, o, dz, dy, dx] = acc
    return gw


@njit(cache=True)
def maxpool3d_forward(x):
    n, c, d, h, wd = x.shape
    out = np.empty((n, c, d // 2, h // 2, wd // 2), dtype=x.dtype)
    idx = np.empty((n, c, d // 2, h // 2, wd // 2), dtype=np.int64)
    for nn in range(n):
        for ch in range(c):
            for z in range(d // 2):
                for y in range(h // 2):
                    for xx in range(wd // 2):
                        best = x[nn, ch, 2 * z, 2 * y, 2 * xx]
                        besti = 0
                        # scan order (dz, dy, dx), strict > keeps the first max
                        for dz in range(2):
                            for dy in range(2):
                                for dx in range(2):
                                    v = x[nn, ch, 2 * z + dz, 2 * y + dy, 2 * xx + dx]
                                    if v > best:
                                        best = v
                                        besti = dz * 4 + dy * 2 + dx
                        out[nn, ch, z, y, xx] = best
                        idx[nn, ch, z, y, xx] = besti
    return out, idx


@njit(cache=True)
def maxpool3d_backward(gout, idx, in_shape):
    n, c, d, h, wd = in_shape
    gx = np.zeros((n, c, d, h, wd), dtype=gout.dtype)
    for nn in range(n):
        for ch in range(c):
            for z in range(d // 2):
                for y in range(h // 2):
                    for xx in range(wd // 2):
                        b = idx[nn, ch, z, y, xx]
                        dz = b // 4
                        dy = (b // 2) % 2
                        dx = b % 2
                        gx[nn, ch, 2 * z + dz, 2 * y + dy, 2 * xx + dx] = gout[
                            nn, ch, z, y, xx
                        ]
    return gx
