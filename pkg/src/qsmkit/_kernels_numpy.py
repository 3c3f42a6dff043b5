"""Pure-numpy reference implementations of the hot 3D kernels.

All convolution-type kernels accumulate in float64 and cast back to the
input dtype, so float32 results stay within a couple of ulps of the
exact sum regardless of summation order.  Shapes follow the network
layout N x C x D x H x W.
"""

import numpy as np


def _windows(xp, k):
    # (N, C, D, H, W, k, k, k) sliding view over the padded input
    return np.lib.stride_tricks.sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))


def conv3d_forward(x, w, b, padding):
    k = w.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3).astype(np.float64)
    win = _windows(xp, k)
    out = np.einsum("oiabc,nidhwabc->nodhw", w.astype(np.float64), win, optimize=True)
    out += b.astype(np.float64)[None, :, None, None, None]
    return out.astype(x.dtype)


def conv3d_backward_input(gout, w, padding):
    # correlation of gout with the spatially flipped, channel-transposed kernel
    k = w.shape[2]
    wf = w[:, :, ::-1, ::-1, ::-1].astype(np.float64)
    p = k - 1 - padding
    gp = np.pad(gout, ((0, 0), (0, 0)) + ((p, p),) * 3).astype(np.float64)
    win = _windows(gp, k)
    gx = np.einsum("oiabc,nodhwabc->nidhw", wf, win, optimize=True)
    return gx.astype(gout.dtype)


def conv3d_backward_weights(x, gout, k, padding):
    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3).astype(np.float64)
    win = _windows(xp, k)
    gw = np.einsum("nidhwabc,nodhw->oiabc", win, gout.astype(np.float64), optimize=True)
    return gw.astype(x.dtype)


def tconv3d_forward(x, w, b):
    # kernel 2^3, stride 2: every output voxel receives exactly one tap
    n, ci, d, h, wd = x.shape
    co = w.shape[1]
    out = np.empty((n, co, 2 * d, 2 * h, 2 * wd), dtype=np.float64)
    x64 = x.astype(np.float64)
    for a in range(2):
        for bb in range(2):
            for c in range(2):
                out[:, :, a::2, bb::2, c::2] = np.einsum(
                    "io,nidhw->nodhw", w[:, :, a, bb, c].astype(np.float64), x64
                )
    out += b.astype(np.float64)[None, :, None, None, None]
    return out.astype(x.dtype)


def tconv3d_backward_input(gout, w):
    gx = None
    for a in range(2):
        for bb in range(2):
            for c in range(2):
                g = np.einsum(
                    "io,nodhw->nidhw",
                    w[:, :, a, bb, c].astype(np.float64),
                    gout[:, :, a::2, bb::2, c::2].astype(np.float64),
                )
                gx = g if gx is None else gx + g
    return gx.astype(gout.dtype)


def tconv3d_backward_weights(x, gout):
    ci, co = x.shape[1], gout.shape[1]
    gw = np.empty((ci, co, 2, 2, 2), dtype=np.float64)
    x64 = x.astype(np.float64)
    for a in range(2):
        for bb in range(2):
            for c in range(2):
                gw[:, :, a, bb, c] = np.einsum(
                    "nidhw,nodhw->io", x64, gout[:, :, a::2, bb::2, c::2].astype(np.float64)
                )
    return gw.astype(x.dtype)


def maxpool3d_forward(x):
    n, c, d, h, w = x.shape
    blocks = x.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(
        n, c, d // 2, h // 2, w // 2, 8
    )
    # np.argmax takes the first maximum, matching the serial scan order
    idx = np.argmax(blocks, axis=-1).astype(np.int64)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool3d_backward(gout, idx, in_shape):
    n, c, d, h, w = in_shape
    gb = np.zeros((n, c, d // 2, h // 2, w // 2, 8), dtype=gout.dtype)
    np.put_along_axis(gb, idx[..., None], gout[..., None], axis=-1)
    gb = gb.reshape(n, c, d // 2, h // 2, w // 2, 2, 2, 2)
    return gb.transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(in_shape)
