"""Convolution kernels with an optional numba backend.

Set ``VMP_DISABLE_NUMBA=1`` to force the pure-numpy path. Both backends
compute stride-1 convolutions with zero "same" padding on NCHW inputs and
(kh, kw, c_in, c_out) kernels.
"""

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("VMP_DISABLE_NUMBA", "") not in ("1", "true", "yes")


def same_padding(kh, kw):
    top, left = (kh - 1) // 2, (kw - 1) // 2
    return top, kh - 1 - top, left, kw - 1 - left


def _pad(x, kh, kw):
    t, b, l, r = same_padding(kh, kw)
    return np.pad(x, ((0, 0), (0, 0), (t, b), (l, r)))


# -- numpy reference path ---------------------------------------------------

def conv2d_forward_np(x, k):
    kh, kw, _, cout = k.shape
    bsz, _, h, w = x.shape
    xp = _pad(x, kh, kw)
    out = np.zeros((bsz, h, w, cout))
    for i in range(kh):
        for j in range(kw):
            out += np.tensordot(xp[:, :, i:i + h, j:j + w], k[i, j], axes=([1], [0]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_grad_input_np(g, k):
    kh, kw, cin, _ = k.shape
    bsz, _, h, w = g.shape
    t, _, l, _ = same_padding(kh, kw)
    gxp = np.zeros((bsz, h + kh - 1, w + kw - 1, cin))
    for i in range(kh):
        for j in range(kw):
            gxp[:, i:i + h, j:j + w, :] += np.tensordot(g, k[i, j], axes=([1], [1]))
    return np.ascontiguousarray(gxp[:, t:t + h, l:l + w, :].transpose(0, 3, 1, 2))


def conv2d_grad_kernel_np(x, g, kshape):
    kh, kw, cin, cout = kshape
    h, w = x.shape[2], x.shape[3]
    xp = _pad(x, kh, kw)
    gk = np.zeros(kshape)
    for i in range(kh):
        for j in range(kw):
            gk[i, j] = np.tensordot(xp[:, :, i:i + h, j:j + w], g, axes=([0, 2, 3], [0, 2, 3]))
    return gk


# -- numba path -------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(cache=True)
    def _conv_fwd_nb(xp, k, h, w):
        bsz, cin = xp.shape[0], xp.shape[1]
        kh, kw, _, cout = k.shape
        out = np.zeros((bsz, cout, h, w))
        for b in range(bsz):
            for co in range(cout):
                for ci in range(cin):
                    for i in range(kh):
                        for j in range(kw):
                            wt = k[i, j, ci, co]
                            for y in range(h):
                                for z in range(w):
                                    out[b, co, y, z] += wt * xp[b, ci, y + i, z + j]
        return out

    @njit(cache=True)
    def _conv_gin_nb(g, k, t, l):
        bsz, cout, h, w = g.shape
        kh, kw, cin, _ = k.shape
        gxp = np.zeros((bsz, cin, h + kh - 1, w + kw - 1))
        for b in range(bsz):
            for ci in range(cin):
                for co in range(cout):
                    for i in range(kh):
                        for j in range(kw):
                            wt = k[i, j, ci, co]
                            for y in range(h):
                                for z in range(w):
                                    gxp[b, ci, y + i, z + j] += wt * g[b, co, y, z]
        return gxp[:, :, t:t + h, l:l + w].copy()

    @njit(cache=True)
    def _conv_gk_nb(xp, g, kh, kw):
        bsz, cout, h, w = g.shape
        cin = xp.shape[1]
        gk = np.zeros((kh, kw, cin, cout))
        acc = np.empty(w)  # per-column partial sums keep the inner loop vectorizable
        for i in range(kh):
            for j in range(kw):
                for ci in range(cin):
                    for co in range(cout):
                        acc[:] = 0.0
                        for b in range(bsz):
                            for y in range(h):
                                for z in range(w):
                                    acc[z] += xp[b, ci, y + i, z + j] * g[b, co, y, z]
                        gk[i, j, ci, co] = acc.sum()
        return gk

    def conv2d_forward_nb(x, k):
        kh, kw = k.shape[0], k.shape[1]
        return _conv_fwd_nb(_pad(x, kh, kw), np.ascontiguousarray(k), x.shape[2], x.shape[3])

    def conv2d_grad_input_nb(g, k):
        t, _, l, _ = same_padding(k.shape[0], k.shape[1])
        return _conv_gin_nb(np.ascontiguousarray(g), np.ascontiguousarray(k), t, l)

    def conv2d_grad_kernel_nb(x, g, kshape):
        kh, kw = kshape[0], kshape[1]
        return _conv_gk_nb(_pad(x, kh, kw), np.ascontiguousarray(g), kh, kw)


if USE_NUMBA:
    conv2d_forward = conv2d_forward_nb
    conv2d_grad_input = conv2d_grad_input_nb
    conv2d_grad_kernel = conv2d_grad_kernel_nb
else:
    conv2d_forward = conv2d_forward_np
    conv2d_grad_input = conv2d_grad_input_np
    conv2d_grad_kernel = conv2d_grad_kernel_np
