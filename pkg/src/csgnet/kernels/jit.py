"""Numba-compiled versions of the hot kernels.

Same contracts as :mod:`csgnet.kernels.reference`.  The 3x3 stride-1 case —
the only one the backbone uses — gets a specialized register-blocked kernel;
other kernel sizes fall back to a generic loop.  Every output element is one
sequential accumulation, so results are reproducible run-to-run.

The input-gradient pass reuses the forward kernel: for stride-1 same
padding, d(input) is the convolution of d(output) with the spatially
flipped, channel-transposed weights.
"""

import numpy as np
from numba import njit

_OPTS = {"cache": True, "fastmath": False}


@njit(**_OPTS)
def _conv_fwd3(xp, w, b, y):
    bs, k, h, wd = y.shape
    c = xp.shape[1]
    for bi in range(bs):
        for ko in range(k):
            bias = b[ko]
            for ci in range(c):
                w00 = w[ko, ci, 0, 0]; w01 = w[ko, ci, 0, 1]; w02 = w[ko, ci, 0, 2]
                w10 = w[ko, ci, 1, 0]; w11 = w[ko, ci, 1, 1]; w12 = w[ko, ci, 1, 2]
                w20 = w[ko, ci, 2, 0]; w21 = w[ko, ci, 2, 1]; w22 = w[ko, ci, 2, 2]
                for i in range(h):
                    r0 = xp[bi, ci, i]
                    r1 = xp[bi, ci, i + 1]
                    r2 = xp[bi, ci, i + 2]
                    yo = y[bi, ko, i]
                    if ci == 0:
                        for j in range(wd):
                            yo[j] = (bias
                                     + w00 * r0[j] + w01 * r0[j + 1] + w02 * r0[j + 2]
                                     + w10 * r1[j] + w11 * r1[j + 1] + w12 * r1[j + 2]
                                     + w20 * r2[j] + w21 * r2[j + 1] + w22 * r2[j + 2])
                    else:
                        for j in range(wd):
                            yo[j] += (w00 * r0[j] + w01 * r0[j + 1] + w02 * r0[j + 2]
                                      + w10 * r1[j] + w11 * r1[j + 1] + w12 * r1[j + 2]
                                      + w20 * r2[j] + w21 * r2[j + 1] + w22 * r2[j + 2])


@njit(**_OPTS)
def _conv_fwd_generic(xp, w, b, y):
    bs, k, h, wd = y.shape
    c = xp.shape[1]
    kh, kw = w.shape[2], w.shape[3]
    for bi in range(bs):
        for ko in range(k):
            for i in range(h):
                for j in range(wd):
                    acc = b[ko]
                    for ci in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += w[ko, ci, di, dj] * xp[bi, ci, i + di, j + dj]
                    y[bi, ko, i, j] = acc


# The weight-gradient kernels are pure reductions; fastmath lets LLVM build
# vectorized partial sums (the summation order is fixed per compiled binary,
# so results stay reproducible run-to-run).
@njit(cache=True, fastmath=True)
def _conv_dw_db3(xp, dy, dw, db):
    bs, k, h, wd = dy.shape
    c = xp.shape[1]
    for ko in range(k):
        acc_b = 0.0
        for bi in range(bs):
            for i in range(h):
                row = dy[bi, ko, i]
                for j in range(wd):
                    acc_b += row[j]
        db[ko] = acc_b
        for ci in range(c):
            s00 = 0.0; s01 = 0.0; s02 = 0.0
            s10 = 0.0; s11 = 0.0; s12 = 0.0
            s20 = 0.0; s21 = 0.0; s22 = 0.0
            for bi in range(bs):
                for i in range(h):
                    g = dy[bi, ko, i]
                    r0 = xp[bi, ci, i]
                    r1 = xp[bi, ci, i + 1]
                    r2 = xp[bi, ci, i + 2]
                    for j in range(wd):
                        d = g[j]
                        s00 += d * r0[j]; s01 += d * r0[j + 1]; s02 += d * r0[j + 2]
                        s10 += d * r1[j]; s11 += d * r1[j + 1]; s12 += d * r1[j + 2]
                        s20 += d * r2[j]; s21 += d * r2[j + 1]; s22 += d * r2[j + 2]
            dw[ko, ci, 0, 0] = s00; dw[ko, ci, 0, 1] = s01; dw[ko, ci, 0, 2] = s02
            dw[ko, ci, 1, 0] = s10; dw[ko, ci, 1, 1] = s11; dw[ko, ci, 1, 2] = s12
            dw[ko, ci, 2, 0] = s20; dw[ko, ci, 2, 1] = s21; dw[ko, ci, 2, 2] = s22


@njit(cache=True, fastmath=True)
def _conv_dw_db_generic(xp, dy, dw, db):
    bs, k, h, wd = dy.shape
    c = xp.shape[1]
    kh, kw = dw.shape[2], dw.shape[3]
    for ko in range(k):
        acc_b = 0.0
        for bi in range(bs):
            for i in range(h):
                for j in range(wd):
                    acc_b += dy[bi, ko, i, j]
        db[ko] = acc_b
        for ci in range(c):
            for di in range(kh):
                for dj in range(kw):
                    acc = 0.0
                    for bi in range(bs):
                        for i in range(h):
                            for j in range(wd):
                                acc += dy[bi, ko, i, j] * xp[bi, ci, i + di, j + dj]
                    dw[ko, ci, di, dj] = acc


@njit(**_OPTS)
def _pool_fwd(x, y, idx):
    bs, c, h2, w2 = y.shape
    for bi in range(bs):
        for ci in range(c):
            for i in range(h2):
                for j in range(w2):
                    best = x[bi, ci, 2 * i, 2 * j]
                    arg = 0
                    v = x[bi, ci, 2 * i, 2 * j + 1]
                    if v > best:
                        best, arg = v, 1
                    v = x[bi, ci, 2 * i + 1, 2 * j]
                    if v > best:
                        best, arg = v, 2
                    v = x[bi, ci, 2 * i + 1, 2 * j + 1]
                    if v > best:
                        best, arg = v, 3
                    y[bi, ci, i, j] = best
                    idx[bi, ci, i, j] = arg


@njit(**_OPTS)
def _pool_bwd(dy, idx, dx):
    bs, c, h2, w2 = dy.shape
    for bi in range(bs):
        for ci in range(c):
            for i in range(h2):
                for j in range(w2):
                    a = idx[bi, ci, i, j]
                    dx[bi, ci, 2 * i + a // 2, 2 * j + a % 2] = dy[bi, ci, i, j]


def _pad(x, ph, pw):
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def conv2d_forward(x, w, b, return_ctx=False):
    bs, _, h, wd = x.shape
    k, _, kh, kw = w.shape
    xp = _pad(x, kh // 2, kw // 2)
    y = np.empty((bs, k, h, wd), dtype=x.dtype)
    if kh == 3 and kw == 3:
        _conv_fwd3(xp, w, b, y)
    else:
        _conv_fwd_generic(xp, w, b, y)
    return y, (xp if return_ctx else None)


def conv2d_backward(x, w, dy, ctx=None, need_dx=True):
    bs, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    xp = ctx if ctx is not None else _pad(x, kh // 2, kw // 2)
    dw = np.empty(w.shape, dtype=dy.dtype)
    db = np.empty(k, dtype=dy.dtype)
    if kh == 3 and kw == 3:
        _conv_dw_db3(xp, dy, dw, db)
    else:
        _conv_dw_db_generic(xp, dy, dw, db)
    dx = None
    if need_dx:
        # d(input) = conv(d(output), flipped weights with channels swapped)
        wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dyp = _pad(dy, kh // 2, kw // 2)
        dx = np.empty((bs, c, h, wd), dtype=dy.dtype)
        zeros = np.zeros(c, dtype=dy.dtype)
        if kh == 3 and kw == 3:
            _conv_fwd3(dyp, wt, zeros, dx)
        else:
            _conv_fwd_generic(dyp, wt, zeros, dx)
    return dx, dw, db


def maxpool2_forward(x):
    bs, c, h, w = x.shape
    y = np.empty((bs, c, h // 2, w // 2), dtype=x.dtype)
    idx = np.empty(y.shape, dtype=np.uint8)
    _pool_fwd(x, y, idx)
    return y, idx


def maxpool2_backward(dy, idx, h, w):
    bs, c = dy.shape[:2]
    dx = np.zeros((bs, c, h, w), dtype=dy.dtype)
    _pool_bwd(dy, idx, dx)
    return dx
