"""Pure-numpy fallback implementations of the hot numeric kernels.

Convolutions are lowered to a single batched BLAS matmul through an im2col
buffer.  Stride is fixed at 1 and padding at ``kernel // 2`` ("same"
geometry), which is all the network architecture ever uses.
"""

import numpy as np


def _im2col(xp, kh, kw, out_h, out_w):
    """Gather kh*kw shifted views of the padded input into one buffer.

    Returns an array of shape (B, C*kh*kw, out_h*out_w) whose row ordering
    matches ``weight.reshape(K, -1)``.
    """
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh * kw, out_h * out_w), dtype=xp.dtype)
    for di in range(kh):
        for dj in range(kw):
            patch = xp[:, :, di:di + out_h, dj:dj + out_w]
            cols[:, :, di * kw + dj, :] = patch.reshape(b, c, -1)
    return cols.reshape(b, c * kh * kw, out_h * out_w)


def conv2d_forward(x, w, b, return_ctx=False):
    """Same-padded stride-1 convolution.

    x: (B, C, H, W), w: (K, C, kh, kw), b: (K,).  Returns (y, ctx) where ctx
    is an im2col buffer the backward pass can reuse (None unless requested).
    """
    bs, _, h, wd = x.shape
    k, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _im2col(xp, kh, kw, h, wd)
    y = np.matmul(w.reshape(k, -1), cols)
    y += b.reshape(1, k, 1)
    return y.reshape(bs, k, h, wd), (cols if return_ctx else None)


def conv2d_backward(x, w, dy, ctx=None, need_dx=True):
    """Gradients of conv2d_forward w.r.t. input, weight and bias."""
    bs, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    n = h * wd
    dym = dy.reshape(bs, k, n)

    cols = ctx
    if cols is None:
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        cols = _im2col(xp, kh, kw, h, wd)

    # Batched GEMM for dW: (B,K,n) @ (B,n,P), reduced over the batch.
    dw = np.matmul(dym, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = dym.sum(axis=(0, 2))

    dx = None
    if need_dx:
        dcols = np.matmul(w.reshape(k, -1).T, dym)
        dcols = dcols.reshape(bs, c, kh * kw, h, wd)
        dxp = np.zeros((bs, c, h + 2 * ph, wd + 2 * pw), dtype=dy.dtype)
        for di in range(kh):
            for dj in range(kw):
                dxp[:, :, di:di + h, dj:dj + wd] += dcols[:, :, di * kw + dj]
        dx = dxp[:, :, ph:ph + h, pw:pw + wd]
        if ph == 0 and pw == 0:
            dx = dx.copy()
    return dx, dw.astype(dy.dtype, copy=False), db


def maxpool2_forward(x):
    """2x2 max pooling with stride 2; also returns argmax codes in {0..3}."""
    bs, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    xr = x.reshape(bs, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    cand = xr.reshape(bs, c, h2, w2, 4)
    idx = cand.argmax(axis=4).astype(np.uint8)
    y = np.take_along_axis(cand, idx[..., None], axis=4)[..., 0]
    return y, idx


def maxpool2_backward(dy, idx, h, w):
    """Scatter pooled gradients back to the argmax positions."""
    bs, c, h2, w2 = dy.shape
    dxr = np.zeros((bs, c, h2, w2, 4), dtype=dy.dtype)
    np.put_along_axis(dxr, idx[..., None], dy[..., None], axis=4)
    dxr = dxr.reshape(bs, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(dxr.reshape(bs, c, h, w))
