"""Forward/backward kernels on channel-last ``(B, H, W, C)`` arrays.

Only two convolution shapes are used by the network: stride-1 convolutions
with odd square kernels and zero "same" padding, and 3x3 stride-3
convolutions (and their transposes) that map each 3x3 block to one cell.
The latter need no padding, so they are exactly shift-equivariant for shifts
that are multiples of 3.
"""

from __future__ import annotations

import numpy as np

LEAK = 0.1


def conv_forward(x, w, b=None):
    """Stride-1 'same' convolution (cross-correlation). Returns ``(y, cols)``."""
    k = w.shape[0]
    bsz, h, wd, ci = x.shape
    if k == 1:
        cols = x
    else:
        p = k // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        cols = np.concatenate(
            [xp[:, a:a + h, c:c + wd, :] for a in range(k) for c in range(k)], axis=-1)
    y = cols.reshape(-1, k * k * ci) @ w.reshape(k * k * ci, -1)
    y = y.reshape(bsz, h, wd, -1)
    if b is not None:
        y += b
    return y, cols


def conv_backward(dy, cols, w, need_dx=True):
    """Gradients of :func:`conv_forward`; returns ``(dx, dw, db)``."""
    k, _, ci, co = w.shape
    bsz, h, wd, _ = dy.shape
    dy2 = dy.reshape(-1, co)
    dw = (cols.reshape(-1, k * k * ci).T @ dy2).reshape(w.shape)
    db = dy2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (dy2 @ w.reshape(k * k * ci, co).T).reshape(bsz, h, wd, k * k, ci)
    if k == 1:
        return dcols[..., 0, :], dw, db
    p = k // 2
    dxp = np.zeros((bsz, h + 2 * p, wd + 2 * p, ci), dtype=dy.dtype)
    for idx in range(k * k):
        a, c = divmod(idx, k)
        dxp[:, a:a + h, c:c + wd, :] += dcols[:, :, :, idx, :]
    return dxp[:, p:p + h, p:p + wd, :], dw, db


def _blocks(x):
    bsz, h, wd, c = x.shape
    return (x.reshape(bsz, h // 3, 3, wd // 3, 3, c)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(bsz, h // 3, wd // 3, 9 * c))


def _unblocks(xb, c):
    bsz, h3, w3, _ = xb.shape
    return (xb.reshape(bsz, h3, w3, 3, 3, c)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(bsz, 3 * h3, 3 * w3, c))


def down3_forward(x, w, b):
    """3x3 stride-3 convolution without padding: ``H x W -> H/3 x W/3``."""
    ci, co = w.shape[2], w.shape[3]
    xb = _blocks(x)
    y = xb.reshape(-1, 9 * ci) @ w.reshape(9 * ci, co) + b
    return y.reshape(*xb.shape[:3], co), xb


def down3_backward(dy, xb, w):
    ci, co = w.shape[2], w.shape[3]
    dy2 = dy.reshape(-1, co)
    dw = (xb.reshape(-1, 9 * ci).T @ dy2).reshape(w.shape)
    db = dy2.sum(axis=0)
    dxb = (dy2 @ w.reshape(9 * ci, co).T).reshape(xb.shape)
    return _unblocks(dxb, ci), dw, db


def up3_forward(x, w, b):
    """Transposed 3x3 stride-3 convolution: each cell expands to a 3x3 block."""
    ci, co = w.shape[2], w.shape[3]
    wt = w.transpose(2, 0, 1, 3).reshape(ci, 9 * co)
    yb = (x.reshape(-1, ci) @ wt).reshape(*x.shape[:3], 9 * co)
    return _unblocks(yb, co) + b


def up3_backward(dy, x, w):
    ci, co = w.shape[2], w.shape[3]
    dyb = _blocks(dy)
    db = dy.reshape(-1, co).sum(axis=0)
    x2 = x.reshape(-1, ci)
    dyb2 = dyb.reshape(-1, 9 * co)
    dwt = x2.T @ dyb2
    dw = dwt.reshape(ci, 3, 3, co).transpose(1, 2, 0, 3)
    wt = w.transpose(2, 0, 1, 3).reshape(ci, 9 * co)
    dx = (dyb2 @ wt.T).reshape(x.shape)
    return dx, dw, db


def lrelu(z):
    return np.where(z > 0, z, LEAK * z)


def lrelu_backward(dy, z):
    return np.where(z > 0, dy, LEAK * dy)


def smooth_lrelu(z):
    """``LEAK * z + (1 - LEAK) * softplus(z)``: a C-infinity leaky rectifier."""
    return LEAK * z + (1.0 - LEAK) * np.logaddexp(0.0, z)


def smooth_lrelu_backward(dy, z):
    return dy * (LEAK + (1.0 - LEAK) * sigmoid(z))


ACTIVATIONS = {
    "leaky_relu": (lrelu, lrelu_backward),
    "smooth_leaky_relu": (smooth_lrelu, smooth_lrelu_backward),
}


def sigmoid(z):
    # split by sign to avoid overflow in exp
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out
