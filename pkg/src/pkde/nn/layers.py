"""Layer primitives with explicit forward/backward passes.

Every ``*_forward`` returns ``(out, cache)``; the matching ``*_backward``
takes the upstream gradient and that cache. Arrays are NCHW and keep the
dtype they arrive in, so passing float64 gives the gradient-check mode.
"""

from __future__ import annotations

import numpy as np


# Patch matrices are built per batch chunk of at most this many bytes. Large
# fresh allocations are dominated by page faults, so small ones are faster.
CHUNK_BYTES = 8 * 2**20


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    """(C*k*k, B*H*W) patch matrix; rows ordered like a flattened (C, k, k) kernel."""
    b, c = xp.shape[:2]
    out = np.empty((c, k, k, b, h, w), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            out[:, i, j] = xt[:, :, i:i + h, j:j + w]
    return out.reshape(c * k * k, b * h * w)


def _chunks(bsz: int, row_bytes: int):
    step = max(1, CHUNK_BYTES // max(row_bytes, 1))
    return [(i, min(i + step, bsz)) for i in range(0, bsz, step)]


def conv2d_forward(x, w, b):
    """Stride-1 'same' convolution; ``w`` is (out, in, k, k) with odd k."""
    o, c, k, _ = w.shape
    p = k // 2
    bsz, _, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    wm = w.reshape(o, -1)
    out = np.empty((bsz, o, h, wd), dtype=np.result_type(x, w))
    for i0, i1 in _chunks(bsz, c * k * k * h * wd * x.itemsize):
        cc = _im2col(xp[i0:i1], k, h, wd)
        out[i0:i1] = (wm @ cc).reshape(o, i1 - i0, h, wd).transpose(1, 0, 2, 3)
    out += b[:, None, None]
    # patches are rebuilt in backward rather than kept alive between passes
    return out, (xp, w, x.shape)


def conv2d_backward(dout, cache):
    xp, w, xshape = cache
    o, c, k, _ = w.shape
    p = k // 2
    bsz, _, h, wd = xshape
    wm = w.reshape(o, -1)
    dw = np.zeros((o, c * k * k), dtype=dout.dtype)
    dx = np.empty(xshape, dtype=dout.dtype)
    for i0, i1 in _chunks(bsz, c * k * k * h * wd * xp.itemsize):
        n = i1 - i0
        cc = _im2col(xp[i0:i1], k, h, wd)
        d2 = np.ascontiguousarray(dout[i0:i0 + n].transpose(1, 0, 2, 3)).reshape(o, -1)
        dw += d2 @ cc.T
        dcols = (wm.T @ d2).reshape(c, k, k, n, h, wd)
        dxp = np.zeros((c, n, h + 2 * p, wd + 2 * p), dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + h, j:j + wd] += dcols[:, i, j]
        dx[i0:i1] = dxp[:, :, p:p + h, p:p + wd].transpose(1, 0, 2, 3)
    db = dout.sum(axis=(0, 2, 3))
    return dx, dw.reshape(w.shape), db


def relu_forward(x):
    return np.maximum(x, 0), x


def relu_backward(dout, x):
    return dout * (x > 0)


def maxpool2_forward(x):
    b, c, h, w = x.shape
    blocks = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2_backward(dout, cache):
    idx, shape = cache
    b, c, h, w = shape
    grad = np.zeros((b, c, h // 2, w // 2, 4), dtype=dout.dtype)
    np.put_along_axis(grad, idx[..., None], dout[..., None], axis=-1)
    return grad.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)


def upsample2_forward(x):
    """Nearest-neighbour 2x upsampling."""
    return x.repeat(2, axis=2).repeat(2, axis=3), x.shape


def upsample2_backward(dout, shape):
    b, c, h, w = shape
    return dout.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5))


def sigmoid_forward(x):
    # exp(-|x|) never overflows; the negative branch stays above zero down to
    # the dtype's underflow limit instead of rounding to 0 near x = -17 (f32)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return out, e


def sigmoid_backward(dout, e):
    # s(x) * s(-x) = e / (1 + e)^2, which does not cancel to 0 once s(x) rounds to 1
    return dout * (e / ((1.0 + e) * (1.0 + e)))


def concat_forward(a, b):
    return np.concatenate([a, b], axis=1), a.shape[1]


def concat_backward(dout, split):
    return dout[:, :split], dout[:, split:]


def add_forward(a, b):
    return a + b, None


def add_backward(dout, _cache):
    return dout, dout


def mae_loss(pred, target):
    """Per-element mean absolute error and its gradient (sign(0) = 0)."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    n = diff.size
    loss = float(np.abs(diff).sum(dtype=np.float64) / n)
    grad = (np.sign(diff) / n).astype(pred.dtype)
    return loss, grad
