"""Dense and convolutional NN primitives with hand-written backward passes.

Every forward returns ``(out, cache)`` and the matching ``*_bwd`` consumes
``(d_out, cache)``; gradients are exact (the test suite checks each kernel
against central finite differences in float64). Kernels preserve the dtype
of their inputs so the same code path serves float32 training and float64
gradient verification.

Array conventions: token tensors are (..., N, D) with features last; image
tensors are channels-last (..., H, W, C).
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

# ---------------------------------------------------------------------------
# elementwise


def gelu_fwd(x):
    """Gaussian-error linear unit, exact erf form."""
    phi = 0.5 * (1.0 + erf(x / np.asarray(math.sqrt(2.0), dtype=x.dtype)))
    return x * phi, (x, phi)


def gelu_bwd(dy, cache):
    x, phi = cache
    dens = np.exp(-0.5 * x * x) * np.asarray(1.0 / math.sqrt(2.0 * math.pi), dtype=x.dtype)
    return dy * (phi + x * dens)


def relu_fwd(x):
    mask = x > 0
    return np.where(mask, x, np.zeros((), dtype=x.dtype)), mask


def relu_bwd(dy, mask):
    return np.where(mask, dy, np.zeros((), dtype=dy.dtype))


# ---------------------------------------------------------------------------
# linear / normalization


def linear_fwd(x, w, b=None):
    """y = x @ w (+ b). x: (..., in), w: (in, out), b: (out,)."""
    y = x @ w
    if b is not None:
        y = y + b
    return y, (x, w, b is not None)


def linear_bwd(dy, cache):
    x, w, has_b = cache
    dx = dy @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0) if has_b else None
    return dx, dw, db


def layernorm_fwd(x, g, b, eps=1e-6):
    """Normalize over the last axis, then scale and shift."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def layernorm_bwd(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * inv
    return dx, dg, db


# ---------------------------------------------------------------------------
# softmax / attention


def softmax(z, axis=-1):
    """Row-wise max-subtracted (overflow-safe) softmax."""
    zm = z - z.max(axis=axis, keepdims=True)
    e = np.exp(zm)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_bwd(dp, p, axis=-1):
    inner = (dp * p).sum(axis=axis, keepdims=True)
    return p * (dp - inner)


def attention_fwd(q, k, v):
    """Scaled dot-product attention softmax(q k^T / sqrt(d)) v.

    q: (..., Nq, d), k: (..., Nk, d), v: (..., Nk, dv). Leading axes are
    treated as independent stacks (heads, batch items).
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"q/k feature dims differ: {q.shape[-1]} vs {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"k/v row counts differ: {k.shape[-2]} vs {v.shape[-2]}")
    scale = np.asarray(1.0 / math.sqrt(q.shape[-1]), dtype=q.dtype)
    scores = (q @ np.swapaxes(k, -1, -2)) * scale
    p = softmax(scores, axis=-1)
    out = p @ v
    return out, (q, k, v, p, scale)


def attention_bwd(dout, cache):
    q, k, v, p, scale = cache
    dp = dout @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(p, -1, -2) @ dout
    ds = softmax_bwd(dp, p) * scale
    dq = ds @ k
    dk = np.swapaxes(ds, -1, -2) @ q
    return dq, dk, dv


def attention(q, k, v):
    """Forward-only public form of scaled dot-product attention."""
    out, _ = attention_fwd(np.asarray(q), np.asarray(k), np.asarray(v))
    return out


def mhsa_fwd(z, w_qkv, b_qkv, w_out, b_out, heads):
    """Multi-head self-attention on token batches z: (B, N, D).

    Channels are split across heads, attended independently, concatenated,
    and output-projected.
    """
    B, N, D = z.shape
    dh = D // heads
    qkv, lin_c = linear_fwd(z, w_qkv, b_qkv)          # (B, N, 3D)
    qkv = qkv.reshape(B, N, 3, heads, dh)
    q = np.ascontiguousarray(qkv[:, :, 0].transpose(0, 2, 1, 3))  # (B, h, N, dh)
    k = np.ascontiguousarray(qkv[:, :, 1].transpose(0, 2, 1, 3))
    v = np.ascontiguousarray(qkv[:, :, 2].transpose(0, 2, 1, 3))
    att, att_c = attention_fwd(q, k, v)               # (B, h, N, dh)
    merged = att.transpose(0, 2, 1, 3).reshape(B, N, D)
    out, out_c = linear_fwd(merged, w_out, b_out)
    return out, (lin_c, att_c, out_c, (B, N, D, heads, dh))


def mhsa_bwd(dout, cache):
    lin_c, att_c, out_c, (B, N, D, heads, dh) = cache
    dmerged, dw_out, db_out = linear_bwd(dout, out_c)
    datt = dmerged.reshape(B, N, heads, dh).transpose(0, 2, 1, 3)
    dq, dk, dv = attention_bwd(datt, att_c)
    dqkv = np.empty((B, N, 3, heads, dh), dtype=dout.dtype)
    dqkv[:, :, 0] = dq.transpose(0, 2, 1, 3)
    dqkv[:, :, 1] = dk.transpose(0, 2, 1, 3)
    dqkv[:, :, 2] = dv.transpose(0, 2, 1, 3)
    dz, dw_qkv, db_qkv = linear_bwd(dqkv.reshape(B, N, 3 * D), lin_c)
    return dz, dw_qkv, db_qkv, dw_out, db_out


# ---------------------------------------------------------------------------
# convolutional kernels (channels-last), used by the downstream classifier


def conv3x3_fwd(x, w, b):
    """Same-padded stride-1 3x3 convolution. x: (B,H,W,Cin), w: (3,3,Cin,Cout)."""
    B, H, W, Cin = x.shape
    Cout = w.shape[-1]
    xp = np.zeros((B, H + 2, W + 2, Cin), dtype=x.dtype)
    xp[:, 1:H + 1, 1:W + 1] = x
    y = np.zeros((B, H, W, Cout), dtype=x.dtype)
    w2 = w.reshape(9, Cin, Cout)
    for idx in range(9):
        di, dj = divmod(idx, 3)
        y += xp[:, di:di + H, dj:dj + W] @ w2[idx]
    y += b
    return y, (xp, w, (B, H, W, Cin, Cout))


def conv3x3_bwd(dy, cache):
    xp, w, (B, H, W, Cin, Cout) = cache
    w2 = w.reshape(9, Cin, Cout)
    dw = np.zeros_like(w2)
    dxp = np.zeros_like(xp)
    dy2 = dy.reshape(-1, Cout)
    for idx in range(9):
        di, dj = divmod(idx, 3)
        patch = xp[:, di:di + H, dj:dj + W].reshape(-1, Cin)
        dw[idx] = patch.T @ dy2
        dxp[:, di:di + H, dj:dj + W] += dy @ w2[idx].T
    db = dy2.sum(axis=0)
    return dxp[:, 1:H + 1, 1:W + 1], dw.reshape(3, 3, Cin, Cout), db


def groupnorm_fwd(x, g, b, groups, eps=1e-5):
    """Group normalization over (H, W, channels-per-group). x: (B,H,W,C)."""
    B, H, W, C = x.shape
    if C % groups:
        raise ValueError(f"channels {C} not divisible by groups {groups}")
    xg = x.reshape(B, H, W, groups, C // groups)
    mu = xg.mean(axis=(1, 2, 4), keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=(1, 2, 4), keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = (xc * inv).reshape(B, H, W, C)
    return xhat * g + b, (xhat, inv, g, groups)


def groupnorm_bwd(dy, cache):
    xhat, inv, g, groups = cache
    B, H, W, C = xhat.shape
    dg = (dy * xhat).sum(axis=(0, 1, 2))
    db = dy.sum(axis=(0, 1, 2))
    dxhat = (dy * g).reshape(B, H, W, groups, C // groups)
    xh = xhat.reshape(B, H, W, groups, C // groups)
    m1 = dxhat.mean(axis=(1, 2, 4), keepdims=True)
    m2 = (dxhat * xh).mean(axis=(1, 2, 4), keepdims=True)
    dx = ((dxhat - m1 - xh * m2) * inv).reshape(B, H, W, C)
    return dx, dg, db


def avgpool2_fwd(x):
    """2x2 average pooling, stride 2. Requires even spatial dims."""
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"spatial dims must be even for 2x2 pooling, got {H}x{W}")
    y = x.reshape(B, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))
    return y, (H, W)


def avgpool2_bwd(dy, cache):
    H, W = cache
    B = dy.shape[0]
    C = dy.shape[-1]
    quarter = np.asarray(0.25, dtype=dy.dtype)
    dx = np.broadcast_to((dy * quarter)[:, :, None, :, None, :],
                         (B, H // 2, 2, W // 2, 2, C))
    return dx.reshape(B, H, W, C)


# ---------------------------------------------------------------------------
# losses


def softmax_xent_fwd(logits, labels):
    """Mean cross-entropy over the batch; returns (loss, dlogits)."""
    p = softmax(logits, axis=-1)
    n = logits.shape[0]
    eps = np.finfo(logits.dtype).tiny
    loss = -np.log(np.maximum(p[np.arange(n), labels], eps)).mean()
    dlogits = p.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return float(loss), dlogits.astype(logits.dtype, copy=False)
