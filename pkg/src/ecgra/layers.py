"""Forward/backward pairs for the network's building blocks.

Each ``*_forward`` returns ``(out, cache)``; the matching ``*_backward`` takes
the upstream gradient and that cache and returns gradients for every
differentiable argument. Arrays keep whatever float dtype they arrive in, so
the same code runs in float32 for training and float64 for gradient checks.
"""

from __future__ import annotations

import numpy as np


def _same_padding(length: int, kernel: int, stride: int) -> tuple[int, int, int]:
    out = -(-length // stride)
    total = max((out - 1) * stride + kernel - length, 0)
    return out, total // 2, total - total // 2


def conv1d_forward(x, w, b, stride: int = 1):
    """Cross-correlation with zero 'same' padding.

    x: (B, C_in, T), w: (C_out, C_in, K), b: (C_out,) -> (B, C_out, ceil(T/stride)).
    For even K the extra padding sample goes on the right.
    """
    bsz, c_in, t = x.shape
    c_out, c_in_w, k = w.shape
    if c_in != c_in_w or b.shape != (c_out,):
        raise ValueError(f"conv1d shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    t_out, left, right = _same_padding(t, k, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (left, right))).transpose(1, 0, 2)  # (C_in, B, T+pad)
    # one (C_out, C_in*K) x (C_in*K, B*T_out) product keeps BLAS busy
    cols = np.empty((c_in, k, bsz, t_out), dtype=x.dtype)
    for j in range(k):
        cols[:, j] = xp[:, :, j:j + stride * t_out:stride]
    cols = cols.reshape(c_in * k, bsz * t_out)
    out = (w.reshape(c_out, c_in * k) @ cols).reshape(c_out, bsz, t_out)
    out += b[:, None, None]
    return np.ascontiguousarray(out.transpose(1, 0, 2)), (cols, x.shape, w, left, stride)


def conv1d_backward(dout, cache):
    cols, xshape, w, left, stride = cache
    bsz, c_in, t = xshape
    c_out, _, k = w.shape
    t_out = dout.shape[2]
    d2 = np.ascontiguousarray(dout.transpose(1, 0, 2)).reshape(c_out, bsz * t_out)
    db = d2.sum(axis=1)
    dw = (d2 @ cols.T).reshape(w.shape)
    dcols = (w.reshape(c_out, c_in * k).T @ d2).reshape(c_in, k, bsz, t_out)
    dxp = np.zeros((c_in, bsz, t + k + stride * t_out), dtype=dout.dtype)
    for j in range(k):
        dxp[:, :, j:j + stride * t_out:stride] += dcols[:, j]
    return np.ascontiguousarray(dxp[:, :, left:left + t].transpose(1, 0, 2)), dw, db


def batchnorm_forward(x, gamma, beta, state: dict | None = None, train: bool = True,
                      momentum: float = 0.1, eps: float = 1e-5):
    """Per-channel normalization over the (batch, time) axes.

    ``state`` holds ``running_mean``/``running_var``; train mode updates them
    in place (unbiased variance), eval mode normalizes with them.
    """
    n = x.shape[0] * x.shape[2]
    if train:
        if n < 2:
            raise ValueError("batchnorm in train mode needs more than one value per channel")
        mean = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))
        if state is not None:
            state["running_mean"] *= 1 - momentum
            state["running_mean"] += momentum * mean.astype(state["running_mean"].dtype)
            state["running_var"] *= 1 - momentum
            state["running_var"] += momentum * (var * n / (n - 1)).astype(state["running_var"].dtype)
    else:
        mean = state["running_mean"].astype(x.dtype)
        var = state["running_var"].astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None]) * inv_std[None, :, None]
    out = gamma[None, :, None] * xhat + beta[None, :, None]
    return out, (xhat, inv_std, gamma, train)


def batchnorm_backward(dout, cache):
    xhat, inv_std, gamma, train = cache
    dgamma = (dout * xhat).sum(axis=(0, 2))
    dbeta = dout.sum(axis=(0, 2))
    dxhat = dout * gamma[None, :, None]
    if not train:
        return dxhat * inv_std[None, :, None], dgamma, dbeta
    n = dout.shape[0] * dout.shape[2]
    dx = (inv_std[None, :, None] / n) * (
        n * dxhat
        - dxhat.sum(axis=(0, 2), keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
    )
    return dx, dgamma, dbeta


def relu_forward(x):
    return np.maximum(x, 0), x


def relu_backward(dout, x):
    return dout * (x > 0)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_forward(x):
    y = sigmoid(x)
    return y, y


def sigmoid_backward(dout, y):
    return dout * y * (1 - y)


def softmax(x, axis: int = -1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_forward(x, axis: int = -1):
    y = softmax(x, axis)
    return y, (y, axis)


def softmax_backward(dout, cache):
    y, axis = cache
    return y * (dout - (dout * y).sum(axis=axis, keepdims=True))


def dropout_forward(x, p: float, train: bool, rng: np.random.Generator | None):
    """Inverted dropout; the mask is kept for the backward pass."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not train or p == 0:
        return x, None
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1 - p)
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


def maxpool_forward(x, window: int = 2):
    """Non-overlapping max over the last axis; a ragged tail is dropped."""
    bsz, c, t = x.shape
    if t < window:
        raise ValueError(f"sequence of length {t} shorter than pool window {window}")
    t_out = t // window
    xr = x[..., :t_out * window].reshape(bsz, c, t_out, window)
    idx = xr.argmax(axis=-1)  # first maximum on ties
    out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape, window)


def maxpool_backward(dout, cache):
    idx, shape, window = cache
    bsz, c, t = shape
    t_out = dout.shape[-1]
    dxr = np.zeros((bsz, c, t_out, window), dtype=dout.dtype)
    np.put_along_axis(dxr, idx[..., None], dout[..., None], axis=-1)
    dx = np.zeros(shape, dtype=dout.dtype)
    dx[..., :t_out * window] = dxr.reshape(bsz, c, t_out * window)
    return dx


def dense_forward(x, w, b):
    if x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"dense shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    return x @ w + b, (x, w)


def dense_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def attention_forward(locals_, w, b, u):
    """Additive single-query attention pooling.

    locals_: (B, T, C); w: (C, A); b: (A,); u: (A,).
    score_i = u . tanh(L_i W + b), alpha = softmax over T, V = sum_i alpha_i L_i.
    Returns (V of shape (B, C), alpha of shape (B, T)) and a cache.
    """
    h = np.tanh(locals_ @ w + b)
    scores = h @ u
    alpha = softmax(scores, axis=-1)
    v = np.einsum("bt,btc->bc", alpha, locals_)
    return (v, alpha), (locals_, w, u, h, alpha)


def attention_backward(dv, cache, dalpha_extra=None):
    locals_, w, u, h, alpha = cache
    dl = alpha[..., None] * dv[:, None, :]
    dalpha = np.einsum("btc,bc->bt", locals_, dv)
    if dalpha_extra is not None:
        dalpha = dalpha + dalpha_extra
    dscores = alpha * (dalpha - (dalpha * alpha).sum(axis=-1, keepdims=True))
    du = np.einsum("bta,bt->a", h, dscores)
    dz = dscores[..., None] * u * (1 - h * h)
    dw = np.einsum("btc,bta->ca", locals_, dz)
    db = dz.sum(axis=(0, 1))
    dl += dz @ w.T
    return dl, dw, db, du


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy over every (sample, class) cell, from logits.

    Returns ``(loss, dloss/dlogits)``.
    """
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("non-finite logits in loss")
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    grad = (sigmoid(z) - t) / z.size
    return float(loss.mean()), grad.astype(np.asarray(logits).dtype)


PROB_CLIP = 1e-7


def bce_loss(probs, targets):
    """Binary cross-entropy of sigmoid outputs, via the stable logit form.

    Probabilities are clipped to [1e-7, 1 - 1e-7]; the gradient returned is
    with respect to the pre-sigmoid logits: (p - t) / (B * classes).
    """
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_CLIP, 1 - PROB_CLIP)
    if not np.all(np.isfinite(p)):
        raise FloatingPointError("non-finite probabilities in loss")
    return bce_with_logits(np.log(p) - np.log1p(-p), targets)
