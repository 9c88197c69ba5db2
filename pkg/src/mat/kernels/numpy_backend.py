"""Vectorized numpy implementation of the hot kernels.

This is the fallback backend and the reference the compiled core is checked
against. All functions take C-contiguous float32 or float64 arrays and a
boolean mask with True marking allowed positions. Callers guarantee that
every row has at least one allowed position; the kernels do not re-check.
"""

import numpy as np


def _split_heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    """(T, D) -> (h, T, D/h)."""
    t, d = x.shape
    return x.reshape(t, num_heads, d // num_heads).transpose(1, 0, 2)


def _merge_heads(x3: np.ndarray) -> np.ndarray:
    """(h, T, D/h) -> contiguous (T, D)."""
    h, t, dh = x3.shape
    return np.ascontiguousarray(x3.transpose(1, 0, 2).reshape(t, h * dh))


def _topk_keep(scores: np.ndarray, mask: np.ndarray, top_k: int) -> np.ndarray:
    """Per-row keep mask for the top_k largest allowed logits.

    Ties keep the lower key index. Rows where top_k >= number of allowed
    keys come back identical to `mask`, so the dense path is reproduced
    bit-for-bit.
    """
    tk = scores.shape[-1]
    # Allowed positions sort first (descending score, ties by index).
    sort_keys = np.where(mask, -scores, np.inf)
    order = np.argsort(sort_keys, axis=-1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(tk), axis=-1)
    return mask & (ranks < top_k)


def sdpa_forward(q, k, v, num_heads, scale, mask, top_k):
    """Multi-head scaled dot-product attention.

    q: (Tq, D); k, v: (Tk, D); mask: (Tq, Tk) bool; top_k: 0 disables.
    Returns (out (Tq, D), weights (h, Tq, Tk)).
    """
    scale = q.dtype.type(scale)
    q3 = _split_heads(q, num_heads)
    k3 = _split_heads(k, num_heads)
    v3 = _split_heads(v, num_heads)
    scores = np.matmul(q3, k3.transpose(0, 2, 1))
    scores *= scale
    allowed = np.broadcast_to(mask, scores.shape)
    if top_k > 0:
        allowed = _topk_keep(scores, allowed, top_k)
    masked = np.where(allowed, scores, -np.inf)
    masked -= masked.max(axis=-1, keepdims=True)
    weights = np.exp(masked)
    weights /= weights.sum(axis=-1, keepdims=True)
    out = np.matmul(weights, v3)
    return _merge_heads(out), weights


def sdpa_backward(q, k, v, num_heads, scale, weights, d_out):
    """Gradients of sdpa_forward w.r.t. q, k, v.

    Masked / dropped positions carry zero weight, which zeroes their score
    gradient automatically.
    """
    scale = q.dtype.type(scale)
    q3 = _split_heads(q, num_heads)
    k3 = _split_heads(k, num_heads)
    v3 = _split_heads(v, num_heads)
    do3 = _split_heads(d_out, num_heads)
    d_weights = np.matmul(do3, v3.transpose(0, 2, 1))
    inner = (d_weights * weights).sum(axis=-1, keepdims=True)
    d_scores = weights * (d_weights - inner)
    dq = np.matmul(d_scores, k3) * scale
    dk = np.matmul(d_scores.transpose(0, 2, 1), q3) * scale
    dv = np.matmul(weights.transpose(0, 2, 1), do3)
    return _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)


def layer_norm_forward(x, gamma, beta, eps):
    """Row-wise layer norm. Returns (y, mean, rstd) with (T,) statistics."""
    eps = x.dtype.type(eps)
    mean = x.mean(axis=-1)
    var = x.var(axis=-1)
    rstd = 1.0 / np.sqrt(var + eps)
    rstd = rstd.astype(x.dtype, copy=False)
    y = (x - mean[:, None]) * rstd[:, None] * gamma + beta
    return y, mean, rstd


def layer_norm_backward(x, gamma, mean, rstd, dy):
    """Gradients of layer_norm_forward w.r.t. x, gamma, beta."""
    xhat = (x - mean[:, None]) * rstd[:, None]
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dyg = dy * gamma
    dx = rstd[:, None] * (
        dyg - dyg.mean(axis=-1, keepdims=True) - xhat * (dyg * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def softmax_rows_forward(x, mask):
    """Row softmax with masked positions exactly zero. x, mask: (R, N)."""
    masked = np.where(mask, x, -np.inf)
    masked = masked - masked.max(axis=-1, keepdims=True)
    y = np.exp(masked)
    y /= y.sum(axis=-1, keepdims=True)
    return y


def softmax_rows_backward(y, dy):
    """Gradient of softmax_rows_forward w.r.t. its logits."""
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))
