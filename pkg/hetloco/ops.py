"""Forward/backward pairs for the fixed op set the model is built from.

Each ``*_forward`` returns ``(out, cache)``; the matching ``*_backward`` takes the
cache and the upstream gradient. Shapes follow the activation layout (b, L, d).
"""

from __future__ import annotations

import math

import numpy as np


def _flat(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


def linear_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of y = x @ w: (dx, dw)."""
    return dy @ w.T, _flat(x).T @ _flat(dy)


def rmsnorm_forward(x: np.ndarray, g: np.ndarray, eps: float):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * r * g, (x, r, g)


def rmsnorm_backward(cache, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x, r, g = cache
    dg = np.sum(_flat(dy * x * r), axis=0)
    dxhat = dy * g
    dx = r * dxhat - x * (r**3) * np.mean(dxhat * x, axis=-1, keepdims=True)
    return dx, dg


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, L, d = x.shape
    return x.reshape(b, L, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, L, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, L, h * dh)


def attention_forward(q: np.ndarray, k: np.ndarray, v: np.ndarray, n_heads: int):
    """Causal multi-head softmax attention (no projections)."""
    qh, kh, vh = (_split_heads(t, n_heads) for t in (q, k, v))
    L = q.shape[1]
    scale = 1.0 / math.sqrt(qh.shape[-1])
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    mask = np.tril(np.ones((L, L), dtype=bool))
    scores = np.where(mask, scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p = p / p.sum(axis=-1, keepdims=True)
    out = _merge_heads(p @ vh)
    return out, (qh, kh, vh, p, scale)


def attention_backward(cache, dout: np.ndarray):
    qh, kh, vh, p, scale = cache
    n_heads = qh.shape[1]
    doh = _split_heads(dout, n_heads)
    dp = doh @ vh.transpose(0, 1, 3, 2)
    dv = p.transpose(0, 1, 3, 2) @ doh
    ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
    dq = (ds @ kh) * scale
    dk = (ds.transpose(0, 1, 3, 2) @ qh) * scale
    return _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)


def swiglu_forward(a: np.ndarray, c: np.ndarray):
    """silu(a) * c"""
    sig = 0.5 * (1.0 + np.tanh(0.5 * a))
    s = a * sig
    return s * c, (a, c, sig, s)


def swiglu_backward(cache, dh: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, c, sig, s = cache
    ds = dh * c
    da = ds * (sig + a * sig * (1.0 - sig))
    return da, dh * s


def embedding_backward(table_shape, ids: np.ndarray, dx: np.ndarray) -> np.ndarray:
    dtable = np.zeros(table_shape, dtype=dx.dtype)
    # add.at accumulates repeated ids in index order
    np.add.at(dtable, ids.reshape(-1), _flat(dx))
    return dtable


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean next-token cross-entropy over all positions and its logits gradient."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logsum = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    logp = shifted - logsum
    flat_logp = _flat(logp)
    flat_t = targets.reshape(-1)
    n = flat_t.shape[0]
    loss = -float(np.mean(flat_logp[np.arange(n), flat_t]))
    grad = np.exp(flat_logp)
    grad[np.arange(n), flat_t] -= 1.0
    grad /= n
    return loss, grad.reshape(logits.shape).astype(logits.dtype, copy=False)
