"""Single-head scaled dot-product attention with an explicit backward pass.

Arrays carry an optional leading batch axis: queries ``(..., P, D)``, keys/values
``(..., W, D)``.  Weight gradients are summed over every batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class AttentionError(ValueError):
    pass


@dataclass
class AttentionParams:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class AttentionCache:
    xq: np.ndarray
    xkv: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray
    params: AttentionParams
    shared_kv: bool


def attend(xq: np.ndarray, xkv: np.ndarray, params: AttentionParams):
    """``softmax(Q K^T / sqrt(D)) V`` without residual; returns ``(out, cache)``."""
    if xkv.shape[-2] == 0:
        raise AttentionError("attention needs at least one key token")
    d = xq.shape[-1]
    if xkv.shape[-1] != d or params.W_Q.shape != (d, d):
        raise AttentionError("feature dimensions disagree")
    shared = xkv.ndim < xq.ndim
    q = xq @ params.W_Q
    k = xkv @ params.W_K
    v = xkv @ params.W_V
    attn = softmax(q @ np.swapaxes(k, -1, -2) / np.sqrt(d))
    out = attn @ v
    return out, AttentionCache(xq, xkv, q, k, v, attn, params, shared)


def attend_backward(cache: AttentionCache, dout: np.ndarray):
    """Gradients ``(dxq, dxkv, dW_Q, dW_K, dW_V)`` for upstream ``dout``."""
    if dout.shape != cache.q.shape:
        raise AttentionError("upstream gradient does not match the cached forward")
    d = cache.xq.shape[-1]
    scale = 1.0 / np.sqrt(d)
    a = cache.attn
    da = dout @ np.swapaxes(cache.v, -1, -2)
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
    dq = ds @ cache.k
    dk = np.swapaxes(ds, -1, -2) @ cache.q
    dv = np.swapaxes(a, -1, -2) @ dout
    p = cache.params
    dxq = dq @ p.W_Q.T
    dxkv = dk @ p.W_K.T + dv @ p.W_V.T
    xq2 = cache.xq.reshape(-1, d)
    dW_Q = xq2.T @ dq.reshape(-1, d)
    if cache.shared_kv:
        # keys/values broadcast over the query batch
        dk_sum = dk.reshape((-1,) + dk.shape[-2:]).sum(axis=0)
        dv_sum = dv.reshape((-1,) + dv.shape[-2:]).sum(axis=0)
        dW_K = cache.xkv.T @ dk_sum
        dW_V = cache.xkv.T @ dv_sum
        dxkv = dxkv.reshape((-1,) + dxkv.shape[-2:]).sum(axis=0)
    else:
        xkv2 = cache.xkv.reshape(-1, d)
        dW_K = xkv2.T @ dk.reshape(-1, d)
        dW_V = xkv2.T @ dv.reshape(-1, d)
    return dxq, dxkv, dW_Q, dW_K, dW_V


def cross_attention_forward(F_vis: np.ndarray, F_lang: np.ndarray, params: AttentionParams):
    """Language cross-attention added back through a residual: ``F_vis + softmax(.)V``."""
    if F_lang.ndim != 2 or F_lang.shape[0] == 0:
        raise AttentionError("need at least one language token")
    out, cache = attend(F_vis, F_lang, params)
    return F_vis + out, cache


def cross_attention_backward(cache: AttentionCache, upstream: np.ndarray):
    """Returns ``(dF_vis, dW_Q, dW_K, dW_V)``; the language features are frozen."""
    dxq, _dlang, dW_Q, dW_K, dW_V = attend_backward(cache, upstream)
    return upstream + dxq, dW_Q, dW_K, dW_V


def self_attention_forward(x: np.ndarray, params: AttentionParams):
    out, cache = attend(x, x, params)
    return x + out, cache


def self_attention_backward(cache: AttentionCache, upstream: np.ndarray):
    dxq, dxkv, dW_Q, dW_K, dW_V = attend_backward(cache, upstream)
    return upstream + dxq + dxkv, dW_Q, dW_K, dW_V
