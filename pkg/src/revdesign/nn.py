"""Batched neural-net primitives with hand-written backward passes.

All functions take and return float64 arrays shaped (B, T, D) unless noted.
Forward functions return (output, cache); backward functions consume the
cache and return input gradients plus parameter gradients. Reductions
(softmax, layer norm, losses) therefore accumulate in 64-bit reals, which
keeps central-difference gradient checks meaningful.
"""

from __future__ import annotations

import numpy as np

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu_fwd(x: np.ndarray):
    """tanh-approximation GELU: 0.5*x*(1 + tanh(c*(x + a*x^3)));
    returns (y, tanh cache reused by the backward pass)."""
    t = np.tanh(_GELU_C * (x + _GELU_A * (x * x * x)))
    return 0.5 * x * (1.0 + t), t


def gelu(x: np.ndarray) -> np.ndarray:
    return gelu_fwd(x)[0]


def gelu_bwd(dy: np.ndarray, x: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    if t is None:
        t = np.tanh(_GELU_C * (x + _GELU_A * (x * x * x)))
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * (x * x))
    return dy * (0.5 * (1.0 + t) + 0.5 * x * dt)


def softmax(z: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis; -inf entries come out exactly 0."""
    m = np.max(z, axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def linear_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    return x @ w + b, (x, w)


def linear_bwd(dy: np.ndarray, cache):
    x, w = cache
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    dx = dy @ w.T
    return dx, dw, db


def layernorm_fwd(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv, g)


def layernorm_bwd(dy: np.ndarray, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    # dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def attention_fwd(x: np.ndarray, p: dict, prefix: str, n_heads: int, causal: bool):
    """Multi-head attention; p holds '<prefix>.wq/wk/wv/wo' and biases."""
    q, qc = linear_fwd(x, p[prefix + ".wq"], p[prefix + ".bq"])
    k, kc = linear_fwd(x, p[prefix + ".wk"], p[prefix + ".bk"])
    v, vc = linear_fwd(x, p[prefix + ".wv"], p[prefix + ".bv"])
    qh, kh, vh = (_split_heads(a, n_heads) for a in (q, k, v))
    dh = qh.shape[-1]
    scores = (qh @ kh.transpose(0, 1, 3, 2)) / np.sqrt(dh)
    if causal:
        t = x.shape[1]
        future = np.triu(np.ones((t, t), dtype=bool), k=1)
        scores = np.where(future, -np.inf, scores)
    att = softmax(scores)
    ctx = att @ vh
    merged = _merge_heads(ctx)
    y, oc = linear_fwd(merged, p[prefix + ".wo"], p[prefix + ".bo"])
    return y, (qc, kc, vc, oc, qh, kh, vh, att, dh)


def attention_bwd(dy: np.ndarray, cache, grads: dict, prefix: str):
    qc, kc, vc, oc, qh, kh, vh, att, dh = cache
    dmerged, dwo, dbo = linear_bwd(dy, oc)
    grads[prefix + ".wo"] += dwo
    grads[prefix + ".bo"] += dbo
    n_heads = att.shape[1]
    dctx = _split_heads(dmerged, n_heads)
    datt = dctx @ vh.transpose(0, 1, 3, 2)
    dvh = att.transpose(0, 1, 3, 2) @ dctx
    dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
    dscores /= np.sqrt(dh)
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 1, 3, 2) @ qh
    dx = np.zeros_like(qc[0])
    for dhh, lc, wname, bname in (
        (dqh, qc, ".wq", ".bq"),
        (dkh, kc, ".wk", ".bk"),
        (dvh, vc, ".wv", ".bv"),
    ):
        dxi, dw, db = linear_bwd(_merge_heads(dhh), lc)
        grads[prefix + wname] += dw
        grads[prefix + bname] += db
        dx += dxi
    return dx


def block_fwd(x: np.ndarray, p: dict, prefix: str, n_heads: int, causal: bool):
    """Pre-LN transformer block: x + attn(ln1(x)), then + mlp(ln2(.))."""
    h1, ln1c = layernorm_fwd(x, p[prefix + ".ln1.g"], p[prefix + ".ln1.b"])
    att, attc = attention_fwd(h1, p, prefix + ".attn", n_heads, causal)
    a = x + att
    h2, ln2c = layernorm_fwd(a, p[prefix + ".ln2.g"], p[prefix + ".ln2.b"])
    m1, m1c = linear_fwd(h2, p[prefix + ".mlp.w1"], p[prefix + ".mlp.b1"])
    act, gc = gelu_fwd(m1)
    m2, m2c = linear_fwd(act, p[prefix + ".mlp.w2"], p[prefix + ".mlp.b2"])
    y = a + m2
    return y, (ln1c, attc, ln2c, m1c, m1, gc, m2c)


def block_bwd(dy: np.ndarray, cache, grads: dict, prefix: str):
    ln1c, attc, ln2c, m1c, m1, gc, m2c = cache
    dact, dw2, db2 = linear_bwd(dy, m2c)
    grads[prefix + ".mlp.w2"] += dw2
    grads[prefix + ".mlp.b2"] += db2
    dm1 = gelu_bwd(dact, m1, gc)
    dh2, dw1, db1 = linear_bwd(dm1, m1c)
    grads[prefix + ".mlp.w1"] += dw1
    grads[prefix + ".mlp.b1"] += db1
    da, dg2, db2n = layernorm_bwd(dh2, ln2c)
    grads[prefix + ".ln2.g"] += dg2
    grads[prefix + ".ln2.b"] += db2n
    da = da + dy
    dh1 = attention_bwd(da, attc, grads, prefix + ".attn")
    dx, dg1, db1n = layernorm_bwd(dh1, ln1c)
    grads[prefix + ".ln1.g"] += dg1
    grads[prefix + ".ln1.b"] += db1n
    return dx + da
