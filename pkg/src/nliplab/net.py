"""Layer primitives with explicit backward passes.

Every forward returns (output, cache); the matching backward consumes the
cache plus the upstream gradient and accumulates parameter gradients into
a :class:`~nliplab.diffcore.ParamStore`. Arrays are batched (B, n, d) with
an optional boolean validity mask (B, n); gradients at invalid positions
stay exactly zero as long as no loss reads those positions.

Only the fixed model graphs in this package use these primitives; there is
no general tape.
"""

from __future__ import annotations

import numpy as np

from .diffcore import ParamStore

NORM_EPS = 1e-8


# ---------------------------------------------------------------------------
# linear / embedding

def linear_fwd(x: np.ndarray, store: ParamStore, w_name: str, b_name: str):
    y = x @ store.params[w_name] + store.params[b_name]
    return y, (x, w_name, b_name)


def linear_bwd(g: np.ndarray, cache, store: ParamStore) -> np.ndarray:
    x, w_name, b_name = cache
    w = store.params[w_name]
    axes = tuple(range(g.ndim - 1))
    store.accumulate(w_name, np.tensordot(x, g, axes=(axes, axes)))
    store.accumulate(b_name, g.sum(axis=axes))
    return g @ w.T


def embed_fwd(ids: np.ndarray, store: ParamStore, name: str):
    return store.params[name][ids], (ids, name)


def embed_bwd(g: np.ndarray, cache, store: ParamStore) -> None:
    ids, name = cache
    acc = np.zeros_like(store.params[name])
    np.add.at(acc, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
    store.accumulate(name, acc)


def rows_fwd(store: ParamStore, name: str, idx: np.ndarray):
    """Gather rows ``idx`` of a table parameter (positional embeddings)."""
    return store.params[name][idx], (idx, name)


def rows_bwd(g: np.ndarray, cache, store: ParamStore) -> None:
    idx, name = cache
    acc = np.zeros_like(store.params[name])
    np.add.at(acc, idx.reshape(-1), g.reshape(-1, g.shape[-1]))
    store.accumulate(name, acc)


# ---------------------------------------------------------------------------
# masked softmax

def masked_softmax_fwd(scores: np.ndarray, mask: np.ndarray | None):
    """Softmax over the last axis; False entries get probability 0.

    ``mask`` broadcasts against ``scores``; every row must keep at least
    one True entry.
    """
    if mask is None:
        shifted = scores - scores.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.broadcast_to(mask, scores.shape)
        neg = np.where(mask, scores, -np.inf)
        rowmax = neg.max(axis=-1, keepdims=True)
        e = np.exp(np.where(mask, scores - rowmax, -np.inf))
        e = np.where(mask, e, 0.0)
    p = e / e.sum(axis=-1, keepdims=True)
    return p, p


def masked_softmax_bwd(g: np.ndarray, p: np.ndarray) -> np.ndarray:
    inner = (g * p).sum(axis=-1, keepdims=True)
    return p * (g - inner)


# ---------------------------------------------------------------------------
# single-head attention (+ residual)

def attention_fwd(x_q: np.ndarray, x_kv: np.ndarray, store: ParamStore,
                  prefix: str, key_mask: np.ndarray | None = None,
                  causal: bool = False):
    """out = x_q + Wo(softmax(QK^T / sqrt(d)) V); single head.

    ``key_mask`` is (B, m) validity over the key/value sequence; ``causal``
    additionally forbids attending to later positions (requires n == m).
    """
    p = store.params
    q = x_q @ p[f"{prefix}.wq"] + p[f"{prefix}.q_bias"]
    k = x_kv @ p[f"{prefix}.wk"] + p[f"{prefix}.k_bias"]
    v = x_kv @ p[f"{prefix}.wv"] + p[f"{prefix}.v_bias"]
    d = q.shape[-1]
    scale = 1.0 / np.sqrt(d)
    scores = np.einsum("bnd,bmd->bnm", q, k) * scale
    mask = None
    if key_mask is not None:
        mask = key_mask[:, None, :]
    if causal:
        n, m = scores.shape[-2], scores.shape[-1]
        tri = np.tril(np.ones((n, m), dtype=bool))
        mask = tri[None] if mask is None else mask & tri[None]
    probs, sm_cache = masked_softmax_fwd(scores, mask)
    ctx = np.einsum("bnm,bmd->bnd", probs, v)
    out = ctx @ p[f"{prefix}.wo"] + p[f"{prefix}.o_bias"]
    cache = (x_q, x_kv, q, k, v, probs, ctx, scale, prefix, sm_cache)
    return x_q + out, cache


def attention_bwd(g: np.ndarray, cache, store: ParamStore):
    """Returns (dx_q, dx_kv); the residual path is included in dx_q."""
    x_q, x_kv, q, k, v, probs, ctx, scale, prefix, sm_cache = cache
    p = store.params
    axes = tuple(range(g.ndim - 1))

    d_out = g
    store.accumulate(f"{prefix}.wo", np.tensordot(ctx, d_out, axes=(axes, axes)))
    store.accumulate(f"{prefix}.o_bias", d_out.sum(axis=axes))
    d_ctx = d_out @ p[f"{prefix}.wo"].T

    d_probs = np.einsum("bnd,bmd->bnm", d_ctx, v)
    d_v = np.einsum("bnm,bnd->bmd", probs, d_ctx)
    d_scores = masked_softmax_bwd(d_probs, sm_cache) * scale
    d_q = np.einsum("bnm,bmd->bnd", d_scores, k)
    d_k = np.einsum("bnm,bnd->bmd", d_scores, q)

    store.accumulate(f"{prefix}.wq", np.tensordot(x_q, d_q, axes=(axes, axes)))
    store.accumulate(f"{prefix}.q_bias", d_q.sum(axis=axes))
    store.accumulate(f"{prefix}.wk", np.tensordot(x_kv, d_k, axes=(axes, axes)))
    store.accumulate(f"{prefix}.k_bias", d_k.sum(axis=axes))
    store.accumulate(f"{prefix}.wv", np.tensordot(x_kv, d_v, axes=(axes, axes)))
    store.accumulate(f"{prefix}.v_bias", d_v.sum(axis=axes))

    dx_q = g + d_q @ p[f"{prefix}.wq"].T
    dx_kv = d_k @ p[f"{prefix}.wk"].T + d_v @ p[f"{prefix}.wv"].T
    return dx_q, dx_kv


# ---------------------------------------------------------------------------
# tanh MLP (+ residual)

def mlp_fwd(x: np.ndarray, store: ParamStore, prefix: str):
    p = store.params
    pre = x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1_bias"]
    h = np.tanh(pre)
    out = h @ p[f"{prefix}.w2"] + p[f"{prefix}.b2_bias"]
    return x + out, (x, h, prefix)


def mlp_bwd(g: np.ndarray, cache, store: ParamStore) -> np.ndarray:
    x, h, prefix = cache
    p = store.params
    axes = tuple(range(g.ndim - 1))
    store.accumulate(f"{prefix}.w2", np.tensordot(h, g, axes=(axes, axes)))
    store.accumulate(f"{prefix}.b2_bias", g.sum(axis=axes))
    dh = g @ p[f"{prefix}.w2"].T
    dpre = dh * (1.0 - h * h)
    store.accumulate(f"{prefix}.w1", np.tensordot(x, dpre, axes=(axes, axes)))
    store.accumulate(f"{prefix}.b1_bias", dpre.sum(axis=axes))
    return g + dpre @ p[f"{prefix}.w1"].T


# ---------------------------------------------------------------------------
# L2 normalization (rows)

def l2norm_fwd(x: np.ndarray):
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    y = x / (norm + NORM_EPS)
    return y, (x, norm)


def l2norm_bwd(g: np.ndarray, cache) -> np.ndarray:
    x, norm = cache
    denom = norm + NORM_EPS
    inner = (x * g).sum(axis=-1, keepdims=True)
    return g / denom - x * inner / (norm * denom * denom)


# ---------------------------------------------------------------------------
# softmax cross-entropy over a vocabulary

def cross_entropy_fwd(logits: np.ndarray, targets: np.ndarray,
                      valid: np.ndarray):
    """Mean negative log-likelihood over ``valid`` positions.

    logits: (..., V); targets: integer ids (...); valid: boolean (...).
    Returns (loss, per_position_nll, cache).
    """
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    nll = np.where(valid, nll, 0.0)
    count = int(valid.sum())
    loss = float(nll.sum() / count) if count else 0.0
    cache = (logp, targets, valid, count)
    return loss, nll, cache


def cross_entropy_bwd(cache) -> np.ndarray:
    """d(loss)/d(logits) for an upstream gradient of 1."""
    logp, targets, valid, count = cache
    if count == 0:
        return np.zeros_like(logp)
    g = np.exp(logp)
    np.subtract.at(g, (*np.indices(targets.shape), targets), 1.0)
    g *= valid[..., None] / count
    return g
