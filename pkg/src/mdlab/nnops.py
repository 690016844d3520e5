"""Neural net building blocks in float64 numpy with hand-written backward passes.

Every op comes as a forward returning (output, cache) and a backward taking
(grad_out, cache). Leading dimensions broadcast: ops accept (..., D) or
(..., S, D) arrays, so the same code serves the sequence backbone and the
candidate-set scorer. Parameters live in flat dicts keyed by dotted block
names; gradients mirror those keys.

The feed-forward activation is the tanh approximation of GELU. It is smooth,
which keeps central finite differences at step 1e-5 faithful to the analytic
gradients; a kinked activation would poison those checks.
"""

from __future__ import annotations

import numpy as np

LN_EPS = 1e-5
_GELU_C = 0.7978845608028654  # sqrt(2 / pi)
_GELU_A = 0.044715


# ---------------------------------------------------------------------------
# elementary ops


def linear_fwd(x, w, b):
    return x @ w + b, (x, w)


def linear_bwd(dout, cache):
    x, w = cache
    dx = dout @ w.T
    dout2 = dout.reshape(-1, dout.shape[-1])
    dw = x.reshape(-1, x.shape[-1]).T @ dout2
    db = dout2.sum(axis=0)
    return dx, dw, db


def embed_fwd(ids, table):
    return table[ids], (ids, table.shape)


def embed_bwd(dout, cache):
    ids, shape = cache
    dtable = np.zeros(shape, dtype=dout.dtype)
    np.add.at(dtable, ids.reshape(-1), dout.reshape(-1, shape[1]))
    return dtable


def layernorm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return g * xhat + b, (xhat, inv, g)


def layernorm_bwd(dout, cache):
    xhat, inv, g = cache
    dg = (dout * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dout.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dout * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def gelu_fwd(x):
    u = _GELU_C * (x + _GELU_A * x**3)
    th = np.tanh(u)
    return 0.5 * x * (1.0 + th), (x, th)


def gelu_bwd(dout, cache):
    x, th = cache
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
    return dout * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * du)


def softmax_last(x):
    """Numerically stable softmax over the last axis; -inf entries map to 0."""
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_bwd(dout, p):
    inner = (dout * p).sum(axis=-1, keepdims=True)
    return p * (dout - inner)


def dropout_mask(shape, rate, rng):
    """Inverted-dropout multiplier: 0 with probability rate, else 1/(1-rate)."""
    keep = rng.random(shape) >= rate
    return keep.astype(np.float64) / (1.0 - rate)


# ---------------------------------------------------------------------------
# multi-head self-attention (bidirectional, no masking)


def _split_heads(x, nheads):
    *lead, s, d = x.shape
    dh = d // nheads
    return x.reshape(*lead, s, nheads, dh).swapaxes(-2, -3)  # (..., H, S, dh)


def _merge_heads(x):
    *lead, h, s, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, s, h * dh)


def mha_fwd(x, p, prefix, nheads):
    """Self-attention over the last-but-one axis. Params under ``prefix``:
    wq bq wk bk wv bv wo bo. Returns (out, cache)."""
    q, cq = linear_fwd(x, p[prefix + "wq"], p[prefix + "bq"])
    k, ck = linear_fwd(x, p[prefix + "wk"], p[prefix + "bk"])
    v, cv = linear_fwd(x, p[prefix + "wv"], p[prefix + "bv"])
    qh, kh, vh = (_split_heads(a, nheads) for a in (q, k, v))
    scale = 1.0 / np.sqrt(qh.shape[-1])
    scores = (qh @ kh.swapaxes(-1, -2)) * scale
    attn = softmax_last(scores)
    ctx = attn @ vh
    merged = _merge_heads(ctx)
    out, co = linear_fwd(merged, p[prefix + "wo"], p[prefix + "bo"])
    return out, (cq, ck, cv, co, qh, kh, vh, attn, scale, nheads)


def mha_bwd(dout, cache, prefix):
    cq, ck, cv, co, qh, kh, vh, attn, scale, nheads = cache
    dmerged, dwo, dbo = linear_bwd(dout, co)
    dctx = _split_heads(dmerged, nheads)
    dattn = dctx @ vh.swapaxes(-1, -2)
    dvh = attn.swapaxes(-1, -2) @ dctx
    dscores = _softmax_bwd(dattn, attn) * scale
    dqh = dscores @ kh
    dkh = dscores.swapaxes(-1, -2) @ qh
    dq, dk, dv = (_merge_heads(a) for a in (dqh, dkh, dvh))
    dx_q, dwq, dbq = linear_bwd(dq, cq)
    dx_k, dwk, dbk = linear_bwd(dk, ck)
    dx_v, dwv, dbv = linear_bwd(dv, cv)
    grads = {
        prefix + "wq": dwq, prefix + "bq": dbq,
        prefix + "wk": dwk, prefix + "bk": dbk,
        prefix + "wv": dwv, prefix + "bv": dbv,
        prefix + "wo": dwo, prefix + "bo": dbo,
    }
    return dx_q + dx_k + dx_v, grads


# ---------------------------------------------------------------------------
# pre-LN transformer encoder stack


def encoder_stack_fwd(x, p, n_layers, nheads, layer_prefix="layer{i}.", drop_masks=None):
    """Pre-LN encoder: x += MHA(LN(x)); x += FFN(LN(x)), repeated.

    ``drop_masks`` optionally carries one (att_mask, ffn_mask) pair per layer
    of precomputed inverted-dropout multipliers applied to each residual
    branch output; None disables dropout (evaluation mode).
    """
    caches = []
    for i in range(n_layers):
        pre = layer_prefix.format(i=i)
        h, c_ln1 = layernorm_fwd(x, p[pre + "att.ln.g"], p[pre + "att.ln.b"])
        a, c_mha = mha_fwd(h, p, pre + "att.", nheads)
        m_att = None if drop_masks is None else drop_masks[i][0]
        if m_att is not None:
            a = a * m_att
        x = x + a
        h2, c_ln2 = layernorm_fwd(x, p[pre + "ffn.ln.g"], p[pre + "ffn.ln.b"])
        f1, c_l1 = linear_fwd(h2, p[pre + "ffn.w1"], p[pre + "ffn.b1"])
        g, c_g = gelu_fwd(f1)
        f2, c_l2 = linear_fwd(g, p[pre + "ffn.w2"], p[pre + "ffn.b2"])
        m_ffn = None if drop_masks is None else drop_masks[i][1]
        if m_ffn is not None:
            f2 = f2 * m_ffn
        x = x + f2
        caches.append((c_ln1, c_mha, c_ln2, c_l1, c_g, c_l2, m_att, m_ffn))
    return x, caches


def encoder_stack_bwd(dout, caches, p, n_layers, nheads, layer_prefix="layer{i}."):
    grads: dict[str, np.ndarray] = {}
    dx = dout
    for i in reversed(range(n_layers)):
        pre = layer_prefix.format(i=i)
        c_ln1, c_mha, c_ln2, c_l1, c_g, c_l2, m_att, m_ffn = caches[i]
        df2 = dx if m_ffn is None else dx * m_ffn
        dg, dw2, db2 = linear_bwd(df2, c_l2)
        df1 = gelu_bwd(dg, c_g)
        dh2, dw1, db1 = linear_bwd(df1, c_l1)
        dx_ln2, dg2, db_ln2 = layernorm_bwd(dh2, c_ln2)
        dx = dx + dx_ln2
        grads[pre + "ffn.w1"] = dw1
        grads[pre + "ffn.b1"] = db1
        grads[pre + "ffn.w2"] = dw2
        grads[pre + "ffn.b2"] = db2
        grads[pre + "ffn.ln.g"] = dg2
        grads[pre + "ffn.ln.b"] = db_ln2
        da = dx if m_att is None else dx * m_att
        dh, mha_grads = mha_bwd(da, c_mha, pre + "att.")
        grads.update(mha_grads)
        dx_ln1, dg1, db_ln1 = layernorm_bwd(dh, c_ln1)
        dx = dx + dx_ln1
        grads[pre + "att.ln.g"] = dg1
        grads[pre + "att.ln.b"] = db_ln1
    return dx, grads


# ---------------------------------------------------------------------------
# losses


def weighted_ce_from_logits(logits, targets, weights):
    """Weighted cross entropy with fused gradient.

    logits: (..., V), targets: (...) int, weights: (...) float with zeros at
    positions that should not contribute. Returns (loss, dlogits). Entries of
    logits may be -inf (excluded classes); those receive zero probability and
    zero gradient.
    """
    m = np.max(logits, axis=-1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=-1, keepdims=True)
    logp = logits - m - np.log(z)
    probs = e / z
    tgt_logp = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = float(-(weights * tgt_logp).sum())
    dlogits = probs * weights[..., None]
    np.put_along_axis(
        dlogits,
        targets[..., None],
        np.take_along_axis(dlogits, targets[..., None], axis=-1) - weights[..., None],
        axis=-1,
    )
    return loss, dlogits


def bce_from_logits(logits, targets):
    """Elementwise binary cross entropy on raw scores.

    Returns (per-element losses, per-element dloss/dlogit). The
    log(1 + exp(-|x|)) formulation is stable in both tails.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    losses = np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    return losses, sigmoid(logits) - targets


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -500, 500)))
