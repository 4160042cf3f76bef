"""Standalone numpy forward passes used as independent oracles.

These re-implement the degenerate architectures (plain transformer stack;
dilated-convolution + feed-forward stack) directly on numpy arrays, without
touching the autodiff tensor machinery, so the equivalence checks compare two
genuinely different code paths. Weights are read from a built model.
"""

from __future__ import annotations

import numpy as np

from .model import Model


def _softmax_last(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    xhat = centered / np.sqrt(var + eps)
    return gamma * xhat + beta


def _ffn(x: np.ndarray, w1, b1, w2, b2) -> np.ndarray:
    return np.maximum(x @ w1 + b1, 0.0) @ w2 + b2


def _embed(x: np.ndarray, model: Model) -> np.ndarray:
    h = x @ model.embed_w.data + model.embed_b.data
    if model.pos is not None and model.pos.kind != "relative_1d":
        h = h + model.pos.table.data[:x.shape[1]]
    return h


def vanilla_transformer_forward(x: np.ndarray, model: Model) -> np.ndarray:
    """Plain post-norm transformer encoder stack (no logit evolution), using
    the model's projection/FFN/norm weights. Evaluation mode, full-length
    series, bidirectional attention."""
    h = _embed(np.asarray(x, dtype=np.float64), model)
    for blk in model.blocks:
        b, n, _ = h.shape
        k = blk.attn.n_heads
        d_h = blk.attn.head_dim

        def heads(w):
            return (h @ w.data).reshape(b, n, k, d_h).transpose(0, 2, 1, 3)

        q, kk, v = heads(blk.attn.w_q), heads(blk.attn.w_k), heads(blk.attn.w_v)
        scores = (q @ kk.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d_h))
        probs = _softmax_last(scores)
        out = (probs @ v).transpose(0, 2, 1, 3).reshape(b, n, k * d_h)
        out = out @ blk.attn.w_o.data
        y1 = _layer_norm(h + out, blk.ln1_gamma.data, blk.ln1_beta.data)
        ff = _ffn(y1, blk.ffn.w1.data, blk.ffn.b1.data, blk.ffn.w2.data, blk.ffn.b2.data)
        h = _layer_norm(y1 + ff, blk.ln2_gamma.data, blk.ln2_beta.data)
    return h


def dilated_ffn_forward(x: np.ndarray, model: Model) -> np.ndarray:
    """Pure dilated-convolution stack (the attention-free degenerate case):
    per block, a causal dilated convolution tower followed by the residual
    feed-forward sub-layer. Evaluation mode."""
    h = _embed(np.asarray(x, dtype=np.float64), model)
    for blk in model.blocks:
        d = h
        depth = blk.dilated.depth
        for layer in range(depth):
            w = blk.dilated.weights[layer].data
            bias = blk.dilated.biases[layer].data
            s = 1 << layer
            pre = np.zeros(d.shape[:2] + (w.shape[0],), dtype=np.float64) + bias
            t = d.shape[1]
            for k in range(3):
                off = (-2 + k) * s
                shifted = np.zeros_like(d)
                t0, t1 = max(0, -off), min(t, t - off)
                if t0 < t1:
                    shifted[:, t0:t1] = d[:, t0 + off:t1 + off]
                pre += shifted @ w[:, :, k].T
            d = np.maximum(pre, 0.0) if layer < depth - 1 else pre
        y1 = _layer_norm(h + d, blk.ln1_gamma.data, blk.ln1_beta.data)
        ff = _ffn(y1, blk.ffn.w1.data, blk.ffn.b1.data, blk.ffn.w2.data, blk.ffn.b2.data)
        h = _layer_norm(y1 + ff, blk.ln2_gamma.data, blk.ln2_beta.data)
    return h
