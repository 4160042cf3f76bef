"""Evolving attention: raw logit generation, cross-layer residual evolution
of the logit maps through a masked 2-D convolution, and value projection.

Logits flow between blocks as an (B, K, N, N) tensor; the layer's own scaled
dot-product scores are blended with the inherited map (weight alpha), pushed
through the convolution (weight beta), and only then softmaxed. Causal or
padding masks never store an -inf sentinel in the logits: invalid positions
are zeroed ahead of the convolution and re-masked inside the softmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor import Tensor


@dataclass
class AttentionLogits:
    """Pre-softmax attention scores of one layer, shape (B, K, N, N)."""

    values: Tensor
    layer_index: int = 1

    @property
    def shape(self):
        return self.values.shape


@dataclass
class AttentionHeadParams:
    """Projections for K heads: queries/keys/values stored head-concatenated
    as (d_in, K*d_h) matrices, plus the output projection (K*d_h, d_out)."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    n_heads: int
    relative: kernels.PositionalEncoding | None = None

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[1] // self.n_heads

    def __post_init__(self):
        width = self.w_q.shape[1]
        if width % self.n_heads != 0:
            raise ValueError(f"attention width {width} not divisible by {self.n_heads} heads")


@dataclass
class EvolveParams:
    """Blend weights of the residual evolution step, Conv optional at beta=0."""

    alpha: float
    beta: float
    conv: kernels.Conv2dMapParams | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.beta > 0.0 and self.conv is None:
            raise ValueError("beta > 0 requires convolution parameters")


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(B, N, K*d_h) -> (B, K, N, d_h)."""
    b, n, width = x.shape
    d_h = width // n_heads
    return x.reshape(b, n, n_heads, d_h).transpose((0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """(B, K, N, d_h) -> (B, N, K*d_h)."""
    b, k, n, d_h = x.shape
    return x.transpose((0, 2, 1, 3)).reshape(b, n, k * d_h)


def raw_logits(x: Tensor, params: AttentionHeadParams) -> AttentionLogits:
    """Per-head scaled dot-product scores before softmax, plus the optional
    query-relative position term."""
    q = split_heads(x @ params.w_q, params.n_heads)
    k = split_heads(x @ params.w_k, params.n_heads)
    scores = (q @ k.swaplast()) * (1.0 / math.sqrt(params.head_dim))
    if params.relative is not None:
        scores = scores + kernels.relative_logits_1d(q, params.relative)
    return AttentionLogits(scores, layer_index=1)


def evolve(prev: AttentionLogits | None, raw: AttentionLogits,
           params: EvolveParams, valid: np.ndarray | None = None) -> AttentionLogits:
    """Blend the inherited logit map into the current one and convolve.

    combined = alpha * prev + (1 - alpha) * raw (first layer: raw alone);
    result = beta * conv(combined) + (1 - beta) * combined. When a validity
    mask is given, masked positions are zeroed before the convolution so the
    kernel never reads scores of forbidden positions.
    """
    if prev is not None and prev.shape != raw.shape:
        raise ValueError(f"logit shapes disagree: {prev.shape} vs {raw.shape}")
    if prev is None or params.alpha == 0.0:
        combined = raw.values
    else:
        combined = params.alpha * prev.values + (1.0 - params.alpha) * raw.values
    layer = 1 if prev is None else prev.layer_index + 1
    if params.beta == 0.0:
        return AttentionLogits(combined, layer_index=layer)
    conv_in = combined
    if valid is not None:
        keep = np.broadcast_to(np.asarray(valid, dtype=np.float64),
                               combined.shape).copy()
        conv_in = combined * Tensor(keep)
    evolved = params.beta * kernels.conv2d_maps(conv_in, params.conv) \
        + (1.0 - params.beta) * combined
    return AttentionLogits(evolved, layer_index=layer)


def attention_apply(logits: AttentionLogits, x: Tensor, params: AttentionHeadParams,
                    valid: np.ndarray | None = None, dropout_rate: float = 0.0,
                    rng: np.random.Generator | None = None,
                    training: bool = False) -> Tensor:
    """Softmax the logits (with masking), project values per head, concatenate
    the head outputs and apply the output projection."""
    b, k, n, _ = logits.shape
    if x.shape[1] != n:
        raise ValueError(f"logits cover {n} positions but input has {x.shape[1]}")
    probs = kernels.softmax_masked(logits.values, valid)
    probs = kernels.dropout(probs, dropout_rate, rng, training)
    v = split_heads(x @ params.w_v, params.n_heads)
    heads = probs @ v
    return merge_heads(heads) @ params.w_o
