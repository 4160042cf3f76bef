"""Neural building blocks on top of the autodiff tensor core.

Includes masked softmax, linear/layer-norm/dropout, the 3x3 convolution over
per-head attention maps (with the encoder / decoder-self / encoder-decoder
masking variants), the causal dilated 1-D convolution stack, and positional
encodings. All backward rules here are hand-written; each one is covered by a
finite-difference gradient check in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, accumulate, record, relu

ENCODER = "encoder"
DECODER_SELF = "decoder_self"
ENCODER_DECODER = "encoder_decoder"
MASK_KINDS = (ENCODER, DECODER_SELF, ENCODER_DECODER)

# Kernel tap layout: index (kr, kc) in 0..2 maps to spatial offset
# (kr - 1, kc - 1). The decoder-self variant keeps only taps whose row offset
# is >= the column offset (6 of 9) and evaluates the window one pixel up-left
# of the output position, so output (i, j) never reads rows > i or cols > j.
_ALL_TAPS = tuple((kr, kc) for kr in range(3) for kc in range(3))
DECODER_SELF_TAPS = tuple((kr, kc) for kr, kc in _ALL_TAPS if kr - 1 >= kc - 1)

# (row, col) shift of the evaluation window relative to the output position.
_WINDOW_SHIFT = {ENCODER: (0, 0), DECODER_SELF: (-1, -1), ENCODER_DECODER: (0, -1)}


def active_taps(mask_kind: str) -> tuple[tuple[int, int], ...]:
    if mask_kind == DECODER_SELF:
        return DECODER_SELF_TAPS
    return _ALL_TAPS


def structural_tap_mask(mask_kind: str) -> np.ndarray:
    """(3, 3) boolean grid of the taps an instance of this kind may use."""
    mask = np.zeros((3, 3), dtype=bool)
    for kr, kc in active_taps(mask_kind):
        mask[kr, kc] = True
    return mask


@dataclass
class Conv2dMapParams:
    """3x3 convolution over (B, K, N, N) attention-logit maps, K -> K channels."""

    kernel: Tensor  # (K, K, 3, 3); decoder-self keeps masked taps pinned at 0
    bias: Tensor  # (K,)
    mask_kind: str = ENCODER

    def __post_init__(self):
        if self.mask_kind not in MASK_KINDS:
            raise ValueError(f"unknown conv mask kind: {self.mask_kind!r}")
        if self.kernel.shape[-2:] != (3, 3):
            raise ValueError(f"conv kernel must be 3x3, got {self.kernel.shape[-2:]}")
        if self.kernel.shape[0] != self.kernel.shape[1]:
            raise ValueError("attention-map conv must map K channels to K channels")


@dataclass
class DilatedConvParams:
    """Stack of causal width-3 1-D convolutions with doubling dilations."""

    weights: list[Tensor]  # layer l: (d_out_l, d_in_l, 3)
    biases: list[Tensor]  # layer l: (d_out_l,)

    @property
    def depth(self) -> int:
        return len(self.weights)

    def dilation(self, layer: int) -> int:
        return 1 << layer  # layer 0 -> 1, layer 1 -> 2, ...


@dataclass
class PositionalEncoding:
    """Position information for the encoder input or the attention logits.

    kind 'learned_absolute': trainable (max_len, d) table added to embeddings.
    kind 'sinusoidal': fixed sin/cos table added to embeddings.
    kind 'relative_1d': trainable (2*max_rel_dist+1, d_head) table producing
    per-head query-relative logits; applied inside attention, not on input.
    """

    kind: str
    table: Tensor
    max_rel_dist: int = 0

    KINDS = ("learned_absolute", "sinusoidal", "relative_1d")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown positional encoding kind: {self.kind!r}")


def sinusoidal_table(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    dim = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(dim / 2.0) / d)
    table = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return table


def softmax_masked(logits: Tensor, valid: np.ndarray | None = None) -> Tensor:
    """Row softmax over the last axis; positions where ``valid`` is False get
    exactly zero probability. Raises on a fully-masked row."""
    z = logits.data
    if valid is None:
        shifted = z - z.max(axis=-1, keepdims=True)
    else:
        valid = np.broadcast_to(np.asarray(valid, dtype=bool), z.shape)
        if not valid.any(axis=-1).all():
            raise ValueError("softmax_masked: some row has no valid entries")
        masked = np.where(valid, z, -np.inf)
        shifted = masked - masked.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        inner = (g * probs).sum(axis=-1, keepdims=True)
        accumulate(logits, probs * (g - inner))

    return record(probs, (logits,), grad_fn)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b over the last axis."""
    out = x @ w
    if b is not None:
        out = out + b
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if x.shape[-1] < 2:
        raise ValueError("layer_norm needs a last dimension of at least 2")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = gamma.data * xhat + beta.data

    def grad_fn(g):
        reduce_axes = tuple(range(g.ndim - 1))
        accumulate(gamma, (g * xhat).sum(axis=reduce_axes))
        accumulate(beta, g.sum(axis=reduce_axes))
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        accumulate(x, inv * (dxhat - m1 - xhat * m2))

    return record(out, (x, gamma, beta), grad_fn)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None,
            training: bool) -> Tensor:
    """Inverted dropout: zero with probability ``rate`` and rescale by
    1/(1-rate) during training; identity in evaluation mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    keep = (rng.random(x.shape) >= rate)
    factor = keep / (1.0 - rate)
    out = x.data * factor

    def grad_fn(g):
        accumulate(x, g * factor)

    return record(out, (x,), grad_fn)


def conv2d_maps(a: Tensor, params: Conv2dMapParams) -> Tensor:
    """Masked 3x3 convolution + ReLU over stacked attention maps (B, K, N, N).

    Encoder: standard zero-padded convolution. Decoder-self: only taps with
    row offset >= col offset, window shifted one pixel down-right, so output
    (i, j) depends solely on inputs (r <= i, c <= j). Encoder-decoder: full
    kernel evaluated one pixel to the left, so output (i, j) depends only on
    columns c <= j.
    """
    if a.ndim != 4 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"conv2d_maps expects (B, K, N, N), got {a.shape}")
    if a.shape[1] != params.kernel.shape[1]:
        raise ValueError("channel count of maps and kernel disagree")
    sr, sc = _WINDOW_SHIFT[params.mask_kind]
    w = params.kernel.data
    n = a.shape[-1]
    # Channels last: every tap becomes one batched (.., K) @ (K, K) product
    # over the overlap between the shifted window and the map.
    x_t = np.ascontiguousarray(a.data.transpose(0, 2, 3, 1))
    pre_t = np.zeros_like(x_t)
    pre_t += params.bias.data
    spans = []
    for kr, kc in active_taps(params.mask_kind):
        si, sj = sr + kr - 1, sc + kc - 1
        i0, i1 = max(0, -si), min(n, n - si)
        j0, j1 = max(0, -sj), min(n, n - sj)
        if i0 >= i1 or j0 >= j1:
            continue
        spans.append((kr, kc, si, sj, i0, i1, j0, j1))
        pre_t[:, i0:i1, j0:j1, :] += (
            x_t[:, i0 + si:i1 + si, j0 + sj:j1 + sj, :] @ w[:, :, kr, kc].T)
    out_t = np.maximum(pre_t, 0.0)
    out = np.ascontiguousarray(out_t.transpose(0, 3, 1, 2))

    def grad_fn(g):
        g_t = g.transpose(0, 2, 3, 1) * (pre_t > 0.0)
        accumulate(params.bias, g_t.sum(axis=(0, 1, 2)))
        gk = np.zeros_like(w)
        ga_t = np.zeros_like(x_t)
        for kr, kc, si, sj, i0, i1, j0, j1 in spans:
            g_sl = g_t[:, i0:i1, j0:j1, :]
            x_sl = x_t[:, i0 + si:i1 + si, j0 + sj:j1 + sj, :]
            gk[:, :, kr, kc] = np.einsum("bijo,bijk->ok", g_sl, x_sl, optimize=True)
            ga_t[:, i0 + si:i1 + si, j0 + sj:j1 + sj, :] += g_sl @ w[:, :, kr, kc]
        accumulate(params.kernel, gk)
        accumulate(a, np.ascontiguousarray(ga_t.transpose(0, 3, 1, 2)))

    return record(out, (a, params.kernel, params.bias), grad_fn)


def dilated_conv1d(x: Tensor, w: Tensor, b: Tensor, dilation: int) -> Tensor:
    """Causal width-3 convolution along time: output t reads inputs
    t - 2*dilation, t - dilation, t (zeros before the series start), so the
    sequence length is preserved without looking ahead."""
    if x.ndim != 3:
        raise ValueError(f"dilated_conv1d expects (B, T, C), got {x.shape}")
    t = x.shape[1]
    pre = np.zeros(x.shape[:2] + (w.shape[0],), dtype=np.float64)
    pre += b.data
    spans = []
    for k in range(3):
        off = (k - 2) * dilation  # tap k reads input at t + off
        t0, t1 = max(0, -off), min(t, t - off)
        spans.append((k, off, t0, t1))
        if t0 < t1:
            pre[:, t0:t1, :] += x.data[:, t0 + off:t1 + off, :] @ w.data[:, :, k].T
    out = pre

    def grad_fn(g):
        accumulate(b, g.sum(axis=(0, 1)))
        gw = np.zeros_like(w.data)
        gx = np.zeros_like(x.data)
        for k, off, t0, t1 in spans:
            if t0 >= t1:
                continue
            g_sl = g[:, t0:t1, :]
            gw[:, :, k] = np.einsum("bto,bti->oi", g_sl,
                                      x.data[:, t0 + off:t1 + off, :], optimize=True)
            gx[:, t0 + off:t1 + off, :] += g_sl @ w.data[:, :, k]
        accumulate(w, gw)
        accumulate(x, gx)

    return record(out, (x, w, b), grad_fn)


def dilated_conv1d_stack(x: Tensor, params: DilatedConvParams) -> Tensor:
    """Apply the dilated layers with dilations 1, 2, ..., 2^(m-1); ReLU after
    every layer except the last."""
    out = x
    for layer in range(params.depth):
        out = dilated_conv1d(out, params.weights[layer], params.biases[layer],
                             params.dilation(layer))
        if layer < params.depth - 1:
            out = relu(out)
    return out


def receptive_field(depth: int) -> int:
    """Time steps visible to one output of a depth-m dilated stack."""
    return 1 + 2 * ((1 << depth) - 1)


def relative_logits_1d(q: Tensor, encoding: PositionalEncoding) -> Tensor:
    """Query-relative position logits: R[b,k,i,j] = q[b,k,i] . e[clip(i-j)].

    Offsets are clipped to [-max_rel_dist, +max_rel_dist]; the table rows are
    ordered from -max_rel_dist up to +max_rel_dist.
    """
    if encoding.kind != "relative_1d":
        raise ValueError("relative_logits_1d needs a relative_1d encoding")
    if q.ndim != 4:
        raise ValueError(f"expected queries of shape (B, K, N, d_h), got {q.shape}")
    table = encoding.table
    if table.shape[-1] != q.shape[-1]:
        raise ValueError("relative table width must equal the per-head dimension")
    n = q.shape[2]
    r = encoding.max_rel_dist
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    idx = np.clip(i - j, -r, r) + r  # (N, N) rows into the table
    e = table.data[idx]  # (N, N, d_h)
    out = np.einsum("bkid,ijd->bkij", q.data, e)

    def grad_fn(g):
        accumulate(q, np.einsum("bkij,ijd->bkid", g, e))
        gt = np.zeros_like(table.data)
        contrib = np.einsum("bkij,bkid->ijd", g, q.data)
        np.add.at(gt, idx.reshape(-1), contrib.reshape(-1, table.shape[-1]))
        accumulate(table, gt)

    return record(out, (q, table), grad_fn)


def causal_valid_mask(n: int) -> np.ndarray:
    """(N, N) boolean mask: position i may attend to j <= i."""
    return np.tril(np.ones((n, n), dtype=bool))


def padding_valid_mask(lengths: np.ndarray, n: int) -> np.ndarray:
    """(B, 1, 1, N) boolean mask hiding padded key positions."""
    lengths = np.asarray(lengths)
    return (np.arange(n)[None, :] < lengths[:, None])[:, None, None, :]


@dataclass
class FeedForwardParams:
    """Two position-wise linear layers with a ReLU bottleneck in between."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    hidden_mult: int = field(default=4)


def feed_forward(x: Tensor, params: FeedForwardParams) -> Tensor:
    return linear(relu(linear(x, params.w1, params.b1)), params.w2, params.b2)
