"""Block and stack assembly: evolving-attention transformer blocks, the
attention + dilated-convolution hybrid block, task heads, and checkpoint I/O.

A model owns its parameters as named tensors; the forward methods are pure
given (input, training flag, rng). The hybrid block splits the width d into
an attention branch of p*d dimensions and a causal dilated-convolution branch
of (1-p)*d dimensions whose outputs are concatenated; p=1 and p=0 drop the
respective other branch entirely.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import attention as attn_mod
from . import kernels
from .tensor import Tensor, concat, relu

EA_TRANSFORMER = "ea_transformer"
EA_DC_TRANSFORMER = "ea_dc_transformer"
ARCHS = (EA_TRANSFORMER, EA_DC_TRANSFORMER)
TASKS = ("pretrain", "regression", "classification")

CHECKPOINT_MAGIC = "EVOATTN CKPT"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    in_channels: int
    max_len: int
    arch: str = EA_DC_TRANSFORMER
    n_blocks: int = 3
    d: int = 64
    n_heads: int = 4
    alpha: float = 0.5
    beta: float = 0.3
    p: float = 0.25
    m: int = 3
    ffn_mult: int = 4
    dropout: float = 0.1
    mask_kind: str = kernels.ENCODER
    pos_encoding: str = "learned_absolute"
    max_rel_dist: int = 16
    task: str = "pretrain"
    n_classes: int | None = None
    clf_hidden: bool = False

    def __post_init__(self):
        self.validate()

    @property
    def attn_width(self) -> int:
        if self.arch == EA_TRANSFORMER:
            return self.d
        return int(round(self.p * self.d))

    @property
    def conv_width(self) -> int:
        if self.arch == EA_TRANSFORMER:
            return 0
        return self.d - self.attn_width

    def validate(self) -> None:
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "classification" and (self.n_classes is None or self.n_classes < 2):
            raise ValueError("classification needs n_classes >= 2")
        if self.mask_kind not in kernels.MASK_KINDS:
            raise ValueError(f"unknown mask kind {self.mask_kind!r}")
        if self.pos_encoding not in ("none",) + kernels.PositionalEncoding.KINDS:
            raise ValueError(f"unknown positional encoding {self.pos_encoding!r}")
        for name in ("alpha", "beta", "p", "dropout"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.dropout >= 1.0:
            raise ValueError("dropout must be < 1")
        if self.arch == EA_DC_TRANSFORMER:
            width = self.p * self.d
            if abs(width - round(width)) > 1e-9:
                raise ValueError(f"p*d must be an integer, got {self.p} * {self.d} = {width}")
        if self.attn_width > 0 and self.attn_width % self.n_heads != 0:
            raise ValueError(
                f"attention width {self.attn_width} not divisible by {self.n_heads} heads")
        if min(self.n_blocks, self.d, self.n_heads, self.in_channels,
               self.max_len, self.m, self.ffn_mult) < 1:
            raise ValueError("structural sizes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class BlockParams:
    attn: attn_mod.AttentionHeadParams | None
    evolve: attn_mod.EvolveParams | None
    dilated: kernels.DilatedConvParams | None
    ffn: kernels.FeedForwardParams
    ln1_gamma: Tensor = None
    ln1_beta: Tensor = None
    ln2_gamma: Tensor = None
    ln2_beta: Tensor = None


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Model:
    """Encoder stack plus one task head, built from a ModelConfig."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        config.validate()
        self.config = config
        rng = rng or np.random.default_rng(0)
        c, d = config.in_channels, config.d

        self.embed_w = _glorot(rng, c, d, (c, d))
        self.embed_b = _zeros((d,))

        self.pos: kernels.PositionalEncoding | None = None
        if config.pos_encoding == "learned_absolute":
            table = Tensor(0.02 * rng.standard_normal((config.max_len, d)),
                           requires_grad=True)
            self.pos = kernels.PositionalEncoding("learned_absolute", table)
        elif config.pos_encoding == "sinusoidal":
            table = Tensor(kernels.sinusoidal_table(config.max_len, d))
            self.pos = kernels.PositionalEncoding("sinusoidal", table)

        self.blocks = [self._build_block(rng, i) for i in range(config.n_blocks)]
        self._build_head(rng)

    # -- construction ------------------------------------------------------

    def _build_block(self, rng: np.random.Generator, index: int) -> BlockParams:
        cfg = self.config
        d = cfg.d
        aw = cfg.attn_width

        attn = None
        evolve = None
        if aw > 0:
            relative = None
            if cfg.pos_encoding == "relative_1d":
                d_h = aw // cfg.n_heads
                table = Tensor(0.02 * rng.standard_normal((2 * cfg.max_rel_dist + 1, d_h)),
                               requires_grad=True)
                relative = kernels.PositionalEncoding("relative_1d", table,
                                                      max_rel_dist=cfg.max_rel_dist)
            attn = attn_mod.AttentionHeadParams(
                w_q=_glorot(rng, d, aw, (d, aw)),
                w_k=_glorot(rng, d, aw, (d, aw)),
                w_v=_glorot(rng, d, aw, (d, aw)),
                w_o=_glorot(rng, aw, aw, (aw, aw)),
                n_heads=cfg.n_heads,
                relative=relative,
            )
            conv = None
            if cfg.beta > 0.0:
                k = cfg.n_heads
                kernel = _glorot(rng, k * 9, k * 9, (k, k, 3, 3))
                kernel.data *= kernels.structural_tap_mask(cfg.mask_kind)
                conv = kernels.Conv2dMapParams(kernel=kernel, bias=_zeros((k,)),
                                               mask_kind=cfg.mask_kind)
            evolve = attn_mod.EvolveParams(alpha=cfg.alpha, beta=cfg.beta, conv=conv)

        dilated = None
        if cfg.conv_width > 0:
            weights, biases = [], []
            d_in = d
            for _ in range(cfg.m):
                d_out = cfg.conv_width
                weights.append(_glorot(rng, d_in * 3, d_out * 3, (d_out, d_in, 3)))
                biases.append(_zeros((d_out,)))
                d_in = d_out
            dilated = kernels.DilatedConvParams(weights=weights, biases=biases)

        hidden = cfg.ffn_mult * d
        ffn = kernels.FeedForwardParams(
            w1=_glorot(rng, d, hidden, (d, hidden)),
            b1=_zeros((hidden,)),
            w2=_glorot(rng, hidden, d, (hidden, d)),
            b2=_zeros((d,)),
            hidden_mult=cfg.ffn_mult,
        )
        return BlockParams(attn=attn, evolve=evolve, dilated=dilated, ffn=ffn,
                           ln1_gamma=_ones((d,)), ln1_beta=_zeros((d,)),
                           ln2_gamma=_ones((d,)), ln2_beta=_zeros((d,)))

    def _build_head(self, rng: np.random.Generator) -> None:
        cfg = self.config
        d, c = cfg.d, cfg.in_channels
        self.head: dict[str, Tensor] = {}
        if cfg.task == "pretrain":
            self.head["w_rc"] = _glorot(rng, d, c, (d, c))
            self.head["b_rc"] = _zeros((c,))
        elif cfg.task == "regression":
            self.head["w_lr"] = _glorot(rng, d, 1, (d, 1))
            self.head["b_lr"] = _zeros((1,))
        else:
            if cfg.clf_hidden:
                self.head["w_h"] = _glorot(rng, d, d, (d, d))
                self.head["b_h"] = _zeros((d,))
            self.head["w_cl"] = _glorot(rng, d, cfg.n_classes, (d, cfg.n_classes))
            self.head["b_cl"] = _zeros((cfg.n_classes,))

    # -- parameter access ----------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {"embed.w": self.embed_w, "embed.b": self.embed_b}
        if self.pos is not None and self.pos.kind == "learned_absolute":
            params["pos.table"] = self.pos.table
        for i, blk in enumerate(self.blocks):
            pre = f"blocks.{i}"
            if blk.attn is not None:
                params[f"{pre}.attn.w_q"] = blk.attn.w_q
                params[f"{pre}.attn.w_k"] = blk.attn.w_k
                params[f"{pre}.attn.w_v"] = blk.attn.w_v
                params[f"{pre}.attn.w_o"] = blk.attn.w_o
                if blk.attn.relative is not None:
                    params[f"{pre}.attn.rel_table"] = blk.attn.relative.table
                if blk.evolve is not None and blk.evolve.conv is not None:
                    params[f"{pre}.evolve.kernel"] = blk.evolve.conv.kernel
                    params[f"{pre}.evolve.bias"] = blk.evolve.conv.bias
            if blk.dilated is not None:
                for l, (w, b) in enumerate(zip(blk.dilated.weights, blk.dilated.biases)):
                    params[f"{pre}.dilated.{l}.w"] = w
                    params[f"{pre}.dilated.{l}.b"] = b
            params[f"{pre}.ffn.w1"] = blk.ffn.w1
            params[f"{pre}.ffn.b1"] = blk.ffn.b1
            params[f"{pre}.ffn.w2"] = blk.ffn.w2
            params[f"{pre}.ffn.b2"] = blk.ffn.b2
            params[f"{pre}.ln1.gamma"] = blk.ln1_gamma
            params[f"{pre}.ln1.beta"] = blk.ln1_beta
            params[f"{pre}.ln2.gamma"] = blk.ln2_gamma
            params[f"{pre}.ln2.beta"] = blk.ln2_beta
        for name, t in self.head.items():
            params[f"head.{name}"] = t
        return params

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    def parameter_count(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    # -- forward -------------------------------------------------------------

    def _valid_mask(self, n: int, lengths: np.ndarray | None) -> np.ndarray | None:
        valid = None
        if self.config.mask_kind == kernels.DECODER_SELF:
            valid = kernels.causal_valid_mask(n)
        if lengths is not None:
            pad = kernels.padding_valid_mask(lengths, n)
            valid = pad if valid is None else (valid & pad)
        return valid

    def _run_block(self, blk: BlockParams, h: Tensor,
                   prev: attn_mod.AttentionLogits | None,
                   valid: np.ndarray | None, training: bool,
                   rng: np.random.Generator | None):
        cfg = self.config
        branches = []
        logits = None
        if blk.attn is not None:
            raw = attn_mod.raw_logits(h, blk.attn)
            logits = attn_mod.evolve(prev, raw, blk.evolve, valid)
            branches.append(attn_mod.attention_apply(
                logits, h, blk.attn, valid=valid, dropout_rate=cfg.dropout,
                rng=rng, training=training))
        if blk.dilated is not None:
            branches.append(kernels.dilated_conv1d_stack(h, blk.dilated))
        mixed = branches[0] if len(branches) == 1 else concat(branches, axis=-1)
        mixed = kernels.dropout(mixed, cfg.dropout, rng, training)
        y1 = kernels.layer_norm(h + mixed, blk.ln1_gamma, blk.ln1_beta)
        ff = kernels.dropout(kernels.feed_forward(y1, blk.ffn), cfg.dropout, rng, training)
        y = kernels.layer_norm(y1 + ff, blk.ln2_gamma, blk.ln2_beta)
        return y, logits

    def encode(self, x, lengths: np.ndarray | None = None, training: bool = False,
               rng: np.random.Generator | None = None):
        """Embed the (B, T, C) input and run all blocks, threading the logit
        maps; returns the final (B, T, d) representation and the per-block
        logits (empty when the attention branch has width zero)."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim != 3 or x.shape[-1] != self.config.in_channels:
            raise ValueError(
                f"expected (B, T, {self.config.in_channels}) input, got {x.shape}")
        t = x.shape[1]
        if t > self.config.max_len:
            raise ValueError(f"series length {t} exceeds max_len {self.config.max_len}")
        h = kernels.linear(x, self.embed_w, self.embed_b)
        if self.pos is not None and self.pos.kind != "relative_1d":
            h = h + self.pos.table[:t]
        valid = self._valid_mask(t, lengths)
        prev = None
        all_logits: list[attn_mod.AttentionLogits] = []
        for blk in self.blocks:
            h, logits = self._run_block(blk, h, prev, valid, training, rng)
            if logits is not None:
                all_logits.append(logits)
                prev = logits
        return h, all_logits

    def reconstruct(self, z: Tensor) -> Tensor:
        """Per-timestamp linear map back to the input channels."""
        return kernels.linear(z, self.head["w_rc"], self.head["b_rc"])

    def regress(self, z: Tensor, lengths: np.ndarray | None = None) -> Tensor:
        pooled = mean_pool(z, lengths)
        out = kernels.linear(pooled, self.head["w_lr"], self.head["b_lr"])
        return out.reshape(out.shape[0])

    def classify(self, z: Tensor, lengths: np.ndarray | None = None) -> Tensor:
        pooled = mean_pool(z, lengths)
        if "w_h" in self.head:
            pooled = relu(kernels.linear(pooled, self.head["w_h"], self.head["b_h"]))
        scores = kernels.linear(pooled, self.head["w_cl"], self.head["b_cl"])
        return kernels.softmax_masked(scores)

    def task_output(self, x, lengths: np.ndarray | None = None,
                    training: bool = False,
                    rng: np.random.Generator | None = None) -> Tensor:
        z, _ = self.encode(x, lengths=lengths, training=training, rng=rng)
        if self.config.task == "pretrain":
            return self.reconstruct(z)
        if self.config.task == "regression":
            return self.regress(z, lengths)
        return self.classify(z, lengths)


def mean_pool(z: Tensor, lengths: np.ndarray | None = None) -> Tensor:
    """Average over time; padded steps are excluded when lengths are given."""
    if lengths is None:
        return z.mean(axis=1)
    t = z.shape[1]
    w = (np.arange(t)[None, :] < lengths[:, None]).astype(np.float64)
    w /= lengths[:, None].astype(np.float64)
    return (z * Tensor(w[:, :, None])).sum(axis=1)


# -- checkpoint I/O ----------------------------------------------------------


def save_checkpoint(path, model: Model) -> None:
    """Self-describing checkpoint: text header (magic, version, config JSON,
    parameter manifest) followed by the raw little-endian float64 payload."""
    params = model.named_parameters()
    manifest = [[name, list(p.shape)] for name, p in params.items()]
    header = (
        f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n"
        + json.dumps(model.config.to_dict(), sort_keys=True) + "\n"
        + json.dumps(manifest) + "\n"
        + "DATA\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        for p in params.values():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.readline().decode("utf-8").strip()
        if not magic.startswith(CHECKPOINT_MAGIC):
            raise ValueError(f"not a checkpoint file: {path}")
        version = int(magic.rsplit(" ", 1)[1])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        config = ModelConfig.from_dict(json.loads(fh.readline().decode("utf-8")))
        manifest = json.loads(fh.readline().decode("utf-8"))
        if fh.readline().decode("utf-8").strip() != "DATA":
            raise ValueError("malformed checkpoint header")
        blob = fh.read()
    flat = np.frombuffer(blob, dtype="<f8")
    params: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in manifest:
        size = int(np.prod(shape)) if shape else 1
        params[name] = flat[offset:offset + size].reshape(shape).astype(np.float64)
        offset += size
    if offset != flat.size:
        raise ValueError("checkpoint payload size disagrees with its manifest")
    return config, params


def load_params_into(model: Model, saved: dict[str, np.ndarray],
                     strict: bool = True) -> list[str]:
    """Copy saved arrays into matching model parameters by name.

    Any shared name with a different shape is an error (all mismatches are
    listed). With strict=True the name sets must match exactly; otherwise the
    intersection is loaded and the skipped names are returned.
    """
    params = model.named_parameters()
    mismatches = [
        f"{name}: checkpoint {list(saved[name].shape)} vs model {list(params[name].shape)}"
        for name in sorted(set(saved) & set(params))
        if tuple(saved[name].shape) != params[name].shape
    ]
    if mismatches:
        raise ValueError("architecture mismatch:\n  " + "\n  ".join(mismatches))
    if strict:
        missing = sorted(set(params) - set(saved))
        extra = sorted(set(saved) - set(params))
        if missing or extra:
            raise ValueError(f"parameter names disagree; missing={missing} extra={extra}")
    skipped = sorted(set(saved) - set(params))
    for name in set(saved) & set(params):
        params[name].data = saved[name].copy()
    return skipped


def model_from_checkpoint(path) -> Model:
    config, saved = load_checkpoint(path)
    model = Model(config, rng=np.random.default_rng(0))
    load_params_into(model, saved, strict=True)
    return model
