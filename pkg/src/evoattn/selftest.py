"""Built-in invariant suite: gradient fidelity, degenerate-architecture
equivalences, convolution-mask causality probes, softmax normalization, and
reproduction of a published score-aggregation table.

Each check reports the measured value next to its tolerance so a regression
shows up as a number, not just a flag. The whole suite runs in seconds and
backs the ``selftest`` CLI command; the acceptance test suite drives the same
probes at their contractual settings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention as attn_mod
from .kernels import (Conv2dMapParams, active_taps, causal_valid_mask,
                      conv2d_maps, softmax_masked, structural_tap_mask)
from .metrics import MetricsTable, avg_rank, avg_relative_difference, avg_wcd
from .model import Model, ModelConfig
from .reference import dilated_ffn_forward, vanilla_transformer_forward
from .tensor import Tensor, grad_check, grad_check_params, no_grad
from .train import gen_pretrain_mask, masked_mse

# Published RMSE scores of seven sequence models on six regression benchmark
# datasets, with the aggregate rows printed alongside them; used as a fixture
# with known rank / relative-difference aggregates.
REFERENCE_MODELS = ["LSTM", "GRU", "ResNet", "DilatedConv", "Transformer",
                    "DC-Transformer", "EA-DC-Transformer"]
REFERENCE_DATASETS = ["AppliancesEnergy", "BenzeneConcentration", "BeijingPM10",
                      "BeijingPM25", "LiveFuelMoisture", "IEEEPPG"]
REFERENCE_RMSE_VALUES = np.array([
    [3.844, 4.151, 3.369, 3.711, 3.663, 3.035, 2.957],
    [7.936, 6.919, 2.889, 2.758, 1.576, 1.127, 0.758],
    [101.863, 101.452, 95.22, 96.927, 98.035, 91.993, 91.774],
    [64.715, 65.667, 64.54, 64.813, 64.874, 59.425, 59.118],
    [43.316, 44.19, 44.723, 43.457, 44.874, 43.326, 43.261],
    [34.814, 26.961, 46.593, 39.633, 33.848, 30.075, 23.14],
])
REFERENCE_AVG_REL_DIFF = (0.251, 0.182, 0.035, 0.009, -0.072, -0.173, -0.231)
REFERENCE_AVG_RANK_LSTM = 5.2
REFERENCE_AVG_RANK_BEST = 1.0


def reference_rmse_table() -> MetricsTable:
    return MetricsTable(row_labels=list(REFERENCE_DATASETS),
                        col_labels=list(REFERENCE_MODELS),
                        values=REFERENCE_RMSE_VALUES.copy(),
                        lower_is_better=True)


@dataclass
class CheckResult:
    name: str
    measured: float
    tolerance: float
    passed: bool
    note: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  [{self.note}]" if self.note else ""
        return (f"{status}  {self.name}: measured {self.measured:.3e} "
                f"(tolerance {self.tolerance:.3e}){extra}")


def _small_model(arch="ea_dc_transformer", **overrides) -> Model:
    cfg = dict(in_channels=2, max_len=6, arch=arch, n_blocks=2, d=8, n_heads=2,
               alpha=0.5, beta=0.3, p=0.5, m=2, dropout=0.0, task="pretrain")
    cfg.update(overrides)
    return Model(ModelConfig(**cfg), np.random.default_rng(0))


def check_kernel_gradients(eps: float = 1e-5, tol: float = 1e-4) -> CheckResult:
    """Finite-difference checks for each hand-written backward rule."""
    from .kernels import (DilatedConvParams, dilated_conv1d_stack, layer_norm,
                          relative_logits_1d, PositionalEncoding)
    rng = np.random.default_rng(42)
    worst = 0.0

    x = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    coeff = Tensor(rng.standard_normal((2, 4)))
    worst = max(worst, grad_check(
        lambda t: (softmax_masked(t, np.array([True, True, False, True])) * coeff).sum(),
        x, eps))

    gamma = Tensor(rng.standard_normal(4), requires_grad=True)
    beta = Tensor(rng.standard_normal(4), requires_grad=True)
    worst = max(worst, grad_check(
        lambda t: (layer_norm(t, gamma, beta) * coeff).sum(), x, eps))

    for kind in ("encoder", "decoder_self", "encoder_decoder"):
        conv = Conv2dMapParams(
            Tensor(rng.standard_normal((2, 2, 3, 3)) * structural_tap_mask(kind),
                   requires_grad=True),
            Tensor(rng.standard_normal(2) * 0.1, requires_grad=True), kind)
        maps = Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True)
        cm = Tensor(rng.standard_normal((1, 2, 5, 5)))
        worst = max(worst, grad_check(
            lambda t, c=conv, w=cm: (conv2d_maps(t, c) * w).sum(), maps, eps))
        worst = max(worst, grad_check(
            lambda ker, c=conv, t=maps, w=cm: (conv2d_maps(
                t, Conv2dMapParams(ker, c.bias, c.mask_kind)) * w).sum(),
            conv.kernel, eps))

    stack = DilatedConvParams(
        weights=[Tensor(rng.standard_normal((2, 2, 3)) * 0.4, requires_grad=True)
                 for _ in range(3)],
        biases=[Tensor(rng.standard_normal(2) * 0.1, requires_grad=True)
                for _ in range(3)])
    xs = Tensor(rng.standard_normal((1, 12, 2)), requires_grad=True)
    worst = max(worst, grad_check(
        lambda t: (dilated_conv1d_stack(t, stack) ** 2.0).sum(), xs, eps))

    enc = PositionalEncoding("relative_1d",
                             Tensor(rng.standard_normal((5, 2)), requires_grad=True),
                             max_rel_dist=2)
    q = Tensor(rng.standard_normal((1, 2, 4, 2)), requires_grad=True)
    cq = Tensor(rng.standard_normal((1, 2, 4, 4)))
    worst = max(worst, grad_check(
        lambda t: (relative_logits_1d(t, enc) * cq).sum(), q, eps))

    return CheckResult("gradient/kernels", worst, tol, worst <= tol)


def check_model_gradient(eps: float = 1e-5, tol: float = 1e-4) -> CheckResult:
    """End-to-end gradient check of a small hybrid model under the masked
    reconstruction loss."""
    model = _small_model()
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 6, 2))
    mask = gen_pretrain_mask(x.shape, 0.3, np.random.default_rng(2))

    def f():
        z, _ = model.encode(x * mask.keep)
        return masked_mse(model.reconstruct(z), x, mask)

    errs = grad_check_params(f, model.named_parameters(), eps=eps)
    worst = max(errs.values())
    worst_name = max(errs, key=errs.get)
    return CheckResult("gradient/full-model", worst, tol, worst <= tol,
                       note=f"worst: {worst_name}")


def check_vanilla_equivalence(tol: float = 1e-12) -> CheckResult:
    """alpha = beta = 0 collapses the stack onto a plain transformer."""
    model = _small_model(arch="ea_transformer", alpha=0.0, beta=0.0, n_blocks=3)
    x = np.random.default_rng(3).standard_normal((2, 6, 2))
    with no_grad():
        z, _ = model.encode(x)
    diff = float(np.abs(z.data - vanilla_transformer_forward(x, model)).max())
    return CheckResult("equivalence/vanilla-stack", diff, tol, diff <= tol)


def check_p_one_equivalence(tol: float = 1e-12) -> CheckResult:
    """Full-width attention branch reproduces the pure attention block."""
    ea = _small_model(arch="ea_transformer")
    dc = _small_model(arch="ea_dc_transformer", p=1.0)
    ep, dp = ea.named_parameters(), dc.named_parameters()
    for name in set(ep) & set(dp):
        dp[name].data = ep[name].data.copy()
    x = np.random.default_rng(4).standard_normal((2, 6, 2))
    with no_grad():
        z_ea, _ = ea.encode(x)
        z_dc, _ = dc.encode(x)
    diff = float(np.abs(z_ea.data - z_dc.data).max())
    return CheckResult("equivalence/p=1", diff, tol, diff <= tol)


def check_p_zero_equivalence(tol: float = 1e-12) -> CheckResult:
    """Zero-width attention branch leaves a pure dilated-convolution model."""
    model = _small_model(p=0.0)
    has_attention = any(".attn." in n or ".evolve." in n
                        for n in model.named_parameters())
    x = np.random.default_rng(5).standard_normal((2, 6, 2))
    with no_grad():
        z, logits = model.encode(x)
    diff = float(np.abs(z.data - dilated_ffn_forward(x, model)).max())
    ok = (diff <= tol) and not has_attention and logits == []
    return CheckResult("equivalence/p=0", diff, tol, ok,
                       note="no attention parameters" if not has_attention
                       else "attention parameters present!")


def _causality_probe(mask_kind: str, n: int, trials: int, seed: int,
                     conv: Conv2dMapParams | None = None) -> float:
    """Max observed output change at positions the mask declares independent
    of the perturbed cell (decoder-self: r > i or c > j; enc-dec: c > j)."""
    rng = np.random.default_rng(seed)
    k = 2
    if conv is None:
        conv = Conv2dMapParams(
            Tensor(rng.standard_normal((k, k, 3, 3)) * structural_tap_mask(mask_kind)),
            Tensor(rng.standard_normal(k) * 0.1), mask_kind)
    a = rng.standard_normal((1, k, n, n))
    with no_grad():
        base = conv2d_maps(Tensor(a), conv).data
    leak = 0.0
    for _ in range(trials):
        r, c = int(rng.integers(0, n)), int(rng.integers(0, n))
        bumped = a.copy()
        bumped[0, int(rng.integers(0, k)), r, c] += float(rng.standard_normal()) * 3.0
        with no_grad():
            out = conv2d_maps(Tensor(bumped), conv).data
        delta = np.abs(out - base)
        if conv.mask_kind == "decoder_self":
            forbidden = delta[:, :, :r, :]  # rows i < r
            leak = max(leak, float(forbidden.max()) if forbidden.size else 0.0)
            forbidden = delta[:, :, :, :c]  # cols j < c
        else:
            forbidden = delta[:, :, :, :c]
        leak = max(leak, float(forbidden.max()) if forbidden.size else 0.0)
    return leak


def check_decoder_causality(n: int = 9, trials: int = 200) -> CheckResult:
    leak = _causality_probe("decoder_self", n, trials, seed=6)
    return CheckResult("causality/decoder-self-conv", leak, 0.0, leak == 0.0)


def check_encdec_causality(n: int = 9, trials: int = 200) -> CheckResult:
    leak = _causality_probe("encoder_decoder", n, trials, seed=7)
    return CheckResult("causality/encoder-decoder-conv", leak, 0.0, leak == 0.0)


def check_post_softmax_causality() -> CheckResult:
    """After evolution with the decoder-self kind, future positions carry
    exactly zero probability."""
    rng = np.random.default_rng(8)
    k, n = 2, 9
    conv = Conv2dMapParams(
        Tensor(rng.standard_normal((k, k, 3, 3)) * structural_tap_mask("decoder_self")),
        Tensor(rng.standard_normal(k) * 0.1), "decoder_self")
    valid = causal_valid_mask(n)
    raw = attn_mod.AttentionLogits(Tensor(rng.standard_normal((2, k, n, n))), 1)
    ev = attn_mod.EvolveParams(alpha=0.4, beta=0.6, conv=conv)
    with no_grad():
        logits = attn_mod.evolve(None, raw, ev, valid=valid)
        probs = softmax_masked(logits.values, valid).data
    future = probs[:, :, ~valid]
    worst = float(np.abs(future).max())
    return CheckResult("causality/post-softmax-future-prob", worst, 0.0, worst == 0.0)


def check_decoder_tap_count() -> CheckResult:
    count = len(active_taps("decoder_self"))
    return CheckResult("conv/decoder-active-taps", float(count), 6.0, count == 6,
                       note="expected exactly 6")


def check_softmax_normalization(tol: float = 1e-9) -> CheckResult:
    rng = np.random.default_rng(9)
    z = rng.standard_normal((4, 7)) * 8
    valid = rng.random((4, 7)) > 0.3
    valid[:, 0] = True
    with no_grad():
        p1 = softmax_masked(Tensor(z), valid).data
        p2 = softmax_masked(Tensor(z + 123.456), valid).data
    err = max(float(np.abs(p1.sum(axis=-1) - 1.0).max()),
              float(np.abs(p1 - p2).max()))
    return CheckResult("softmax/normalization+shift", err, tol, err <= tol)


def check_reference_rel_diff(tol: float = 0.002) -> CheckResult:
    got = avg_relative_difference(reference_rmse_table())
    err = float(np.abs(got - np.array(REFERENCE_AVG_REL_DIFF)).max())
    return CheckResult("metrics/avg-relative-difference", err, tol, err <= tol)


def check_reference_rank(tol: float = 0.05) -> CheckResult:
    ranks = avg_rank(reference_rmse_table())
    best_exact = ranks[-1] == REFERENCE_AVG_RANK_BEST
    lstm_err = float(abs(ranks[0] - REFERENCE_AVG_RANK_LSTM))
    return CheckResult("metrics/avg-rank", lstm_err, tol,
                       best_exact and lstm_err <= tol,
                       note=f"best column rank {ranks[-1]}")


def check_avg_wcd(tol: float = 1e-9) -> CheckResult:
    collapsed = avg_wcd(np.array([[1.0, 2.0]] * 4), np.zeros(4, dtype=int))
    two_class = avg_wcd(np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 3.0]]),
                        np.array([0, 0, 1]))
    vecs = np.random.default_rng(10).standard_normal((12, 3))
    labels = np.arange(12) % 3
    shift = avg_wcd(vecs + np.array([5.0, -7.0, 2.5]), labels) - avg_wcd(vecs, labels)
    err = max(abs(collapsed), abs(two_class - 2.0 / 3.0), abs(shift))
    return CheckResult("metrics/avg-wcd", err, tol, err <= tol)


ALL_CHECKS = [
    check_kernel_gradients,
    check_model_gradient,
    check_vanilla_equivalence,
    check_p_one_equivalence,
    check_p_zero_equivalence,
    check_decoder_causality,
    check_encdec_causality,
    check_post_softmax_causality,
    check_decoder_tap_count,
    check_softmax_normalization,
    check_reference_rel_diff,
    check_reference_rank,
    check_avg_wcd,
]


def run_selftest(verbose: bool = True) -> list[CheckResult]:
    results = [check() for check in ALL_CHECKS]
    if verbose:
        for res in results:
            print(res.line())
        n_fail = sum(not r.passed for r in results)
        print(f"{len(results) - n_fail}/{len(results)} checks passed")
    return results
