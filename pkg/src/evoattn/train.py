"""Losses, pre-training input masking, Adam / rectified-Adam optimizers, and
the deterministic training loop.

Pre-training zeroes a Bernoulli-sampled fraction r of input cells and
regresses the originals with mean squared error over the masked cells only.
Everything is reproducible: the loop derives all randomness (shuffling,
masks, dropout) from one seed, so identical configs give bitwise-identical
parameters and histories.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import TimeSeriesDataset, batchify
from .metrics import accuracy, rmse
from .model import Model, save_checkpoint
from .tensor import Tensor, no_grad, record, accumulate


class TrainingDiverged(RuntimeError):
    """Raised when the loss turns non-finite; carries a state summary."""


class OptimizerError(RuntimeError):
    pass


@dataclass
class PretrainMask:
    """Boolean keep-mask over (B, T, C) input cells; False marks a masked
    cell that the reconstruction loss must predict."""

    keep: np.ndarray
    rate: float

    @property
    def masked_count(self) -> int:
        return int((~self.keep).sum())


def gen_pretrain_mask(shape: tuple[int, ...], r: float,
                      rng: np.random.Generator, max_tries: int = 100) -> PretrainMask:
    """i.i.d. Bernoulli mask with masking probability r; resamples (up to
    max_tries) if no cell at all got masked."""
    if not 0.0 < r < 1.0:
        raise ValueError(f"mask rate must lie in (0, 1), got {r}")
    for _ in range(max_tries):
        keep = rng.random(shape) >= r
        if not keep.all():
            return PretrainMask(keep=keep, rate=r)
    raise RuntimeError(f"no cell masked after {max_tries} draws (r={r}, shape={shape})")


def masked_mse(x_hat: Tensor, x: np.ndarray, mask: PretrainMask) -> Tensor:
    """Mean squared reconstruction error over the masked cells only; kept
    cells contribute exactly zero loss and zero gradient."""
    count = mask.masked_count
    if count == 0:
        raise ValueError("masked_mse needs at least one masked cell")
    select = Tensor((~mask.keep).astype(np.float64))
    diff = (x_hat - Tensor(np.asarray(x, dtype=np.float64))) * select
    return (diff * diff).sum() / count


def mse_loss(y_hat: Tensor, y: np.ndarray) -> Tensor:
    diff = y_hat - Tensor(np.asarray(y, dtype=np.float64))
    return (diff * diff).mean()


def cross_entropy(probs: Tensor, labels: np.ndarray, floor: float = 1e-12) -> Tensor:
    """Negative mean log-probability of the true class, clamped at ``floor``."""
    labels = np.asarray(labels)
    b, n_classes = probs.shape
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("label out of range")
    rows = np.arange(b)
    picked = probs.data[rows, labels]
    clamped = np.maximum(picked, floor)
    out = -np.log(clamped).mean()

    def grad_fn(g):
        gp = np.zeros_like(probs.data)
        live = picked > floor
        gp[rows[live], labels[live]] = -g / (clamped[live] * b)
        accumulate(probs, gp)

    return record(np.asarray(out), (probs,), grad_fn)


# -- optimizers ---------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0


class Adam:
    """Adam with bias correction; beta2 defaults to the smaller 0.99 used for
    the time-series runs."""

    kind = "adam"

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = OptimizerState(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )

    def _moments(self, name: str, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        st = self.state
        st.m[name] = self.beta1 * st.m[name] + (1.0 - self.beta1) * grad
        st.v[name] = self.beta2 * st.v[name] + (1.0 - self.beta2) * grad * grad
        m_hat = st.m[name] / (1.0 - self.beta1 ** st.step_count)
        v_hat = st.v[name] / (1.0 - self.beta2 ** st.step_count)
        return m_hat, v_hat

    def _update(self, name: str, grad: np.ndarray) -> np.ndarray:
        m_hat, v_hat = self._moments(name, grad)
        return -self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def step(self) -> None:
        self.state.step_count += 1
        for name, p in self.params.items():
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(grad).all():
                raise OptimizerError(f"non-finite gradient for parameter {name!r}; step refused")
            p.data = p.data + self._update(name, grad)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class RAdam(Adam):
    """Rectified Adam: while the variance estimate is untrustworthy (rho <= 4,
    the first few steps) the update degenerates to momentum SGD; afterwards
    the adaptive step is scaled by the variance-rectification factor."""

    kind = "radam"

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.99, eps: float = 1e-8):
        super().__init__(params, lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        self.rho_inf = 2.0 / (1.0 - beta2) - 1.0

    def rectification(self, step: int) -> float | None:
        """Rectifier r_t, or None while it is inactive (rho_t <= 4)."""
        b2t = self.beta2 ** step
        rho = self.rho_inf - 2.0 * step * b2t / (1.0 - b2t)
        if rho <= 4.0:
            return None
        num = (rho - 4.0) * (rho - 2.0) * self.rho_inf
        den = (self.rho_inf - 4.0) * (self.rho_inf - 2.0) * rho
        return math.sqrt(num / den)

    def _update(self, name: str, grad: np.ndarray) -> np.ndarray:
        m_hat, v_hat = self._moments(name, grad)
        rect = self.rectification(self.state.step_count)
        if rect is None:
            return -self.lr * m_hat
        return -self.lr * rect * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind: str, params: dict[str, Tensor], **kwargs) -> Adam:
    kinds = {"adam": Adam, "radam": RAdam}
    if kind not in kinds:
        raise ValueError(f"unknown optimizer kind {kind!r} (expected adam or radam)")
    return kinds[kind](params, **kwargs)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


# -- training loop -------------------------------------------------------------


@dataclass
class TrainSchedule:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "radam"
    mask_rate: float = 0.15
    grad_clip: float = 5.0
    valid_fraction: float = 0.3
    seed: int = 0


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_metric: float


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_epoch: int
    best_valid: float
    best_params: dict[str, np.ndarray]
    valid_lower_is_better: bool

    def restore_best(self, model: Model) -> None:
        for name, p in model.named_parameters().items():
            p.data = self.best_params[name].copy()


def split_train_valid(n: int, valid_fraction: float,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic shuffled split of range(n) into train/valid index sets."""
    order = rng.permutation(n)
    n_valid = int(round(n * valid_fraction))
    n_valid = min(max(n_valid, 1), n - 1) if n > 1 else 0
    return np.sort(order[n_valid:]), np.sort(order[:n_valid])


def _batch_loss(model: Model, batch, schedule: TrainSchedule,
                rng: np.random.Generator | None, training: bool) -> Tensor:
    task = model.config.task
    if task == "pretrain":
        mask_rng = rng if rng is not None else np.random.default_rng(0)
        mask = gen_pretrain_mask(batch.x.shape, schedule.mask_rate, mask_rng)
        x_in = batch.x * mask.keep
        z, _ = model.encode(x_in, lengths=batch.lengths, training=training, rng=rng)
        return masked_mse(model.reconstruct(z), batch.x, mask)
    z, _ = model.encode(batch.x, lengths=batch.lengths, training=training, rng=rng)
    if task == "regression":
        return mse_loss(model.regress(z, batch.lengths), batch.targets)
    return cross_entropy(model.classify(z, batch.lengths), batch.labels)


def evaluate(model: Model, dataset: TimeSeriesDataset, batch_size: int = 64,
             mask_rate: float = 0.15, mask_seed: int = 0) -> float:
    """Task metric on a dataset: masked-reconstruction MSE for pretraining
    (fixed mask seed so the number is comparable across epochs), RMSE for
    regression, accuracy for classification."""
    task = model.config.task
    preds, targets = [], []
    mask_rng = np.random.default_rng(mask_seed)
    total, count = 0.0, 0
    with no_grad():
        for batch in batchify(dataset, batch_size, shuffle=False, seed=0):
            if task == "pretrain":
                mask = gen_pretrain_mask(batch.x.shape, mask_rate, mask_rng)
                z, _ = model.encode(batch.x * mask.keep, lengths=batch.lengths)
                loss = masked_mse(model.reconstruct(z), batch.x, mask)
                total += float(loss.data) * mask.masked_count
                count += mask.masked_count
            else:
                z, _ = model.encode(batch.x, lengths=batch.lengths)
                if task == "regression":
                    preds.append(model.regress(z, batch.lengths).data)
                    targets.append(batch.targets)
                else:
                    preds.append(model.classify(z, batch.lengths).data.argmax(axis=1))
                    targets.append(batch.labels)
    if task == "pretrain":
        return total / count
    preds = np.concatenate(preds)
    targets = np.concatenate(targets)
    return rmse(preds, targets) if task == "regression" else accuracy(preds, targets)


def train(model: Model, dataset: TimeSeriesDataset,
          schedule: TrainSchedule) -> TrainResult:
    """Deterministic epoch loop over the train split of ``dataset``; 30% of it
    (by default) is held out for validation and the best-validation parameter
    snapshot is retained."""
    seeds = np.random.SeedSequence(schedule.seed).spawn(3)
    split_rng = np.random.default_rng(seeds[0])
    model_rng = np.random.default_rng(seeds[1])
    mask_seed = int(np.random.default_rng(seeds[2]).integers(2 ** 31))

    train_all = dataset.subset("train")
    train_idx, valid_idx = split_train_valid(len(train_all), schedule.valid_fraction,
                                             split_rng)
    train_split = train_all.take(train_idx)
    valid_split = train_all.take(valid_idx)

    params = model.named_parameters()
    optimizer = make_optimizer(schedule.optimizer, params, lr=schedule.lr)
    lower_better = model.config.task != "classification"

    history: list[EpochRecord] = []
    best_valid = math.inf if lower_better else -math.inf
    best_epoch = 0
    best_params = {k: p.data.copy() for k, p in params.items()}

    for epoch in range(1, schedule.epochs + 1):
        epoch_losses = []
        for i, batch in enumerate(batchify(train_split, schedule.batch_size,
                                           shuffle=True, seed=schedule.seed + epoch)):
            optimizer.zero_grad()
            loss = _batch_loss(model, batch, schedule, model_rng, training=True)
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                raise TrainingDiverged(
                    f"loss became {loss_val} at epoch {epoch}, batch {i}; "
                    f"last finite losses: {epoch_losses[-5:]}")
            loss.backward()
            if schedule.grad_clip > 0:
                clip_grad_norm(params, schedule.grad_clip)
            optimizer.step()
            epoch_losses.append(loss_val)
        train_loss = float(np.mean(epoch_losses))
        valid_metric = evaluate(model, valid_split, batch_size=schedule.batch_size,
                                mask_rate=schedule.mask_rate, mask_seed=mask_seed)
        history.append(EpochRecord(epoch, train_loss, valid_metric))
        improved = (valid_metric < best_valid) if lower_better else (valid_metric > best_valid)
        if improved:
            best_valid = valid_metric
            best_epoch = epoch
            best_params = {k: p.data.copy() for k, p in params.items()}

    return TrainResult(history=history, best_epoch=best_epoch, best_valid=best_valid,
                       best_params=best_params, valid_lower_is_better=lower_better)


def save_history(path, history: list[EpochRecord]) -> None:
    """Epoch records as comma-delimited text (17 significant digits)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,valid_metric\n")
        for rec in history:
            fh.write(f"{rec.epoch},{rec.train_loss:.17g},{rec.valid_metric:.17g}\n")


def save_best_checkpoint(path, model: Model, result: TrainResult) -> None:
    """Write the best-validation snapshot without disturbing current weights."""
    current = {k: p.data for k, p in model.named_parameters().items()}
    result.restore_best(model)
    try:
        save_checkpoint(path, model)
    finally:
        for name, p in model.named_parameters().items():
            p.data = current[name]
