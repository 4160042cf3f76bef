"""Time-series dataset ingestion (long-format CSV), synthetic task
generation, train-statistics standardization, and deterministic batching.

Series of unequal length are zero-padded up to the longest one; the true
length travels with each series so attention and pooling can ignore the
padding. All randomness is generator-seeded and reproducible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

SPLITS = ("train", "valid", "test")


@dataclass
class TimeSeriesDataset:
    """Uniform-length (after padding) multivariate series with one target each.

    x: (n, T, C) float64; lengths: (n,) valid steps per series;
    targets: (n,) float64 (integer-valued for classification);
    split: (n,) tags from {train, valid, test}.
    """

    x: np.ndarray
    lengths: np.ndarray
    targets: np.ndarray
    split: np.ndarray
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None

    def __post_init__(self):
        n = self.x.shape[0]
        if self.x.ndim != 3:
            raise ValueError(f"series array must be (n, T, C), got {self.x.shape}")
        if self.lengths.shape != (n,) or self.targets.shape != (n,) or self.split.shape != (n,):
            raise ValueError("per-series arrays disagree with the series count")
        if not np.isfinite(self.x).all():
            raise ValueError("series contain non-finite values")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def n_channels(self) -> int:
        return self.x.shape[2]

    @property
    def max_len(self) -> int:
        return self.x.shape[1]

    @property
    def labels(self) -> np.ndarray:
        lab = self.targets.astype(np.int64)
        if not np.allclose(lab, self.targets):
            raise ValueError("targets are not integer class labels")
        return lab

    def subset(self, tag: str) -> "TimeSeriesDataset":
        if tag not in SPLITS:
            raise ValueError(f"unknown split {tag!r}")
        return self.take(np.flatnonzero(self.split == tag))

    def take(self, idx: np.ndarray) -> "TimeSeriesDataset":
        return replace(self, x=self.x[idx], lengths=self.lengths[idx],
                       targets=self.targets[idx], split=self.split[idx])


@dataclass
class TimeSeriesBatch:
    x: np.ndarray
    lengths: np.ndarray
    targets: np.ndarray
    indices: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        return self.targets.astype(np.int64)

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass
class SynthSpec:
    """Synthetic task description; both kinds emit train and test splits.

    freq_class: n_classes sine families with distinct integer frequencies,
    random phase per channel, additive Gaussian noise; label = family.
    noisy_sine_regress: one sine family with random amplitude in
    [0.5, 2.0); the target is the amplitude.
    """

    kind: str
    t: int = 64
    c: int = 2
    n_classes: int = 4
    sigma: float = 0.1
    n_train: int = 800
    n_test: int = 200
    seed: int = 0
    freqs: tuple[float, ...] | None = None

    KINDS = ("freq_class", "noisy_sine_regress")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown synthetic task {self.kind!r}")
        if self.kind == "freq_class" and self.n_classes < 2:
            raise ValueError("freq_class needs at least 2 classes")

    def class_freqs(self) -> np.ndarray:
        if self.freqs is not None:
            return np.asarray(self.freqs, dtype=np.float64)
        return np.array([2.0 ** k for k in range(self.n_classes)])


def synth_dataset(spec: SynthSpec) -> TimeSeriesDataset:
    rng = np.random.default_rng(spec.seed)
    counts = {"train": spec.n_train, "test": spec.n_test}
    xs, targets, tags = [], [], []
    steps = np.arange(spec.t, dtype=np.float64) / spec.t
    for tag in ("train", "test"):
        n = counts[tag]
        if spec.kind == "freq_class":
            labels = np.arange(n) % spec.n_classes  # class-balanced
            freqs = spec.class_freqs()[labels]
            phase = rng.uniform(0.0, 2.0 * np.pi, size=(n, 1, spec.c))
            clean = np.sin(2.0 * np.pi * freqs[:, None, None] * steps[None, :, None] + phase)
            noise = spec.sigma * rng.standard_normal((n, spec.t, spec.c))
            xs.append(clean + noise)
            targets.append(labels.astype(np.float64))
        else:
            amp = rng.uniform(0.5, 2.0, size=n)
            freq = 2.0
            phase = rng.uniform(0.0, 2.0 * np.pi, size=(n, 1, spec.c))
            clean = amp[:, None, None] * np.sin(
                2.0 * np.pi * freq * steps[None, :, None] + phase)
            noise = spec.sigma * rng.standard_normal((n, spec.t, spec.c))
            xs.append(clean + noise)
            targets.append(amp)
        tags.append(np.full(n, tag, dtype="<U5"))
    x = np.concatenate(xs)
    return TimeSeriesDataset(
        x=x,
        lengths=np.full(x.shape[0], spec.t, dtype=np.int64),
        targets=np.concatenate(targets),
        split=np.concatenate(tags),
    )


def load_csv_long(path) -> TimeSeriesDataset:
    """Read the long CSV format: header ``series_id,t,dim_0..dim_{C-1},target``.

    Rows are grouped by series_id and ordered by t; shorter series are
    zero-padded to the longest length, keeping their true length. The target
    is taken from each series' first row. Every series is tagged 'train'.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        expected_dims = [h for h in header if h.startswith("dim_")]
        n_dims = len(expected_dims)
        want = ["series_id", "t"] + [f"dim_{i}" for i in range(n_dims)] + ["target"]
        if header != want or n_dims == 0:
            raise ValueError(f"{path}: header must be series_id,t,dim_0..dim_{{C-1}},target; "
                             f"got {','.join(header)}")

        series: dict[str, dict[float, np.ndarray]] = {}
        series_target: dict[str, float] = {}
        order: list[str] = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}:{line_no}: expected {len(header)} fields, "
                                 f"got {len(row)}")
            sid = row[0]
            try:
                t_key = float(row[1])
                values = np.array([float(v) for v in row[2:2 + n_dims]])
                target = float(row[-1])
            except ValueError as exc:
                raise ValueError(f"{path}:{line_no}: non-numeric cell ({exc})") from None
            if sid not in series:
                series[sid] = {}
                series_target[sid] = target
                order.append(sid)
            if t_key in series[sid]:
                raise ValueError(f"{path}:{line_no}: duplicate (series_id, t) = "
                                 f"({sid}, {row[1]})")
            series[sid][t_key] = values

    max_t = max(len(rows) for rows in series.values())
    n = len(order)
    x = np.zeros((n, max_t, n_dims))
    lengths = np.zeros(n, dtype=np.int64)
    targets = np.zeros(n)
    for i, sid in enumerate(order):
        rows = series[sid]
        ts = sorted(rows)
        lengths[i] = len(ts)
        for step, t_key in enumerate(ts):
            x[i, step] = rows[t_key]
        targets[i] = series_target[sid]
    return TimeSeriesDataset(x=x, lengths=lengths, targets=targets,
                             split=np.full(n, "train", dtype="<U5"))


def save_csv_long(dataset: TimeSeriesDataset, path) -> None:
    """Inverse of load_csv_long (padding steps are not written); values are
    serialized with 17 significant digits so the round trip is exact."""
    c = dataset.n_channels
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("series_id,t," + ",".join(f"dim_{i}" for i in range(c)) + ",target\n")
        for i in range(len(dataset)):
            for t in range(int(dataset.lengths[i])):
                dims = ",".join(f"{v:.17g}" for v in dataset.x[i, t])
                fh.write(f"s{i},{t},{dims},{dataset.targets[i]:.17g}\n")


def standardize(dataset: TimeSeriesDataset) -> TimeSeriesDataset:
    """Z-score every channel using mean/std of the train split (padding steps
    excluded), and apply the same transform to every split."""
    train = dataset.subset("train")
    if len(train) == 0:
        raise ValueError("standardize needs a non-empty train split")
    step_valid = np.arange(train.max_len)[None, :] < train.lengths[:, None]
    mask = step_valid[:, :, None]  # (n, T, 1)
    count = step_valid.sum() or 1
    mean = (train.x * mask).sum(axis=(0, 1)) / count
    var = (((train.x - mean) * mask) ** 2).sum(axis=(0, 1)) / count
    std = np.maximum(np.sqrt(var), 1e-8)

    x = (dataset.x - mean) / std
    # keep padding at exactly zero
    full_valid = np.arange(dataset.max_len)[None, :] < dataset.lengths[:, None]
    x *= full_valid[:, :, None]
    return replace(dataset, x=x, norm_mean=mean, norm_std=std)


def batchify(dataset: TimeSeriesDataset, batch_size: int, shuffle: bool = False,
             seed: int = 0) -> list[TimeSeriesBatch]:
    """Deterministic partition into batches; the trailing short batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    idx = np.arange(n)
    if shuffle:
        idx = np.random.default_rng(seed).permutation(n)
    batches = []
    for start in range(0, n, batch_size):
        sel = idx[start:start + batch_size]
        batches.append(TimeSeriesBatch(x=dataset.x[sel], lengths=dataset.lengths[sel],
                                       targets=dataset.targets[sel], indices=sel))
    return batches
