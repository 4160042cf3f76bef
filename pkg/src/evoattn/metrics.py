"""Evaluation metrics and score-table aggregation.

Besides RMSE/accuracy, this module aggregates model x dataset score tables
two ways: mean rank per model (best = 1, ties share the mean of their
positions) and the mean row-relative difference (per dataset, each score's
deviation from the row mean divided by the row mean, averaged over datasets).
It also measures representation tightness as the average Euclidean distance
of instances to their class centroid, and exports attention maps to CSV.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .kernels import softmax_masked
from .tensor import Tensor, no_grad


def rmse(preds: np.ndarray, targets: np.ndarray) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape or preds.size == 0:
        raise ValueError("rmse needs equal-length, non-empty inputs")
    return float(np.sqrt(np.mean((preds - targets) ** 2)))


def accuracy(pred_labels: np.ndarray, labels: np.ndarray) -> float:
    pred_labels = np.asarray(pred_labels)
    labels = np.asarray(labels)
    if pred_labels.shape != labels.shape or pred_labels.size == 0:
        raise ValueError("accuracy needs equal-length, non-empty inputs")
    return float(np.mean(pred_labels == labels))


@dataclass
class MetricsTable:
    """Rectangular score matrix: rows = datasets, columns = models."""

    row_labels: list[str]
    col_labels: list[str]
    values: np.ndarray
    lower_is_better: bool = True

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.row_labels), len(self.col_labels)):
            raise ValueError(f"table shape {self.values.shape} disagrees with "
                             f"{len(self.row_labels)} rows x {len(self.col_labels)} cols")
        if not np.isfinite(self.values).all():
            raise ValueError("score table has missing or non-finite cells")


def read_metrics_table(path, lower_is_better: bool = True) -> MetricsTable:
    """CSV with a header row of model names and a first column of dataset names."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and any(cell.strip() for cell in r)]
    if not rows:
        raise ValueError(f"{path}: empty table")
    col_labels = [c.strip() for c in rows[0][1:]]
    row_labels, values = [], []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(col_labels) + 1:
            raise ValueError(f"{path}:{i}: ragged row ({len(row)} fields, "
                             f"expected {len(col_labels) + 1})")
        row_labels.append(row[0].strip())
        try:
            values.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise ValueError(f"{path}:{i}: non-numeric score ({exc})") from None
    return MetricsTable(row_labels, col_labels, np.array(values),
                        lower_is_better=lower_is_better)


def write_metrics_table(table: MetricsTable, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("dataset," + ",".join(table.col_labels) + "\n")
        for label, row in zip(table.row_labels, table.values):
            fh.write(label + "," + ",".join(f"{v:.17g}" for v in row) + "\n")


def avg_relative_difference(table: MetricsTable) -> np.ndarray:
    """Per model: mean over datasets of (score - row mean) / row mean."""
    row_means = table.values.mean(axis=1, keepdims=True)
    if (row_means == 0.0).any():
        raise ValueError("a dataset row has zero mean score")
    return ((table.values - row_means) / row_means).mean(axis=0)


def avg_rank(table: MetricsTable) -> np.ndarray:
    """Per model: mean of its per-dataset ranks (best = 1; ties get the mean
    of the positions they span)."""
    scores = table.values if table.lower_is_better else -table.values
    ranks = np.vstack([rankdata(row, method="average") for row in scores])
    return ranks.mean(axis=0)


def avg_wcd(vectors: np.ndarray, labels: np.ndarray) -> float:
    """Average distance of each representation to its class centroid:
    (1/N) * sum over classes, sum over members, ||member - centroid||."""
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    labels = np.asarray(labels)
    if vectors.shape[0] != labels.shape[0]:
        raise ValueError("one label per representation vector is required")
    total = 0.0
    for cls in np.unique(labels):
        members = vectors[labels == cls]
        centroid = members.mean(axis=0)
        total += float(np.sqrt(((members - centroid) ** 2).sum(axis=1)).sum())
    return total / vectors.shape[0]


def export_attention(per_layer_logits, path, valid: np.ndarray | None = None) -> None:
    """Write one (K, N, N) logit map per layer as CSV rows
    layer,head,row,col,logit,probability; the probabilities are recomputed
    through the masked softmax so each (layer, head, row) sums to one."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("layer,head,row,col,logit,probability\n")
        for layer, logits in enumerate(per_layer_logits, start=1):
            arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
            if arr.ndim != 3:
                raise ValueError(f"layer {layer}: expected (K, N, N), got {arr.shape}")
            if not np.isfinite(arr).all():
                raise ValueError(f"layer {layer}: non-finite logits")
            with no_grad():
                probs = softmax_masked(Tensor(arr), valid).data
            k, n, _ = arr.shape
            for h in range(k):
                for i in range(n):
                    for j in range(n):
                        fh.write(f"{layer},{h},{i},{j},"
                                 f"{arr[h, i, j]:.17g},{probs[h, i, j]:.17g}\n")


def import_attention(path) -> tuple[np.ndarray, np.ndarray]:
    """Read an exported attention file back into dense (L, K, N, N) arrays of
    logits and probabilities."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["layer", "head", "row", "col", "logit", "probability"]:
            raise ValueError(f"{path}: unexpected header {header}")
        records = [(int(r[0]), int(r[1]), int(r[2]), int(r[3]), float(r[4]), float(r[5]))
                   for r in reader]
    n_layers = max(r[0] for r in records)
    k = max(r[1] for r in records) + 1
    n = max(r[2] for r in records) + 1
    logits = np.zeros((n_layers, k, n, n))
    probs = np.zeros((n_layers, k, n, n))
    for layer, head, i, j, logit, prob in records:
        logits[layer - 1, head, i, j] = logit
        probs[layer - 1, head, i, j] = prob
    return logits, probs
