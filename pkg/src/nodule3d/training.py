"""Mini-batch training, evaluation, scan-level splits and metric logging."""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ops
from .checkpoint import save_checkpoint
from .errors import EmptyDataset
from .network import Model
from .optim import OptimizerState, nesterov_step
from .preprocess import CubeSample
from .seeding import substream

METRICS_COLUMNS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc", "wall_seconds")
BEST_CHECKPOINT = "best.ckpt"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 2
    epochs: int = 10
    seed: int = 0
    lr: float = 0.003
    momentum: float = 0.9
    train_scans: int = 720
    val_scans: int = 80
    test_scans: int = 88
    network: str = "canonical"
    batchnorm: bool = False
    checkpoint_dir: str = "."
    metrics_path: str = "metrics.csv"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.network not in ("canonical", "small"):
            raise ValueError(f"network must be 'canonical' or 'small', got {self.network!r}")


@dataclass
class CubeDataset:
    x: np.ndarray       # (n, edge, edge, edge) float32
    y: np.ndarray       # (n,) labels in {0, 1}
    series: np.ndarray  # (n,) source scan ids

    def __len__(self):
        return len(self.y)

    @classmethod
    def from_samples(cls, samples: Sequence[CubeSample]) -> "CubeDataset":
        if not samples:
            return cls(np.zeros((0, 1, 1, 1), np.float32), np.zeros(0, np.int64),
                       np.zeros(0, dtype=object))
        return cls(np.stack([s.data for s in samples]).astype(np.float32),
                   np.array([s.label for s in samples], dtype=np.int64),
                   np.array([s.source_series for s in samples], dtype=object))

    def subset(self, series_ids) -> "CubeDataset":
        keep = np.isin(self.series, list(series_ids))
        return CubeDataset(self.x[keep], self.y[keep], self.series[keep])


@dataclass(frozen=True)
class EpochMetrics:
    loss: float
    accuracy: float


def split_by_scan(series_ids: Sequence[str], counts: Sequence[int], seed: int) -> list[list[str]]:
    """Assign whole scans to splits (train, val, test).

    When fewer scans exist than requested, the counts are scaled down
    proportionally (largest remainder) so the ratios are kept.
    """
    unique = sorted(set(series_ids))
    order = substream(seed, "split").permutation(len(unique))
    unique = [unique[i] for i in order]
    counts = [int(c) for c in counts]
    total = sum(counts)
    if total > len(unique) and total > 0:
        exact = [c * len(unique) / total for c in counts]
        counts = [math.floor(e) for e in exact]
        spare = len(unique) - sum(counts)
        for i in sorted(range(len(exact)), key=lambda i: counts[i] - exact[i])[:spare]:
            counts[i] += 1
    out, start = [], 0
    for c in counts:
        out.append(unique[start:start + c])
        start += c
    return out


def _batches(n: int, batch_size: int, order: np.ndarray | None = None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield idx[start:start + batch_size]


def train_epoch(model: Model, dataset: CubeDataset, config: TrainConfig,
                state: OptimizerState, epoch: int = 0) -> EpochMetrics:
    """One shuffled pass: forward, cross-entropy, backward and a Nesterov step per batch."""
    n = len(dataset)
    if n == 0:
        raise EmptyDataset("training set is empty")
    order = substream(config.seed, "shuffle", epoch).permutation(n)
    total_loss, correct = 0.0, 0
    for idx in _batches(n, config.batch_size, order):
        logits = model.forward(dataset.x[idx], training=True)
        loss, grad = ops.bce_with_logits(logits, dataset.y[idx])
        grads = model.backward(grad)
        nesterov_step(model.params, grads, state)
        total_loss += loss * len(idx)
        correct += int(((ops.sigmoid(logits[:, 0]) >= 0.5) == (dataset.y[idx] == 1)).sum())
    return EpochMetrics(total_loss / n, correct / n)


def evaluate(model: Model, dataset: CubeDataset, batch_size: int = 2) -> EpochMetrics:
    """Mean cross-entropy and accuracy at threshold 0.5; parameters are untouched."""
    n = len(dataset)
    if n == 0:
        raise EmptyDataset("evaluation set is empty")
    total_loss, correct = 0.0, 0
    for idx in _batches(n, batch_size):
        logits = model.forward(dataset.x[idx], training=False)
        loss, _ = ops.bce_with_logits(logits, dataset.y[idx])
        total_loss += loss * len(idx)
        correct += int(((ops.sigmoid(logits[:, 0]) >= 0.5) == (dataset.y[idx] == 1)).sum())
    return EpochMetrics(total_loss / n, correct / n)


def log_metrics(path: str | os.PathLike, epoch: int, train: EpochMetrics,
                val: EpochMetrics | None, wall_seconds: float) -> None:
    """Append one row to the metrics CSV, writing the header for a new file."""
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    val = val or EpochMetrics(float("nan"), float("nan"))
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(METRICS_COLUMNS)
        writer.writerow([epoch, repr(train.loss), repr(train.accuracy), repr(val.loss),
                         repr(val.accuracy), f"{wall_seconds:.3f}"])


def init_metrics(path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerow(METRICS_COLUMNS)


def read_metrics(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in rows]


def fit(model: Model, state: OptimizerState, train: CubeDataset, val: CubeDataset,
        config: TrainConfig, out_dir: str | os.PathLike) -> list[dict]:
    """Train for ``config.epochs`` epochs, keeping the best-validation-loss checkpoint.

    The initial network is checkpointed first, so ``epochs = 0`` still
    leaves a usable ``best.ckpt``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / config.metrics_path
    best_path = out_dir / config.checkpoint_dir / BEST_CHECKPOINT
    init_metrics(metrics_path)
    save_checkpoint(best_path, model, state, 0)
    best = math.inf
    history = []
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        tr = train_epoch(model, train, config, state, epoch)
        va = evaluate(model, val, config.batch_size) if len(val) else None
        log_metrics(metrics_path, epoch, tr, va, time.perf_counter() - start)
        score = va.loss if va else tr.loss
        if score < best:
            best = score
            save_checkpoint(best_path, model, state, epoch)
        history.append({"epoch": epoch, "train": tr, "val": va})
    return history
