"""Evaluation, loss-increase tracking, communication-byte accounting,
convergence detection, and vector-separability diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import ClientDataset
from .errors import ContractViolation
from .nn import LossConfig, MiniBatch, ModelParams, ModelSpec, forward_batch, total_loss

BYTES_PER_VALUE = 4  # transmitted reals and class indices priced as float32/int32


@dataclass
class RoundMetrics:
    """Everything recorded about one communication round."""

    round_index: int
    accuracy: float
    per_client_accuracy: np.ndarray
    mean_ce: float
    loss_increase: float
    upload_bytes: int
    download_bytes: int
    grad_norm_sq: float
    n_participants: int
    upload_rows: int
    wall_time: float = 0.0


def evaluate(
    clients: Sequence[tuple[ModelSpec, ModelParams, ClientDataset]],
) -> tuple[float, np.ndarray, float]:
    """Test accuracy and study-set ce across clients.

    Returns (aggregate accuracy, per-client accuracies, mean study ce).
    Aggregate accuracy is sample-weighted: total correct over total test
    samples. The ce figure is the unweighted mean over clients of each
    client's mean study-set cross-entropy.
    """
    correct = 0
    total = 0
    per_client = np.zeros(len(clients))
    ce_values = np.zeros(len(clients))
    for i, (spec, params, data) in enumerate(clients):
        if len(data.test) == 0:
            raise ContractViolation(f"client {i} has an empty test set")
        _, logits = forward_batch(spec, params, data.test.inputs)
        pred = logits.argmax(axis=1)
        hits = int((pred == data.test.labels).sum())
        per_client[i] = hits / len(data.test)
        correct += hits
        total += len(data.test)
        study_batch = MiniBatch(data.study.inputs, data.study.labels)
        ce_values[i] = total_loss(spec, params, study_batch, LossConfig(use_ce=True))
    return correct / total, per_client, float(ce_values.mean())


def loss_increase(history: Sequence[float]) -> np.ndarray:
    """Per-round rise of the ce history above its previous minimum.

    Entry t is max(0, history[t] - min(history[:t])); the first entry is 0.
    """
    if len(history) == 0:
        raise ContractViolation("loss_increase needs a nonempty history")
    out = np.zeros(len(history))
    running_min = history[0]
    for t in range(1, len(history)):
        out[t] = max(0.0, history[t] - running_min)
        running_min = min(running_min, history[t])
    return out


def account_bytes(
    n_participants: int,
    upload_rows: int,
    class_count: int,
    vector_dim: int,
    method: str,
) -> tuple[int, int]:
    """Bytes moved in one round under the 4-bytes-per-value wire convention.

    Uploads carry only the rows present on each client: M values plus one
    class index per row. Downloads broadcast the full C x M payload to every
    participant. The formula is identical for all vector-sharing methods, so
    byte traces match across methods whenever the participation and
    class-presence traces match; local-only moves nothing.
    """
    if method == "local-only":
        return 0, 0
    upload = upload_rows * (vector_dim * BYTES_PER_VALUE + BYTES_PER_VALUE)
    download = n_participants * class_count * vector_dim * BYTES_PER_VALUE
    return upload, download


def convergence_round(
    accuracy_history: Sequence[float], window: int = 20, tol: float = 0.002
) -> int:
    """First 1-based round whose next-window max improves by < tol; the last
    round if that never happens."""
    n = len(accuracy_history)
    if n < window:
        raise ContractViolation(f"history length {n} is shorter than window {window}")
    acc = np.asarray(accuracy_history, dtype=np.float64)
    for t in range(window, n - window + 1):
        current = acc[t - window : t].max()
        upcoming = acc[t : t + window].max()
        if upcoming - current < tol:
            return t
    return n


def separability_stats(vectors_or_set) -> tuple[float, float]:
    """Min and mean pairwise Euclidean distance over the valid class rows.

    Accepts a raw (C, M) matrix, a guiding-vector set, or a prototype set
    (whose count-0 rows are skipped). Needs at least two valid rows.
    """
    counts = getattr(vectors_or_set, "counts", None)
    vectors = getattr(vectors_or_set, "vectors", vectors_or_set)
    vectors = np.asarray(vectors, dtype=np.float64)
    if counts is not None:
        vectors = vectors[np.asarray(counts) > 0]
    if vectors.ndim != 2 or vectors.shape[0] < 2:
        raise ContractViolation("separability_stats needs at least 2 valid rows")
    diffs = vectors[:, None, :] - vectors[None, :, :]
    dist = np.sqrt((diffs**2).sum(axis=2))
    iu = np.triu_indices(vectors.shape[0], k=1)
    pairwise = dist[iu]
    return float(pairwise.min()), float(pairwise.mean())


def mean_row_norm(vectors_or_set) -> float:
    """Mean Euclidean norm of the valid rows; used to normalize separability."""
    counts = getattr(vectors_or_set, "counts", None)
    vectors = getattr(vectors_or_set, "vectors", vectors_or_set)
    vectors = np.asarray(vectors, dtype=np.float64)
    if counts is not None:
        vectors = vectors[np.asarray(counts) > 0]
    return float(np.linalg.norm(vectors, axis=1).mean())
