"""Prototype-based comparison methods sharing the federation harness.

fedproto shares per-class mean features, feddistill per-class mean logits;
both aggregate count-weighted on the server and guide local training through
the same mse term the guiding vectors use. local-only trains on pure
cross-entropy with zero communication.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset
from .errors import ContractViolation
from .nn import (
    LossConfig,
    MiniBatch,
    ModelParams,
    ModelSpec,
    forward_batch,
    run_sgd_epoch,
    total_loss,
)

SPACES = ("logit", "feature")


@dataclass
class PrototypeSet:
    """Global per-class prototypes with the sample counts backing each row.

    Rows with count 0 are invalid and never enter the guiding loss.
    """

    vectors: np.ndarray  # (C, M)
    counts: np.ndarray  # (C,) int
    space: str

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.vectors.ndim != 2 or self.counts.shape != (self.vectors.shape[0],):
            raise ContractViolation("PrototypeSet shape mismatch")
        if self.space not in SPACES:
            raise ContractViolation(f"unknown space {self.space!r}")

    @property
    def valid(self) -> np.ndarray:
        return self.counts > 0

    @property
    def class_count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def empty_prototypes(class_count: int, dim: int, space: str) -> PrototypeSet:
    """All-invalid prototype set, the server state before any aggregation."""
    return PrototypeSet(
        np.zeros((class_count, dim)), np.zeros(class_count, dtype=np.int64), space
    )


def local_prototypes(
    spec: ModelSpec, params: ModelParams, study: Dataset, space: str
) -> tuple[np.ndarray, np.ndarray]:
    """Per-class mean of the guided outputs over a client's study samples.

    Absent classes get zero rows with count 0.
    """
    if len(study) == 0:
        raise ContractViolation("study set is empty")
    if space not in SPACES:
        raise ContractViolation(f"unknown space {space!r}")
    features, logits = forward_batch(spec, params, study.inputs)
    out = logits if space == "logit" else features
    C = study.class_count
    vectors = np.zeros((C, out.shape[1]))
    counts = np.zeros(C, dtype=np.int64)
    for y in np.unique(study.labels):
        rows = out[study.labels == y]
        vectors[y] = rows.mean(axis=0)
        counts[y] = rows.shape[0]
    return vectors, counts


def aggregate_prototypes(
    locals_: Sequence[tuple[np.ndarray, np.ndarray]], space: str
) -> PrototypeSet:
    """Count-weighted per-class mean across clients; rows nobody backs are invalid."""
    if not locals_:
        raise ContractViolation("aggregate_prototypes needs at least one client")
    shape = locals_[0][0].shape
    for vectors, counts in locals_:
        if vectors.shape != shape or counts.shape != (shape[0],):
            raise ContractViolation("prototype shapes disagree across clients")
    total = np.zeros(shape)
    total_counts = np.zeros(shape[0], dtype=np.int64)
    for vectors, counts in locals_:
        total += counts[:, None] * vectors
        total_counts += counts
    out = np.zeros(shape)
    nonzero = total_counts > 0
    out[nonzero] = total[nonzero] / total_counts[nonzero, None]
    return PrototypeSet(out, total_counts, space)


def prototype_loss_config(pset: PrototypeSet, weight: float = 1.0) -> LossConfig:
    """LossConfig guiding toward prototypes, skipping invalid class rows."""
    return LossConfig(
        use_ce=True,
        guide_vectors=pset.vectors,
        guide_space=pset.space,
        guide_weight=weight,
        guide_valid=pset.valid,
    )


def baseline_client_loss(
    spec: ModelSpec,
    params: ModelParams,
    batch: MiniBatch,
    pset: PrototypeSet,
    weight: float = 1.0,
) -> float:
    """Mean ce + mse(guided output, g^y), skipping samples with invalid rows."""
    return total_loss(spec, params, batch, prototype_loss_config(pset, weight))


def local_only_round(
    clients: Sequence[tuple[ModelSpec, ModelParams, Dataset]],
    eta_c: float,
    rngs: Sequence[np.random.Generator],
    batch_size: int = 10,
) -> list[ModelParams]:
    """One epoch of pure cross-entropy SGD per client; no communication."""
    cfg = LossConfig(use_ce=True)
    out = []
    for (spec, params, study), rng in zip(clients, rngs):
        out.append(
            run_sgd_epoch(spec, params, study.inputs, study.labels, cfg, eta_c, batch_size, rng)
        )
    return out
