"""Dataset generation/ingestion, non-IID partitioning, and client splits.

Two heterogeneity schemes are provided: per-class Dirichlet shares and a
pathological scheme that caps the distinct classes per client. Each client's
shard is then split into a held-out test set, a tiny fixed-size quiz batch
that is never trained on, and the remaining study set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .errors import ContractViolation, DataFormatError, PartitionError
from .nn import MiniBatch


@dataclass
class Dataset:
    """A labelled pool of samples."""

    inputs: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,)
    class_count: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.labels.ndim != 1:
            raise ContractViolation("Dataset expects 2-D inputs and 1-D labels")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ContractViolation("Dataset inputs/labels length mismatch")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ContractViolation(f"labels out of range [0, {self.class_count})")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.class_count)


@dataclass
class PartitionPlan:
    """Sample-to-client assignment produced by one of the partitioners."""

    assignment: np.ndarray  # (n,) client index
    scheme: str
    n_clients: int
    seed: int

    def client_indices(self, client: int) -> np.ndarray:
        return np.nonzero(self.assignment == client)[0]

    def client_sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_clients)


@dataclass
class ClientDataset:
    """One client's study set, quiz batch, and test set."""

    study: Dataset
    quiz: MiniBatch
    test: Dataset
    label_inventory: tuple[int, ...]  # classes present in the study set


def generate_synthetic(
    class_count: int,
    input_dim: int,
    samples_per_class: int,
    cluster_spread: float,
    seed: int,
) -> Dataset:
    """Class-conditional Gaussian clusters around unit-norm mean directions."""
    if min(class_count, input_dim, samples_per_class) < 1 or cluster_spread < 0:
        raise ContractViolation("generate_synthetic arguments must be positive")
    gen = rngmod.stream(seed, rngmod.DATA)
    means = gen.standard_normal((class_count, input_dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    n = class_count * samples_per_class
    noise = gen.standard_normal((n, input_dim))
    labels = np.repeat(np.arange(class_count), samples_per_class)
    inputs = means[labels] + cluster_spread * noise
    return Dataset(inputs, labels, class_count)


@dataclass(frozen=True)
class DelimitedSchema:
    """Row layout of a delimited text dataset: d floats then one integer label."""

    input_dim: int
    class_count: int
    delimiter: str = ","


def load_delimited(path: str, schema: DelimitedSchema) -> Dataset:
    """Load a headerless delimited file; row order preserved."""
    rows: list[list[float]] = []
    labels: list[int] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(schema.delimiter)
            if len(parts) != schema.input_dim + 1:
                raise DataFormatError(
                    f"{path}: line {lineno}: expected {schema.input_dim + 1} fields, got {len(parts)}"
                )
            try:
                rows.append([float(v) for v in parts[:-1]])
                label = int(parts[-1])
            except ValueError as exc:
                raise DataFormatError(f"{path}: line {lineno}: {exc}") from exc
            if not 0 <= label < schema.class_count:
                raise DataFormatError(
                    f"{path}: line {lineno}: label {label} outside [0, {schema.class_count})"
                )
            labels.append(label)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    return Dataset(np.array(rows), np.array(labels), schema.class_count)


def _largest_remainder(shares: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` with proportions ``shares``."""
    raw = shares * total
    counts = np.floor(raw).astype(np.int64)
    remainder = total - counts.sum()
    if remainder > 0:
        # Ties broken by index so the result is deterministic.
        order = np.lexsort((np.arange(shares.shape[0]), -(raw - counts)))
        counts[order[:remainder]] += 1
    return counts


def partition_dirichlet(
    ds: Dataset,
    n_clients: int,
    beta: float,
    seed: int,
    min_per_client: int = 20,
    max_retries: int = 100,
) -> PartitionPlan:
    """Assign each class's samples by Dirichlet(beta) client shares.

    Redraws the whole plan (up to ``max_retries`` times) if any client ends
    up with fewer than ``min_per_client`` samples.
    """
    if n_clients < 2:
        raise ContractViolation("partition_dirichlet needs at least 2 clients")
    if beta <= 0:
        raise ContractViolation("beta must be > 0")
    for attempt in range(max_retries):
        gen = rngmod.stream(seed, rngmod.PARTITION, attempt)
        assignment = np.empty(len(ds), dtype=np.int64)
        for y in range(ds.class_count):
            idx = np.nonzero(ds.labels == y)[0]
            gen.shuffle(idx)
            shares = gen.dirichlet(np.full(n_clients, beta))
            counts = _largest_remainder(shares, idx.shape[0])
            start = 0
            for client, c in enumerate(counts):
                assignment[idx[start : start + c]] = client
                start += c
        sizes = np.bincount(assignment, minlength=n_clients)
        if sizes.min() >= min_per_client:
            return PartitionPlan(assignment, f"dirichlet(beta={beta})", n_clients, seed)
    raise PartitionError(
        f"dirichlet partition failed after {max_retries} redraws: some client "
        f"stayed below {min_per_client} samples (beta={beta}, N={n_clients})"
    )


def partition_pathological(
    ds: Dataset,
    n_clients: int,
    classes_per_client: int,
    seed: int,
    min_per_client: int = 20,
    max_retries: int = 100,
) -> PartitionPlan:
    """Give each client exactly ``classes_per_client`` classes, unequal shards.

    Class-to-client assignment greedily picks the least-used classes so every
    class is covered; shard sizes within a class come from a symmetric
    Dirichlet draw over its assigned clients, with at least one sample each.
    """
    C = ds.class_count
    if classes_per_client > C:
        raise ContractViolation("classes_per_client exceeds class count")
    if n_clients * classes_per_client < C:
        raise ContractViolation(
            "infeasible: N * classes_per_client < C leaves some class unassigned"
        )
    for attempt in range(max_retries):
        gen = rngmod.stream(seed, rngmod.PARTITION, attempt)
        usage = np.zeros(C, dtype=np.int64)
        client_classes: list[np.ndarray] = []
        for _ in range(n_clients):
            tiebreak = gen.permutation(C)
            order = np.lexsort((tiebreak, usage))
            chosen = order[:classes_per_client]
            usage[chosen] += 1
            client_classes.append(np.sort(chosen))

        assignment = np.empty(len(ds), dtype=np.int64)
        ok = True
        for y in range(C):
            holders = np.array([i for i in range(n_clients) if y in client_classes[i]])
            idx = np.nonzero(ds.labels == y)[0]
            gen.shuffle(idx)
            k = holders.shape[0]
            if idx.shape[0] < k:
                ok = False
                break
            shares = gen.dirichlet(np.ones(k))
            counts = _largest_remainder(shares, idx.shape[0] - k) + 1
            start = 0
            for client, c in zip(holders, counts):
                assignment[idx[start : start + c]] = client
                start += c
        if not ok:
            continue
        sizes = np.bincount(assignment, minlength=n_clients)
        if sizes.min() >= min_per_client:
            return PartitionPlan(
                assignment, f"pathological(cpc={classes_per_client})", n_clients, seed
            )
    raise PartitionError(
        f"pathological partition failed after {max_retries} redraws "
        f"(cpc={classes_per_client}, N={n_clients})"
    )


def split_client(
    ds_i: Dataset,
    test_fraction: float = 0.25,
    quiz_size: int = 10,
    seed: int = 0,
    client_index: int = 0,
) -> ClientDataset:
    """Split one client's shard into disjoint test / quiz / study sets.

    Test takes floor(n * test_fraction) samples (at least 1); the quiz is a
    fixed-size batch drawn stratified across the classes remaining in the
    training part; study is everything else.
    """
    n = len(ds_i)
    if n < quiz_size + 4:
        raise PartitionError(
            f"client {client_index}: {n} samples, need at least {quiz_size + 4}"
        )
    gen = rngmod.stream(seed, rngmod.SPLIT, client_index)
    perm = gen.permutation(n)
    test_n = max(1, int(n * test_fraction))
    test_idx = perm[:test_n]
    train_idx = perm[test_n:]
    if train_idx.shape[0] < quiz_size + 1:
        raise PartitionError(
            f"client {client_index}: only {train_idx.shape[0]} training samples "
            f"after the test split, need quiz_size + 1 = {quiz_size + 1}"
        )

    # Stratified quiz draw: cycle over the client's classes, one sample per
    # class per pass, so tiny quizzes still cover the label inventory.
    train_labels = ds_i.labels[train_idx]
    classes = np.unique(train_labels)
    groups = {int(y): list(train_idx[train_labels == y]) for y in classes}
    class_order = list(gen.permutation(classes))
    quiz_idx: list[int] = []
    while len(quiz_idx) < quiz_size:
        progressed = False
        for y in class_order:
            g = groups[int(y)]
            if g and len(quiz_idx) < quiz_size:
                quiz_idx.append(g.pop())
                progressed = True
        if not progressed:
            raise PartitionError(f"client {client_index}: ran out of quiz candidates")
    quiz_idx = np.array(quiz_idx, dtype=np.int64)
    study_idx = np.array(sorted(set(map(int, train_idx)) - set(map(int, quiz_idx))), dtype=np.int64)

    study = ds_i.subset(study_idx)
    quiz = MiniBatch(ds_i.inputs[quiz_idx], ds_i.labels[quiz_idx])
    test = ds_i.subset(test_idx)
    inventory = tuple(int(y) for y in np.unique(study.labels))
    return ClientDataset(study, quiz, test, inventory)
