"""Learning-to-guide core: combined client loss, pseudo-train, the
closed-form guiding-vector gradient, and the server update.

Guiding vectors are one trainable M-vector per class, living either in logit
space (M = C) or in feature space (M = K). Clients never upload data-derived
statistics; they upload the exact gradient of their post-pseudo-train quiz
cross-entropy with respect to each guiding vector, which the server averages
and applies.

The gradient needs only first-order derivatives of the network. One SGD step
theta' = theta - eta_c * grad(ce + guide_mse) makes theta' an affine function
of each v^y, with d(theta')/d(v^y) = (2 eta_c / (M |B|)) * sum over batch
samples of class y of J_g(x', theta)^T, where J_g is the Jacobian of the
guided map at the pre-step parameters. Chaining with the quiz loss gradient
d at theta' turns each column contraction into one forward-mode JVP, so the
whole thing costs one reverse pass over the quiz plus one JVP pass over the
study batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import ContractViolation
from .nn import (
    LossConfig,
    MiniBatch,
    ModelParams,
    ModelSpec,
    grad_params,
    jvp_guided_batch,
    run_sgd_epoch,
    sgd_step,
    total_loss,
)

SPACES = ("logit", "feature")


@dataclass
class GuidingVectorSet:
    """Global trainable per-class vectors, tagged with the space they guide."""

    vectors: np.ndarray  # (C, M)
    space: str
    version: int = 0

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ContractViolation("guiding vectors must be a C x M matrix")
        if self.space not in SPACES:
            raise ContractViolation(f"unknown space {self.space!r}")
        if self.space == "logit" and self.vectors.shape[1] != self.vectors.shape[0]:
            raise ContractViolation("logit-space vectors must satisfy M == C")
        if not np.isfinite(self.vectors).all():
            raise ContractViolation("guiding vectors must be finite")

    @property
    def class_count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class GuidanceGradient:
    """Per-class guiding-vector gradients plus the class-presence mask.

    Rows for classes absent from the study batch are exactly zero and are the
    rows a client does not upload.
    """

    per_class: np.ndarray  # (C, M)
    present: np.ndarray  # (C,) bool

    def __post_init__(self):
        self.per_class = np.asarray(self.per_class, dtype=np.float64)
        self.present = np.asarray(self.present, dtype=bool)
        if self.per_class.ndim != 2 or self.present.shape != (self.per_class.shape[0],):
            raise ContractViolation("GuidanceGradient shape mismatch")
        if np.any(self.per_class[~self.present] != 0.0):
            raise ContractViolation("absent classes must carry exactly-zero rows")

    @property
    def uploaded_rows(self) -> int:
        return int(self.present.sum())


@dataclass(frozen=True)
class GuidanceConfig:
    """Hyperparameters of the guidance protocol."""

    eta_c: float
    eta_s: float
    space: str
    guiding_weight: float = 1.0  # fixed: ce and guide terms weighted equally
    quiz_size: int = 10

    def __post_init__(self):
        if self.eta_c <= 0 or self.eta_s <= 0:
            raise ContractViolation("learning rates must be positive")
        if self.space not in SPACES:
            raise ContractViolation(f"unknown space {self.space!r}")


def guided_loss_config(gset: GuidingVectorSet | None, weight: float = 1.0) -> LossConfig:
    """LossConfig for ce plus guidance toward ``gset`` (pure ce when None)."""
    if gset is None:
        return LossConfig(use_ce=True)
    return LossConfig(
        use_ce=True,
        guide_vectors=gset.vectors,
        guide_space=gset.space,
        guide_weight=weight,
    )


def client_total_loss(
    spec: ModelSpec,
    params: ModelParams,
    batch: MiniBatch,
    gset: GuidingVectorSet,
    weight: float = 1.0,
) -> float:
    """Mean over the batch of ce(logits, y) + weight * mse(guided_output, v^y)."""
    return total_loss(spec, params, batch, guided_loss_config(gset, weight))


def local_train_epoch(
    spec: ModelSpec,
    params: ModelParams,
    study: Dataset,
    gset: GuidingVectorSet | None,
    eta_c: float,
    rng: np.random.Generator,
    batch_size: int = 10,
    weight: float = 1.0,
) -> ModelParams:
    """One epoch of SGD on the study set with the combined loss.

    Passing ``gset=None`` trains on pure cross-entropy (the local-only and
    diagnostic mode). Runs floor(|study| / batch_size) steps.
    """
    if len(study) == 0:
        raise ContractViolation("study set is empty")
    cfg = guided_loss_config(gset, weight)
    return run_sgd_epoch(
        spec, params, study.inputs, study.labels, cfg, eta_c, batch_size, rng
    )


def pseudo_train(
    spec: ModelSpec,
    params: ModelParams,
    study_batch: MiniBatch,
    gset: GuidingVectorSet,
    eta_c: float,
    weight: float = 1.0,
) -> ModelParams:
    """One non-persisted SGD step on the combined loss; input params untouched."""
    g = grad_params(spec, params, study_batch, guided_loss_config(gset, weight))
    return sgd_step(params, g, eta_c)


def guidance_gradient(
    spec: ModelSpec,
    params: ModelParams,
    study_batch: MiniBatch,
    quiz: MiniBatch,
    gset: GuidingVectorSet,
    eta_c: float,
    weight: float = 1.0,
) -> GuidanceGradient:
    """Exact gradient of the mean quiz ce after pseudo-train w.r.t. each v^y.

    Stage 1 takes one reverse pass for the quiz ce gradient at the
    pseudo-trained parameters; stage 2 pushes that direction through the
    guided map's Jacobians at the pre-step parameters, one JVP per study-batch
    sample, summed per class. Classes absent from the study batch have no
    dependence path and get zero rows.
    """
    theta_prime = pseudo_train(spec, params, study_batch, gset, eta_c, weight)
    quiz_direction = grad_params(spec, theta_prime, quiz, LossConfig(use_ce=True))

    jvps = jvp_guided_batch(spec, params, study_batch.inputs, quiz_direction, gset.space)
    n = len(study_batch)
    m = gset.dim
    scale = 2.0 * eta_c * weight / (m * n)

    per_class = np.zeros_like(gset.vectors)
    present = np.zeros(gset.class_count, dtype=bool)
    for y in np.unique(study_batch.labels):
        rows = jvps[study_batch.labels == y]
        per_class[y] = scale * rows.sum(axis=0)
        present[y] = True
    return GuidanceGradient(per_class, present)


def server_update(
    gset: GuidingVectorSet,
    grads: list[GuidanceGradient],
    eta_s: float,
) -> GuidingVectorSet:
    """Average uploaded rows per class over the clients that have them, then
    take one gradient step. Classes no client reported stay untouched."""
    if not grads:
        raise ContractViolation("server_update needs at least one gradient")
    shape = gset.vectors.shape
    for g in grads:
        if g.per_class.shape != shape:
            raise ContractViolation(
                f"gradient shape {g.per_class.shape} does not match vectors {shape}"
            )
    vectors = gset.vectors.copy()
    for y in range(gset.class_count):
        rows = [g.per_class[y] for g in grads if g.present[y]]
        if rows:
            vectors[y] -= eta_s * (np.sum(rows, axis=0) / len(rows))
    return GuidingVectorSet(vectors, gset.space, gset.version + 1)


def init_guiding_vectors(
    class_count: int, dim: int, space: str, seed: int
) -> GuidingVectorSet:
    """Random initial vectors: 0.1 * standard normal, seeded."""
    if class_count < 1 or dim < 1:
        raise ContractViolation("class_count and dim must be >= 1")
    from . import rng as rngmod

    gen = rngmod.stream(seed, rngmod.GUIDE_INIT)
    return GuidingVectorSet(0.1 * gen.standard_normal((class_count, dim)), space, 0)


def add_privacy_noise(
    grad: GuidanceGradient, s: float, p: float, rng: np.random.Generator
) -> GuidanceGradient:
    """Perturb a fraction p of each present row's coordinates with N(0, s^2).

    The number of perturbed coordinates is round(p * M) per row; absent rows
    and the presence mask are untouched.
    """
    if s < 0 or not 0 <= p <= 1:
        raise ContractViolation("need s >= 0 and 0 <= p <= 1")
    m = grad.per_class.shape[1]
    k = int(round(p * m))
    if s == 0.0 or k == 0:
        return grad
    per_class = grad.per_class.copy()
    for y in np.nonzero(grad.present)[0]:
        coords = rng.choice(m, size=k, replace=False)
        per_class[y, coords] += rng.normal(0.0, s, size=k)
    return GuidanceGradient(per_class, grad.present.copy())
