"""Shared test utilities: independent finite-difference oracles and
random problem instances. The oracles only ever call forward/total_loss,
never the gradient code they check."""

from __future__ import annotations

import numpy as np

from fedguide import nn
from fedguide.guidance import GuidingVectorSet, pseudo_train
from fedguide.nn import LossConfig, MiniBatch, ModelParams, ModelSpec


def fd_grad_params(
    spec: ModelSpec,
    params: ModelParams,
    batch: MiniBatch,
    cfg: LossConfig,
    step: float = 1e-6,
) -> np.ndarray:
    """Central-difference gradient of total_loss w.r.t. every parameter."""
    out = np.zeros_like(params.flat)
    for j in range(out.shape[0]):
        hi, lo = params.copy(), params.copy()
        hi.flat[j] += step
        lo.flat[j] -= step
        out[j] = (
            nn.total_loss(spec, hi, batch, cfg) - nn.total_loss(spec, lo, batch, cfg)
        ) / (2 * step)
    return out


def fd_jvp(
    spec: ModelSpec,
    params: ModelParams,
    inputs: np.ndarray,
    direction: np.ndarray,
    space: str,
    step: float = 1e-6,
) -> np.ndarray:
    """Central-difference directional derivative of the guided map."""
    hi = nn.params_from_flat(spec, params.flat + step * direction)
    lo = nn.params_from_flat(spec, params.flat - step * direction)
    f_hi, l_hi = nn.forward_batch(spec, hi, inputs)
    f_lo, l_lo = nn.forward_batch(spec, lo, inputs)
    if space == "feature":
        return (f_hi - f_lo) / (2 * step)
    return (l_hi - l_lo) / (2 * step)


def quiz_ce_after_pseudo(
    spec: ModelSpec,
    params: ModelParams,
    study_batch: MiniBatch,
    quiz: MiniBatch,
    gset: GuidingVectorSet,
    eta_c: float,
) -> float:
    """The composed map the guidance gradient differentiates: pseudo-train,
    then mean quiz cross-entropy."""
    theta_prime = pseudo_train(spec, params, study_batch, gset, eta_c)
    return nn.total_loss(spec, theta_prime, quiz, LossConfig(use_ce=True))


def fd_guidance_gradient(
    spec: ModelSpec,
    params: ModelParams,
    study_batch: MiniBatch,
    quiz: MiniBatch,
    gset: GuidingVectorSet,
    eta_c: float,
    step: float = 1e-5,
) -> np.ndarray:
    """Central differences of the composed map over every v^y coordinate."""
    C, M = gset.vectors.shape
    out = np.zeros((C, M))
    for y in range(C):
        for m in range(M):
            hi = GuidingVectorSet(gset.vectors.copy(), gset.space)
            hi.vectors[y, m] += step
            lo = GuidingVectorSet(gset.vectors.copy(), gset.space)
            lo.vectors[y, m] -= step
            out[y, m] = (
                quiz_ce_after_pseudo(spec, params, study_batch, quiz, hi, eta_c)
                - quiz_ce_after_pseudo(spec, params, study_batch, quiz, lo, eta_c)
            ) / (2 * step)
    return out


def rel_error(analytic: np.ndarray, reference: np.ndarray) -> float:
    """Max absolute deviation normalized by the reference's largest entry."""
    scale = max(np.abs(reference).max(), 1e-12)
    return float(np.abs(analytic - reference).max() / scale)


def random_instance(seed: int, class_count: int = 3, feature_dim: int = 5, smooth: bool = True):
    """Seeded tiny net (< 500 params) with a batch; tanh keeps it smooth for
    finite differences."""
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(1, 4))
    widths = tuple(int(rng.integers(3, 9)) for _ in range(depth))
    spec = ModelSpec(4, widths, feature_dim, class_count, "tanh" if smooth else "relu")
    assert nn.param_count(spec) <= 500
    params = nn.init_params(spec, rng)
    n = int(rng.integers(3, 9))
    batch = MiniBatch(rng.standard_normal((n, 4)), rng.integers(0, class_count, n))
    return spec, params, batch, rng
