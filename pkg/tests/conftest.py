"""Session-scoped training runs shared by the acceptance criteria.

The default-task runs (20 clients, 200 rounds, 3 seeds per variant) are the
expensive part of the suite, so each variant is trained once and reused by
every criterion that needs it.
"""

import dataclasses

import pytest

from fedguide.federation import RunConfig, run_training

ACCEPTANCE_SEEDS = (1, 2, 3)


def _train_variant(**overrides):
    results = []
    for seed in ACCEPTANCE_SEEDS:
        cfg = dataclasses.replace(RunConfig(), seed=seed, **overrides)
        results.append(run_training(cfg))
    return results


@pytest.fixture(scope="session")
def fedl2g_f_runs():
    return _train_variant(method="fedl2g-f")


@pytest.fixture(scope="session")
def fedl2g_l_runs():
    return _train_variant(method="fedl2g-l")


@pytest.fixture(scope="session")
def fedproto_runs():
    return _train_variant(method="fedproto")


@pytest.fixture(scope="session")
def local_only_runs():
    return _train_variant(method="local-only")


@pytest.fixture(scope="session")
def fedl2g_f_nowarmup_runs():
    return _train_variant(method="fedl2g-f", warmup=0)


@pytest.fixture(scope="session")
def fedl2g_f_noise_runs():
    return _train_variant(method="fedl2g-f", noise_s=0.05, noise_p=0.2)
