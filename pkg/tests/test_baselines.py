"""Prototype-baseline tests: local prototypes, count-weighted aggregation,
the prototype-guided loss, and local-only rounds."""

import numpy as np
import pytest

from fedguide import nn
from fedguide.baselines import (
    PrototypeSet,
    aggregate_prototypes,
    baseline_client_loss,
    empty_prototypes,
    local_only_round,
    local_prototypes,
)
from fedguide.data import Dataset
from fedguide.errors import ContractViolation
from fedguide.guidance import GuidingVectorSet, client_total_loss
from fedguide.nn import LossConfig, MiniBatch, ModelSpec
from fedguide.rng import stream

from helpers import random_instance


def make_study(seed, n=12, c=3, d=4):
    rng = np.random.default_rng(seed)
    return Dataset(rng.standard_normal((n, d)), rng.integers(0, c, n), c)


def test_local_prototypes_single_sample_row():
    spec, params, batch, _ = random_instance(0)
    study = Dataset(batch.inputs[:1], np.array([1]), 3)
    vectors, counts = local_prototypes(spec, params, study, "feature")
    features, _ = nn.forward_batch(spec, params, study.inputs)
    assert np.allclose(vectors[1], features[0])
    assert counts.tolist() == [0, 1, 0]
    assert np.array_equal(vectors[0], np.zeros(spec.feature_dim))


def test_local_prototypes_duplicates_collapse():
    spec, params, batch, _ = random_instance(1)
    one = Dataset(batch.inputs[:1], np.array([0]), 3)
    two = Dataset(np.tile(batch.inputs[:1], (2, 1)), np.array([0, 0]), 3)
    v1, c1 = local_prototypes(spec, params, one, "logit")
    v2, c2 = local_prototypes(spec, params, two, "logit")
    assert np.allclose(v1[0], v2[0])
    assert c1[0] == 1 and c2[0] == 2


def test_aggregate_single_client_identity():
    spec, params, _, _ = random_instance(2)
    study = make_study(3)
    local = local_prototypes(spec, params, study, "feature")
    agg = aggregate_prototypes([local], "feature")
    assert np.allclose(agg.vectors[agg.valid], local[0][local[1] > 0])
    assert np.array_equal(agg.counts, local[1])


def test_aggregate_weighted_mean_by_hand():
    a = np.zeros((2, 3))
    b = np.zeros((2, 3))
    a[0] = 1.0
    b[0] = 5.0
    agg = aggregate_prototypes(
        [(a, np.array([1, 0])), (b, np.array([3, 0]))], "feature"
    )
    assert np.allclose(agg.vectors[0], (1 * 1.0 + 3 * 5.0) / 4)
    assert not agg.valid[1]


def test_aggregate_permutation_invariant():
    rng = np.random.default_rng(4)
    locals_ = [
        (rng.standard_normal((3, 4)), rng.integers(0, 5, 3)) for _ in range(4)
    ]
    agg1 = aggregate_prototypes(locals_, "feature")
    agg2 = aggregate_prototypes(list(reversed(locals_)), "feature")
    assert np.allclose(agg1.vectors, agg2.vectors)
    assert np.array_equal(agg1.counts, agg2.counts)


def test_aggregate_equal_counts_is_plain_mean():
    rng = np.random.default_rng(5)
    mats = [rng.standard_normal((3, 4)) for _ in range(3)]
    locals_ = [(m, np.full(3, 7)) for m in mats]
    agg = aggregate_prototypes(locals_, "logit")
    assert np.allclose(agg.vectors, np.mean(mats, axis=0))


def test_baseline_loss_all_invalid_is_pure_ce():
    spec, params, batch, _ = random_instance(6)
    pset = empty_prototypes(3, spec.feature_dim, "feature")
    ce = nn.total_loss(spec, params, batch, LossConfig(use_ce=True))
    assert baseline_client_loss(spec, params, batch, pset) == pytest.approx(ce, abs=1e-14)


def test_baseline_loss_matching_prototypes_is_pure_ce():
    spec, params, batch, _ = random_instance(7)
    single = MiniBatch(batch.inputs[:1], batch.labels[:1])
    features, _ = nn.forward_batch(spec, params, single.inputs)
    vectors = np.zeros((3, spec.feature_dim))
    vectors[int(single.labels[0])] = features[0]
    pset = PrototypeSet(vectors, np.array([1, 1, 1]), "feature")
    ce = nn.total_loss(spec, params, single, LossConfig(use_ce=True))
    assert baseline_client_loss(spec, params, single, pset) == pytest.approx(ce, abs=1e-14)


def test_baseline_loss_equals_guided_loss_when_all_valid():
    spec, params, batch, rng = random_instance(8)
    vectors = 0.3 * rng.standard_normal((3, spec.feature_dim))
    pset = PrototypeSet(vectors, np.ones(3, dtype=int), "feature")
    gset = GuidingVectorSet(vectors, "feature")
    assert baseline_client_loss(spec, params, batch, pset) == pytest.approx(
        client_total_loss(spec, params, batch, gset), abs=1e-14
    )


def test_local_only_round_deterministic_and_trains():
    clients = []
    for i in range(3):
        spec = nn.family_spec(i, 4, 5, 3, "tanh")
        params = nn.init_params(spec, stream(0, 3, i))
        clients.append((spec, params, make_study(i, n=24)))
    rngs1 = [stream(0, 6, i, 1) for i in range(3)]
    rngs2 = [stream(0, 6, i, 1) for i in range(3)]
    out1 = local_only_round(clients, 0.05, rngs1)
    out2 = local_only_round(clients, 0.05, rngs2)
    for p1, p2, (spec, before, _) in zip(out1, out2, clients):
        assert np.array_equal(p1.flat, p2.flat)
        assert not np.array_equal(p1.flat, before.flat)


def test_prototype_set_shape_validation():
    with pytest.raises(ContractViolation):
        PrototypeSet(np.zeros((2, 3)), np.zeros(3, dtype=int), "feature")
    with pytest.raises(ContractViolation):
        aggregate_prototypes(
            [(np.zeros((2, 3)), np.zeros(2, dtype=int)), (np.zeros((2, 4)), np.zeros(2, dtype=int))],
            "feature",
        )
