import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from oracles import randomize
from vmresched.datasets import generate_cluster, toy_config
from vmresched.features import NormStats
from vmresched.policy import PolicyConfig, TwoStagePolicy, save_checkpoint
from vmresched.risk import (best_of_k, clean_trajectory_bound, quantile_grid, threshold_probs,
                            tune_quantiles)

TINY = PolicyConfig(d_model=16, n_blocks=1, n_heads=2, d_ff=32, critic_hidden=16)


@pytest.fixture(scope="module")
def policy():
    states = [generate_cluster(toy_config(s)) for s in range(5)]
    return randomize(TwoStagePolicy(TINY, NormStats.fit(states)), 3)


@pytest.fixture(scope="module")
def mapping():
    return generate_cluster(toy_config(21))


probs = st.lists(st.one_of(st.just(0.0), st.floats(1e-6, 1.0)), min_size=1, max_size=20).filter(
    lambda p: sum(p) > 0)


def test_threshold_example():
    out = threshold_probs([0.1, 0.2, 0.3, 0.4], 0.5)
    # the median of the positive entries is 0.25
    assert np.allclose(out, [0, 0, 3 / 7, 4 / 7])


@given(probs)
def test_quantile_zero_is_identity(p):
    p = np.asarray(p)
    assert np.allclose(threshold_probs(p, 0.0), p / p.sum())


@given(probs, st.floats(0, 0.999))
def test_threshold_properties(p, q):
    p = np.asarray(p)
    out = threshold_probs(p, q)
    assert abs(out.sum() - 1) < 1e-12
    assert np.all(out[p == 0] == 0)
    assert out[np.argmax(p)] > 0
    kept = out > 0
    # survivors keep their relative odds
    assert np.allclose(out[kept] / out[kept].sum(), p[kept] / p[kept].sum())


def test_threshold_rejects_bad_quantile():
    for q in (-0.1, 1.0):
        with pytest.raises(ValueError):
            threshold_probs([0.5, 0.5], q)


def test_clean_trajectory_bound():
    a, b = clean_trajectory_bound(0.1, 10)
    assert a == pytest.approx(0.9 ** 10)
    assert b == pytest.approx(math.exp(-1))
    assert a <= b
    assert clean_trajectory_bound(0.0, 50) == (1.0, 1.0)


def test_best_of_one_is_a_single_sample(policy, mapping):
    r = best_of_k(mapping, policy, 1, seed=4, mnl=5)
    assert len(r.objectives) == 1 and r.objective == r.objectives[0]


def test_best_is_minimum_and_prefix_nested(policy, mapping):
    r4 = best_of_k(mapping, policy, 4, seed=7, mnl=5)
    r8 = best_of_k(mapping, policy, 8, seed=7, mnl=5)
    assert r8.objective == min(r8.objectives)
    assert r8.objectives[:4] == r4.objectives
    assert r8.objective <= r4.objective


def test_best_of_k_accepts_checkpoint_path(policy, mapping, tmp_path):
    path = tmp_path / "p.pt"
    save_checkpoint(policy, path)
    assert best_of_k(mapping, path, 3, seed=1, mnl=4).objectives == \
        best_of_k(mapping, policy, 3, seed=1, mnl=4).objectives


def test_best_of_k_rejects_zero(policy, mapping):
    with pytest.raises(ValueError):
        best_of_k(mapping, policy, 0)


def test_default_grid():
    g = quantile_grid()
    assert len(g) == 17 and g[0] == (0.0, 0.0)
    assert len(quantile_grid(include_untuned=False)) == 16


def test_tuning_single_pair_grid(policy, mapping):
    best, scores = tune_quantiles(policy, [mapping], grid=[(0.95, 0.98)], k=2, mnl=3)
    assert best == (0.95, 0.98) and list(scores) == [(0.95, 0.98)]


def test_tuning_never_worse_than_untuned(policy):
    val = [generate_cluster(toy_config(300 + s)) for s in range(3)]
    best, scores = tune_quantiles(policy, val, grid=quantile_grid((0.9, 0.99)), k=4, mnl=4)
    assert scores[best] <= scores[(0.0, 0.0)]
    assert scores[best] == min(scores.values())


def test_tuning_rejects_empty_validation(policy):
    with pytest.raises(ValueError):
        tune_quantiles(policy, [])
