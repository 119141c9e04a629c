import numpy as np
import pytest

from vmresched.cluster import BOTH, ClusterState, InvalidParameter, VirtualMachine, total_fragments
from vmresched.datasets import generate_cluster, oracle_instance, toy_config
from vmresched.exact import MipInstance, exhaustive_optimum, pop_solve, solve_exact
from vmresched.objectives import MemFragFR, ObjectiveSpec
from vmresched.ordering import order_migrations
from vmresched.simulator import rollout_plan


def test_two_pm(two_pm):
    r = solve_exact(MipInstance(two_pm, 1))
    assert r.objective == 0 and r.optimal and r.ordering_feasible
    assert [(a.vm, a.dest_pm) for a in r.plan] == [(0, 1)]


def test_mnl_zero(two_pm):
    r = solve_exact(MipInstance(two_pm, 0))
    assert r.objective == total_fragments(two_pm, 16) and len(r.plan) == 0 and r.optimal


def test_rejects_non_core_objective(two_pm):
    with pytest.raises(InvalidParameter):
        MipInstance.from_state(two_pm, 1, ObjectiveSpec(MemFragFR(64)))
    with pytest.raises(InvalidParameter):
        MipInstance(two_pm, -1)


def test_capacity_headroom(two_pm):
    assert MipInstance(two_pm, 1).capacity_headroom().tolist() == [[0, 0], [1, 0]]


def test_exhaustive_hand_case():
    # free 14 and 18: moving the 2-core VM across leaves 16 and 16
    vms = [VirtualMachine(0, 2, 2, 1)]
    s = ClusterState([[16, 0], [18, 0]], [[64, 0], [64, 0]], vms, [0], [0])
    assert total_fragments(s, 16) == 16
    assert exhaustive_optimum(s, 1) == 0
    assert exhaustive_optimum(s, 0) == 16


def test_matches_exhaustive_on_tiny_instances():
    for seed in range(60):
        s, mnl = oracle_instance(seed)
        r = solve_exact(MipInstance(s, mnl))
        assert r.optimal
        assert r.objective == exhaustive_optimum(s, mnl)
        assert r.lower_bound <= r.objective
        # the returned plan realises the optimal assignment
        if r.ordering_feasible:
            final = rollout_plan(s, r.plan).final_state
            assert total_fragments(final, 16) == r.objective
        pm, numa = r.assignment
        assert all(numa[k] == BOTH for k in range(s.n_vms) if s.vm_w[k] == 2)
        assert int(((pm != s.vm_pm) | (numa != s.vm_numa)).sum()) <= mnl


def test_timeout_returns_incumbent():
    s = generate_cluster(toy_config(7))
    r = solve_exact(MipInstance(s, 4), time_limit=1e-4)
    assert r.lower_bound <= r.objective <= total_fragments(s, 16)
    full = solve_exact(MipInstance(s, 4))
    assert full.optimal and r.lower_bound <= full.objective <= r.objective


def test_swap_needs_relay():
    vms = [VirtualMachine(0, 8, 8, 1), VirtualMachine(1, 8, 8, 1)]
    s = ClusterState([[8, 0], [8, 0], [8, 0]], [[16, 0]] * 3, vms, [0, 1], [0, 0])
    target_pm, target_numa = np.array([1, 0]), np.array([0, 0])
    direct = order_migrations(s, target_pm, target_numa, allow_relay=False)
    assert not direct.feasible
    relayed = order_migrations(s, target_pm, target_numa, allow_relay=True)
    assert relayed.feasible and relayed.relays == 1 and len(relayed.actions) == 3
    assert list(relayed.final_state.vm_pm) == [1, 0]


def test_pop_single_partition_is_exact():
    s = generate_cluster(toy_config(3))
    plan, obj = pop_solve(MipInstance(s, 4), partitions=1)
    r = solve_exact(MipInstance(s, 4))
    assert obj == r.objective and plan == r.plan


def test_pop_never_beats_exact():
    for seed in range(20):
        s, mnl = oracle_instance(seed)
        best = solve_exact(MipInstance(s, mnl)).objective
        for parts in (2, 3):
            for mode in ("even", "proportional"):
                plan, obj = pop_solve(MipInstance(s, mnl), partitions=parts, seed=seed, mnl_split=mode)
                assert obj >= best
                assert total_fragments(rollout_plan(s, plan, mnl=max(len(plan), 1)).final_state, 16) == obj


def test_pop_validates_partitions(two_pm):
    with pytest.raises(InvalidParameter):
        pop_solve(MipInstance(two_pm, 1), partitions=0)
