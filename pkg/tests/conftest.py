import numpy as np
import pytest
from hypothesis import HealthCheck, assume, settings, strategies as st

from vmresched.cluster import ClusterState, VirtualMachine
from vmresched.datasets import GenerationError, GeneratorConfig, two_pm_example, generate_cluster

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def two_pm():
    return two_pm_example()


def small_config(seed, pm_count, vm_count, affinity=0.0):
    return GeneratorConfig(pm_count=pm_count, pm_profiles=[(32, 64), (64, 128), (88, 256)],
                           vm_count=vm_count, churn=0.5, seed=seed, affinity_ratio=affinity)


@st.composite
def clusters(draw, max_pms=6, max_vms=14):
    """Generated mappings, including double-NUMA VMs and anti-affinity pairs."""
    seed = draw(st.integers(0, 10**6))
    n = draw(st.integers(2, max_pms))
    m = draw(st.integers(1, min(max_vms, 3 * n)))
    aff = draw(st.sampled_from([0.0, 0.0, 0.15, 0.4]))
    try:
        return generate_cluster(small_config(seed, n, m, aff))
    except GenerationError:
        assume(False)


@st.composite
def raw_states(draw, max_pms=4, max_vms=8):
    """Hand-built states with arbitrary (non-type) demands, placed greedily first-fit."""
    n = draw(st.integers(1, max_pms))
    caps = [draw(st.integers(8, 48)) for _ in range(2 * n)]
    mems = [draw(st.integers(16, 96)) for _ in range(2 * n)]
    free_c = list(caps)
    free_m = list(mems)
    vms, pm, numa = [], [], []
    for k in range(draw(st.integers(0, max_vms))):
        w = draw(st.sampled_from([1, 1, 2]))
        cpu = w * draw(st.integers(1, 12))
        mem = w * draw(st.integers(0, 20))
        placed = False
        for i in range(n):
            slots = [(0,), (1,)] if w == 1 else [(0, 1)]
            for s in slots:
                if all(free_c[2 * i + j] >= cpu // w and free_m[2 * i + j] >= mem // w for j in s):
                    for j in s:
                        free_c[2 * i + j] -= cpu // w
                        free_m[2 * i + j] -= mem // w
                    vms.append(VirtualMachine(len(vms), cpu, mem, w))
                    pm.append(i)
                    numa.append(s[0] if w == 1 else 2)
                    placed = True
                    break
            if placed:
                break
    return ClusterState(np.array(caps).reshape(n, 2), np.array(mems).reshape(n, 2), vms, pm, numa)
