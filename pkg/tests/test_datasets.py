import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vmresched.cluster import BOTH, ClusterState, MigrationAction, MigrationPlan, VirtualMachine, fragment_rate, total_fragments
from vmresched.datasets import (GenerationError, GeneratorConfig, MappingParseError, SchedulingError,
                                affinity_ratio, best_fit_initial, generate_cluster, generate_dataset,
                                load_dataset, load_mapping, load_plan, oracle_instance, record_to_state,
                                save_dataset, save_mapping, save_plan, split_dataset, state_to_record,
                                toy_config, workload)
from vmresched.cluster import InvalidParameter, ValidationError

TWO_PM_JSON = {
    "schema_version": 1,
    "pms": [{"id": 0, "numas": [{"cpu": 32, "mem": 64}, {"cpu": 32, "mem": 64}]},
            {"id": 1, "numas": [{"cpu": 32, "mem": 64}, {"cpu": 32, "mem": 64}]}],
    "vms": [{"id": 0, "type": "xlarge", "mem": 8, "pm": 0, "numa": 0},
            {"id": 1, "type": "4xlarge", "mem": 32, "pm": 0, "numa": 0},
            {"id": 2, "type": "4xlarge", "mem": 32, "pm": 0, "numa": 1},
            {"id": 3, "type": "4xlarge", "mem": 32, "pm": 0, "numa": 1},
            {"id": 4, "type": "2xlarge", "mem": 16, "pm": 1, "numa": 0},
            {"id": 5, "type": "xlarge", "mem": 8, "pm": 1, "numa": 0},
            {"id": 6, "type": "4xlarge", "mem": 32, "pm": 1, "numa": 1},
            {"id": 7, "type": "4xlarge", "mem": 32, "pm": 1, "numa": 1}],
}


def test_hand_encoded_two_pm(tmp_path, two_pm):
    p = tmp_path / "two_pm.json"
    p.write_text(json.dumps(TWO_PM_JSON))
    s = load_mapping(p)
    assert fragment_rate(s, 16) == 0.5
    assert s == two_pm


def test_round_trip(tmp_path):
    s = generate_cluster(GeneratorConfig(pm_count=6, affinity_ratio=0.1, seed=3))
    save_mapping(s, tmp_path / "m.json")
    back = load_mapping(tmp_path / "m.json")
    assert back == s
    assert [v.affinity_conflicts for v in back.vms] == [v.affinity_conflicts for v in s.vms]


def test_double_numa_record():
    rec = {"schema_version": 1, "pms": [{"id": 0, "numas": [{"cpu": 32, "mem": 64}] * 2}],
           "vms": [{"id": 0, "type": "8xlarge", "pm": 0, "numa": "both"}]}
    s = record_to_state(rec)
    assert s.placement(0) == (0, BOTH)
    assert state_to_record(s)["vms"][0]["numa"] == "both"


def test_over_capacity_rejected():
    rec = json.loads(json.dumps(TWO_PM_JSON))
    rec["vms"][0]["numa"] = 1
    with pytest.raises(ValidationError, match="cpu capacity"):
        record_to_state(rec)


def test_parse_errors_carry_context(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"schema_version": 1,\n "pms": [}')
    with pytest.raises(MappingParseError, match="line 2"):
        load_mapping(p)
    rec = json.loads(json.dumps(TWO_PM_JSON))
    rec["vms"][3]["pm"] = "zero"
    with pytest.raises(MappingParseError, match=r"vms\[3\]"):
        record_to_state(rec)
    rec = json.loads(json.dumps(TWO_PM_JSON))
    del rec["pms"][1]["numas"]
    with pytest.raises(MappingParseError, match="numas"):
        record_to_state(rec)


def test_plan_files(tmp_path):
    plan = MigrationPlan([MigrationAction(0, 1, 0), MigrationAction(3, 0), MigrationAction(2, 1, BOTH)])
    save_plan(plan, tmp_path / "p.json")
    assert load_plan(tmp_path / "p.json") == plan


def test_generator_deterministic():
    cfg = GeneratorConfig(pm_count=10, affinity_ratio=0.05, seed=11)
    assert generate_cluster(cfg) == generate_cluster(cfg)


def test_workload_ordering_and_tolerance():
    lo = [workload(generate_cluster(GeneratorConfig(pm_count=12, workload_level=0.2, seed=s)))
          for s in range(20)]
    hi = [workload(generate_cluster(GeneratorConfig(pm_count=12, workload_level=0.8, seed=s)))
          for s in range(20)]
    assert max(lo) < min(hi)
    assert all(abs(w - 0.2) <= 0.05 for w in lo) and all(abs(w - 0.8) <= 0.05 for w in hi)


def test_fixed_vm_count():
    s = generate_cluster(toy_config(5))
    assert s.n_pms == 8 and s.n_vms == 24


def test_type_ratios():
    s = generate_cluster(GeneratorConfig(pm_count=12, seed=2))
    assert all(v.mem == 2 * v.cpu for v in s.vms)
    wide = generate_cluster(GeneratorConfig(pm_count=12, seed=2, mem_ratio_max=8,
                                            mem_intensive_fraction=0.5))
    ratios = {v.mem // v.cpu for v in wide.vms}
    assert ratios <= set(range(2, 9)) and len(ratios) > 1


@pytest.mark.parametrize("target", [0.01, 0.05, 0.1])
def test_affinity_ratio_realised(target):
    got = [affinity_ratio(generate_cluster(GeneratorConfig(pm_count=20, affinity_ratio=target, seed=s)))
           for s in range(10)]
    assert abs(np.mean(got) - target) <= 0.2 * target


@given(st.integers(0, 10**6), st.integers(2, 10), st.floats(0.1, 0.85), st.sampled_from([0.0, 0.05, 0.2]))
def test_generator_always_valid(seed, n, level, aff):
    try:
        s = generate_cluster(GeneratorConfig(pm_count=n, workload_level=level, affinity_ratio=aff, seed=seed))
    except GenerationError:
        return
    assert s.violations() == []
    assert abs(workload(s) - level) <= 0.05


def test_infeasible_target_raises():
    with pytest.raises(GenerationError):
        generate_cluster(GeneratorConfig(pm_count=1, pm_profiles=[(8, 16)], vm_count=40,
                                         vm_type_mix={"4xlarge": 1.0}))
    with pytest.raises(InvalidParameter):
        GeneratorConfig(workload_level=1.2)


def test_best_fit_single_pm():
    s = best_fit_initial([((32, 64), (0, 0)), ((2, 64), (2, 64))], [VirtualMachine(0, 8, 8, 1)])
    assert s.placement(0) == (0, 0)


def test_best_fit_picks_fragment_zeroing_pm():
    pms = [((20, 64), (0, 0)), ((22, 64), (0, 0))]
    vm = VirtualMachine(0, 6, 8, 1)
    cap, mem = [[20, 0], [22, 0]], [[64, 0], [64, 0]]
    frags = [total_fragments(ClusterState(cap, mem, [vm], [i], [0]), 16) for i in (0, 1)]
    assert frags == [20, 4]
    assert best_fit_initial(pms, [vm]).placement(0) == (1, 0)
    # equal outcomes: lowest PM id
    assert best_fit_initial([((32, 64), (0, 0))] * 2, [vm]).placement(0) == (0, 0)


def test_best_fit_unplaceable():
    with pytest.raises(SchedulingError) as e:
        best_fit_initial([((4, 8), (4, 8))], [VirtualMachine(0, 2, 2, 1), VirtualMachine(1, 16, 8, 1)])
    assert e.value.vm.id == 1


def test_split_sizes():
    sizes = [len(p) for p in split_dataset(list(range(4400)))]
    assert sizes == [4000, 200, 200]
    assert [len(p) for p in split_dataset(list(range(10)), (0.8, 0.1, 0.1))] == [8, 1, 1]
    a = split_dataset(list(range(50)), seed=4)
    assert a == split_dataset(list(range(50)), seed=4)
    assert sorted(a[0] + a[1] + a[2]) == list(range(50))
    with pytest.raises(ValueError):
        split_dataset([])


def test_dataset_directory(tmp_path):
    maps = generate_dataset(toy_config(0), 3)
    save_dataset(maps, tmp_path)
    (tmp_path / "_generator.json").write_text("{}")
    assert load_dataset(tmp_path) == maps


def test_oracle_instances_are_tiny():
    for seed in range(50):
        s, mnl = oracle_instance(seed)
        assert s.n_pms <= 4 and s.n_vms <= 6 and 1 <= mnl <= 3
