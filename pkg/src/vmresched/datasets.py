"""Mapping files, synthetic cluster generation, best-fit initial placement and splits.

Mapping file (JSON)::

    {
      "schema_version": 1,
      "pms": [{"id": 0, "numas": [{"cpu": 44, "mem": 128}, {"cpu": 44, "mem": 128}]}, ...],
      "vms": [{"id": 0, "type": "xlarge", "cpu": 4, "mem": 8, "numa_count": 1,
               "pm": 0, "numa": 0, "affinity": [3]}, ...]
    }

``numa`` is 0, 1 or ``"both"``. ``type`` is optional; when present and
standard, ``cpu``/``numa_count`` may be omitted.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .cluster import (BOTH, VM_TYPES, ClusterState, InvalidParameter, ValidationError,
                      VirtualMachine, total_fragments)

SCHEMA_VERSION = 1


class MappingParseError(ValueError):
    pass


class SchedulingError(RuntimeError):
    def __init__(self, vm: VirtualMachine, message: str = ""):
        self.vm = vm
        super().__init__(message or f"VM {vm.id} ({vm.cpu} cpu, {vm.mem} GB) fits on no PM")


class GenerationError(RuntimeError):
    pass


def state_to_record(state: ClusterState) -> dict:
    pms = [{"id": i, "numas": [{"cpu": int(state.cap_cpu[i, j]), "mem": int(state.cap_mem[i, j])}
                               for j in (0, 1)]} for i in range(state.n_pms)]
    vms = []
    for k, vm in enumerate(state.vms):
        pm, numa = state.placement(k)
        rec = {"id": k, "cpu": vm.cpu, "mem": vm.mem, "numa_count": vm.numa_count,
               "pm": pm, "numa": "both" if numa == BOTH else numa,
               "affinity": sorted(vm.affinity_conflicts)}
        if vm.vm_type is not None:
            rec["type"] = vm.vm_type
        vms.append(rec)
    return {"schema_version": SCHEMA_VERSION, "pms": pms, "vms": vms}


def _field(obj: dict, key: str, where: str, kind=int, default=None):
    if key not in obj:
        if default is not None:
            return default
        raise MappingParseError(f"{where}: missing field {key!r}")
    value = obj[key]
    if kind is int and (not isinstance(value, int) or isinstance(value, bool)):
        raise MappingParseError(f"{where}.{key}: expected integer, got {value!r}")
    return value


def record_to_state(rec: dict, validate: bool = True) -> ClusterState:
    if not isinstance(rec, dict):
        raise MappingParseError("top level must be an object")
    version = rec.get("schema_version")
    if version != SCHEMA_VERSION:
        raise MappingParseError(f"schema_version: unsupported value {version!r}")
    pms = rec.get("pms")
    vms_rec = rec.get("vms")
    if not isinstance(pms, list) or not isinstance(vms_rec, list):
        raise MappingParseError("'pms' and 'vms' must be lists")
    cap_cpu, cap_mem = [], []
    for i, pm in enumerate(pms):
        where = f"pms[{i}]"
        if _field(pm, "id", where) != i:
            raise MappingParseError(f"{where}.id: expected {i}")
        numas = pm.get("numas")
        if not isinstance(numas, list) or len(numas) != 2:
            raise MappingParseError(f"{where}.numas: exactly two NUMA entries required")
        cap_cpu.append([_field(n, "cpu", f"{where}.numas[{j}]") for j, n in enumerate(numas)])
        cap_mem.append([_field(n, "mem", f"{where}.numas[{j}]") for j, n in enumerate(numas)])
    vms, vm_pm, vm_numa = [], [], []
    for k, v in enumerate(vms_rec):
        where = f"vms[{k}]"
        if _field(v, "id", where) != k:
            raise MappingParseError(f"{where}.id: expected {k}")
        vm_type = v.get("type")
        if vm_type is not None and vm_type in VM_TYPES:
            d_cpu, d_mem, d_w = VM_TYPES[vm_type]
        elif vm_type is not None and not isinstance(vm_type, str):
            raise MappingParseError(f"{where}.type: expected string")
        else:
            d_cpu = d_mem = d_w = None
        cpu = _field(v, "cpu", where, default=d_cpu)
        mem = _field(v, "mem", where, default=d_mem)
        w = _field(v, "numa_count", where, default=d_w)
        aff = v.get("affinity", [])
        if not isinstance(aff, list) or not all(isinstance(a, int) for a in aff):
            raise MappingParseError(f"{where}.affinity: expected list of VM ids")
        numa = v.get("numa")
        if numa == "both":
            numa = BOTH
        elif numa not in (0, 1):
            raise MappingParseError(f"{where}.numa: expected 0, 1 or 'both', got {numa!r}")
        try:
            vms.append(VirtualMachine(k, cpu, mem, w, vm_type, frozenset(aff)))
        except InvalidParameter as e:
            raise MappingParseError(f"{where}: {e}") from e
        vm_pm.append(_field(v, "pm", where))
        vm_numa.append(numa)
    return ClusterState(np.array(cap_cpu, dtype=np.int64).reshape(-1, 2),
                        np.array(cap_mem, dtype=np.int64).reshape(-1, 2),
                        vms, vm_pm, vm_numa, validate=validate)


def save_mapping(state: ClusterState, path) -> None:
    Path(path).write_text(json.dumps(state_to_record(state), indent=1))


def load_mapping(path, validate: bool = True) -> ClusterState:
    text = Path(path).read_text()
    try:
        rec = json.loads(text)
    except json.JSONDecodeError as e:
        raise MappingParseError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from e
    return record_to_state(rec, validate=validate)


def two_pm_example() -> ClusterState:
    """Two PMs with 12 and 20 free cores on their open NUMAs (FR 0.5).

    Moving VM 0 (4 cores) from PM 0 to PM 1 leaves 16 free on each: FR 0.
    """
    vms = [
        VirtualMachine.of_type(0, "xlarge"),
        VirtualMachine.of_type(1, "4xlarge"),
        VirtualMachine.of_type(2, "4xlarge"),
        VirtualMachine.of_type(3, "4xlarge"),
        VirtualMachine.of_type(4, "2xlarge"),
        VirtualMachine.of_type(5, "xlarge"),
        VirtualMachine.of_type(6, "4xlarge"),
        VirtualMachine.of_type(7, "4xlarge"),
    ]
    vm_pm = [0, 0, 0, 0, 1, 1, 1, 1]
    vm_numa = [0, 0, 1, 1, 0, 0, 1, 1]
    cap_cpu = [[32, 32], [32, 32]]
    cap_mem = [[64, 64], [64, 64]]
    return ClusterState(cap_cpu, cap_mem, vms, vm_pm, vm_numa)


# --- best-fit initial placement ---------------------------------------------------------

def _best_fit_slot(cap_cpu, cap_mem, free_cpu, free_mem, pm_hosts, vm: VirtualMachine,
                   x: int):
    """(pm, numa) minimising the PM's post-placement fragments; lowest ids win ties."""
    w = vm.numa_count
    c, m = vm.numa_cpu, vm.numa_mem
    fit = (free_cpu >= c) & (free_mem >= m)
    frag_now = free_cpu % x
    if w == 2:
        ok = fit.all(axis=1)
        post = ((free_cpu - c) % x).sum(axis=1)
        cost = np.where(ok, post, np.iinfo(np.int64).max)
        numa_of = np.full(len(ok), BOTH)
    else:
        post_numa = (free_cpu - c) % x  # (N, 2)
        other = frag_now[:, ::-1]
        cand = np.where(fit, post_numa + other, np.iinfo(np.int64).max)
        numa_of = np.argmin(cand, axis=1)  # lower NUMA on ties
        cost = cand[np.arange(len(cand)), numa_of]
        ok = fit.any(axis=1)
    if vm.affinity_conflicts:
        for i, hosted in enumerate(pm_hosts):
            if ok[i] and hosted & vm.affinity_conflicts:
                ok[i] = False
                cost[i] = np.iinfo(np.int64).max
    if not ok.any():
        return None
    i = int(np.argmin(cost))
    return i, int(numa_of[i])


def best_fit_initial(pms, vm_stream: Sequence[VirtualMachine], x: int = 16) -> ClusterState:
    """Place VMs one at a time on the feasible PM with the largest FR reduction.

    ``pms`` is either a sequence of ``((cpu0, mem0), (cpu1, mem1))`` NUMA
    capacities or a pair of ``(N, 2)`` capacity arrays.
    """
    if isinstance(pms, tuple) and len(pms) == 2 and np.ndim(pms[0]) == 2:
        cap_cpu, cap_mem = (np.array(a, dtype=np.int64) for a in pms)
    else:
        cap_cpu = np.array([[n[0] for n in pm] for pm in pms], dtype=np.int64).reshape(-1, 2)
        cap_mem = np.array([[n[1] for n in pm] for pm in pms], dtype=np.int64).reshape(-1, 2)
    free_cpu, free_mem = cap_cpu.copy(), cap_mem.copy()
    hosts = [set() for _ in range(len(cap_cpu))]
    vm_pm, vm_numa = [], []
    for vm in vm_stream:
        slot = _best_fit_slot(cap_cpu, cap_mem, free_cpu, free_mem, hosts, vm, x)
        if slot is None:
            raise SchedulingError(vm)
        i, j = slot
        for jj in ((0, 1) if j == BOTH else (j,)):
            free_cpu[i, jj] -= vm.numa_cpu
            free_mem[i, jj] -= vm.numa_mem
        hosts[i].add(vm.id)
        vm_pm.append(i)
        vm_numa.append(j)
    return ClusterState(cap_cpu, cap_mem, list(vm_stream), vm_pm, vm_numa)


# --- generator --------------------------------------------------------------------------

DEFAULT_TYPE_MIX = {"large": 0.25, "xlarge": 0.25, "2xlarge": 0.2, "4xlarge": 0.15,
                    "8xlarge": 0.1, "16xlarge": 0.05}


@dataclass
class GeneratorConfig:
    pm_count: int = 8
    # per-PM (cpu, mem) totals, split evenly over two NUMAs; drawn uniformly
    pm_profiles: list = field(default_factory=lambda: [(88, 256)])
    vm_type_mix: dict = field(default_factory=lambda: dict(DEFAULT_TYPE_MIX))
    workload_level: float = 0.7
    affinity_ratio: float = 0.0
    seed: int = 0
    vm_count: int | None = None  # fixed VM count instead of a workload target
    churn: float = 0.15  # overshoot per round (CPU fraction, or VM fraction with vm_count)
    churn_rounds: int = 2
    mem_ratio_max: int = 2  # cpu:mem ratio widened up to 1:mem_ratio_max for some VMs
    mem_intensive_fraction: float = 0.0
    x: int = 16

    def __post_init__(self):
        if not 0.0 < self.workload_level < 1.0:
            raise InvalidParameter("workload_level must lie in (0, 1)")
        if not 0.0 <= self.affinity_ratio < 1.0:
            raise InvalidParameter("affinity_ratio must lie in [0, 1)")
        if self.pm_count <= 0:
            raise InvalidParameter("pm_count must be positive")
        self.pm_profiles = [tuple(p) for p in self.pm_profiles]

    def to_dict(self) -> dict:
        return asdict(self)


class _Packer:
    """Incremental best-fit state used by the generator."""

    def __init__(self, cap_cpu, cap_mem, x):
        self.cap_cpu, self.cap_mem, self.x = cap_cpu, cap_mem, x
        self.free_cpu, self.free_mem = cap_cpu.copy(), cap_mem.copy()
        self.hosts = [set() for _ in range(len(cap_cpu))]
        self.place: dict[int, tuple[int, int]] = {}
        self.vms: dict[int, VirtualMachine] = {}

    def add(self, vm) -> bool:
        slot = _best_fit_slot(self.cap_cpu, self.cap_mem, self.free_cpu, self.free_mem,
                              self.hosts, vm, self.x)
        if slot is None:
            return False
        i, j = slot
        self._apply(vm, i, j, -1)
        return True

    def remove(self, vid):
        i, j = self.place[vid]
        self._apply(self.vms[vid], i, j, +1)

    def _apply(self, vm, i, j, sign):
        for jj in ((0, 1) if j == BOTH else (j,)):
            self.free_cpu[i, jj] += sign * vm.numa_cpu
            self.free_mem[i, jj] += sign * vm.numa_mem
        if sign < 0:
            self.hosts[i].add(vm.id)
            self.place[vm.id] = (i, j)
            self.vms[vm.id] = vm
        else:
            self.hosts[i].discard(vm.id)
            del self.place[vm.id]
            del self.vms[vm.id]

    @property
    def used_fraction(self) -> float:
        return 1.0 - self.free_cpu.sum() / self.cap_cpu.sum()


def generate_cluster(cfg: GeneratorConfig) -> ClusterState:
    """Fill a random cluster with best-fit arrivals (plus churn) to a target workload."""
    rng = np.random.default_rng(cfg.seed)
    prof = [cfg.pm_profiles[i] for i in rng.integers(len(cfg.pm_profiles), size=cfg.pm_count)]
    cap_cpu = np.array([[c // 2, c // 2] for c, _ in prof], dtype=np.int64)
    cap_mem = np.array([[m // 2, m // 2] for _, m in prof], dtype=np.int64)
    types = list(cfg.vm_type_mix)
    probs = np.array([cfg.vm_type_mix[t] for t in types], dtype=float)
    probs /= probs.sum()
    packer = _Packer(cap_cpu, cap_mem, cfg.x)
    total = int(cap_cpu.sum())
    next_id = 0
    tol = 0.05

    def sample_vm(vid):
        t = types[rng.choice(len(types), p=probs)]
        cpu, mem, w = VM_TYPES[t]
        if cfg.mem_intensive_fraction and rng.random() < cfg.mem_intensive_fraction:
            ratio = int(rng.integers(2, cfg.mem_ratio_max + 1))
            mem = cpu * ratio
        conflicts = frozenset()
        if cfg.affinity_ratio > 0 and packer.vms:
            existing = np.array(sorted(packer.vms))
            hit = rng.random(len(existing)) < cfg.affinity_ratio
            conflicts = frozenset(int(v) for v in existing[hit])
        return VirtualMachine(vid, cpu, mem, w, t, conflicts)

    def fill(target_used):
        nonlocal next_id
        failures = 0
        while packer.used_fraction < target_used and failures < 200:
            vm = sample_vm(next_id)
            if (total - packer.free_cpu.sum() + vm.cpu) / total > target_used + tol:
                failures += 1
                continue
            if packer.add(vm):
                for c in vm.affinity_conflicts:
                    other = packer.vms[c]
                    packer.vms[c] = VirtualMachine(other.id, other.cpu, other.mem,
                                                   other.numa_count, other.vm_type,
                                                   other.affinity_conflicts | {vm.id})
                next_id += 1
            else:
                failures += 1

    def fill_count(n, required):
        nonlocal next_id
        failures = 0
        while len(packer.vms) < n and failures < 500:
            vm = sample_vm(next_id)
            if packer.add(vm):
                for c in vm.affinity_conflicts:
                    other = packer.vms[c]
                    packer.vms[c] = VirtualMachine(other.id, other.cpu, other.mem,
                                                   other.numa_count, other.vm_type,
                                                   other.affinity_conflicts | {vm.id})
                next_id += 1
            else:
                failures += 1
        if len(packer.vms) < required:
            raise GenerationError(f"could only place {len(packer.vms)} of {required} VMs")

    def drop(vid):
        for c in packer.vms[vid].affinity_conflicts:
            if c in packer.vms:
                o = packer.vms[c]
                packer.vms[c] = VirtualMachine(o.id, o.cpu, o.mem, o.numa_count, o.vm_type,
                                               o.affinity_conflicts - {vid})
        packer.remove(vid)

    for _ in range(max(cfg.churn_rounds, 1)):
        # arrivals overshoot the target, then random exits bring it back and leave fragments
        if cfg.vm_count:
            fill_count(cfg.vm_count + int(round(cfg.churn * cfg.vm_count)), cfg.vm_count)
            while len(packer.vms) > cfg.vm_count:
                alive = sorted(packer.vms)
                drop(alive[int(rng.integers(len(alive)))])
        else:
            fill(min(cfg.workload_level + cfg.churn, 0.97))
            while packer.used_fraction > cfg.workload_level:
                used = total - int(packer.free_cpu.sum())
                alive = sorted(packer.vms)
                ok = [v for v in alive
                      if (used - packer.vms[v].cpu) / total >= cfg.workload_level - tol / 2]
                pool = ok or alive
                drop(pool[int(rng.integers(len(pool)))])
    if not cfg.vm_count and abs(packer.used_fraction - cfg.workload_level) > tol:
        raise GenerationError(f"realised workload {packer.used_fraction:.3f} misses target "
                              f"{cfg.workload_level} by more than {tol}")
    # renumber densely in arrival order
    order = sorted(packer.vms)
    new_id = {old: k for k, old in enumerate(order)}
    vms, vm_pm, vm_numa = [], [], []
    for old in order:
        v = packer.vms[old]
        vms.append(VirtualMachine(new_id[old], v.cpu, v.mem, v.numa_count, v.vm_type,
                                  frozenset(new_id[c] for c in v.affinity_conflicts)))
        i, j = packer.place[old]
        vm_pm.append(i)
        vm_numa.append(j)
    return ClusterState(cap_cpu, cap_mem, vms, vm_pm, vm_numa)


def workload(state: ClusterState) -> float:
    return 1.0 - state.free_cpu.sum() / state.cap_cpu.sum()


def affinity_ratio(state: ClusterState) -> float:
    """Average fraction of other VMs each VM conflicts with."""
    m = state.n_vms
    if m < 2:
        return 0.0
    return len(state.conflict_pairs) / (m * (m - 1))


def toy_config(seed: int = 0, **overrides) -> GeneratorConfig:
    """8 PMs, 24 single/double-NUMA VMs; the desk-scale training distribution."""
    base = dict(pm_count=8, pm_profiles=[(64, 128)], vm_count=24, churn=0.5, seed=seed,
                vm_type_mix={"large": 0.1, "xlarge": 0.2, "2xlarge": 0.3, "4xlarge": 0.25,
                             "8xlarge": 0.15})
    base.update(overrides)
    return GeneratorConfig(**base)


def oracle_instance(seed: int) -> tuple[ClusterState, int]:
    """Tiny instance (2-4 PMs, 3-6 VMs) and an MNL in 1..3, small enough for brute force."""
    rng = np.random.default_rng(seed)
    cfg = GeneratorConfig(pm_count=int(rng.integers(2, 5)), pm_profiles=[(32, 64), (64, 128)],
                          vm_count=int(rng.integers(3, 7)), churn=0.5, seed=seed,
                          affinity_ratio=0.2 if seed % 3 == 0 else 0.0)
    return generate_cluster(cfg), int(rng.integers(1, 4))


def generate_dataset(cfg: GeneratorConfig, count: int) -> list[ClusterState]:
    """``count`` mappings drawn with seeds ``cfg.seed, cfg.seed + 1, ...``."""
    out = []
    for i in range(count):
        d = cfg.to_dict()
        d["seed"] = cfg.seed + i
        out.append(generate_cluster(GeneratorConfig(**d)))
    return out


def split_dataset(mappings: Sequence, ratios=(0.909, 0.0455, 0.0455), seed: int = 0):
    """Disjoint seeded train/val/test split; val and test sizes are rounded, train takes the rest."""
    if len(mappings) == 0:
        raise ValueError("cannot split an empty dataset")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-6 or min(ratios) < 0:
        raise InvalidParameter(f"ratios must be three non-negative numbers summing to 1: {ratios}")
    n = len(mappings)
    n_val = int(round(n * ratios[1]))
    n_test = int(round(n * ratios[2]))
    n_train = n - n_val - n_test
    perm = np.random.default_rng(seed).permutation(n)
    pick = lambda idx: [mappings[i] for i in idx]
    return (pick(perm[:n_train]), pick(perm[n_train:n_train + n_val]),
            pick(perm[n_train + n_val:]))


def save_dataset(states: Sequence[ClusterState], directory) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, s in enumerate(states):
        p = d / f"mapping_{i:05d}.json"
        save_mapping(s, p)
        paths.append(p)
    return paths


def load_dataset(path) -> list[ClusterState]:
    """A single mapping file or a directory of ``*.json`` mappings (names starting with ``_`` skipped)."""
    p = Path(path)
    if p.is_dir():
        return [load_mapping(f) for f in sorted(p.glob("*.json")) if not f.name.startswith("_")]
    return [load_mapping(p)]


def describe(state: ClusterState, x: int = 16) -> dict:
    return {"pms": state.n_pms, "vms": state.n_vms, "workload": round(workload(state), 4),
            "fragments": total_fragments(state, x),
            "fr": round(total_fragments(state, x) / max(int(state.free_cpu.sum()), 1), 4),
            "affinity_ratio": round(affinity_ratio(state), 4)}


# --- plan files: {"schema_version": 1, "actions": [{"vm": 0, "dest_pm": 1, "dest_numa": 0}, ...]}

def plan_to_record(plan) -> dict:
    acts = []
    for a in plan:
        rec = {"vm": int(a.vm), "dest_pm": int(a.dest_pm)}
        if a.dest_numa is not None:
            rec["dest_numa"] = "both" if a.dest_numa == BOTH else int(a.dest_numa)
        acts.append(rec)
    return {"schema_version": SCHEMA_VERSION, "actions": acts}


def record_to_plan(rec: dict):
    from .cluster import MigrationAction, MigrationPlan
    if not isinstance(rec, dict) or not isinstance(rec.get("actions"), list):
        raise MappingParseError("plan record needs an 'actions' list")
    acts = []
    for i, a in enumerate(rec["actions"]):
        where = f"actions[{i}]"
        if not isinstance(a, dict):
            raise MappingParseError(f"{where}: expected an object, got {a!r}")
        numa = a.get("dest_numa")
        if numa == "both":
            numa = BOTH
        elif numa is not None and numa not in (0, 1):
            raise MappingParseError(f"{where}.dest_numa: expected 0, 1 or 'both', got {numa!r}")
        acts.append(MigrationAction(_field(a, "vm", where), _field(a, "dest_pm", where), numa))
    return MigrationPlan(acts)


def save_plan(plan, path) -> None:
    Path(path).write_text(json.dumps(plan_to_record(plan), indent=1))


def load_plan(path):
    try:
        rec = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise MappingParseError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from e
    return record_to_plan(rec)
