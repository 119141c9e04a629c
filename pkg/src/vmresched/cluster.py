"""Domain types for PMs, NUMA nodes, VMs and placements.

All resource bookkeeping is integer. A :class:`ClusterState` is immutable once
built; :func:`apply_migration` returns a new state that shares every array it
does not need to touch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

BOTH = 2  # placement marker for a double-NUMA VM

# name -> (cpu cores, memory GB, numa count)
VM_TYPES: dict[str, tuple[int, int, int]] = {
    "large": (2, 4, 1),
    "xlarge": (4, 8, 1),
    "2xlarge": (8, 16, 1),
    "4xlarge": (16, 32, 1),
    "8xlarge": (32, 64, 2),
    "16xlarge": (64, 128, 2),
    "22xlarge": (88, 176, 2),
}

CONSTRAINTS = ("cpu", "memory", "numa_shape", "affinity", "noop")


class InvalidParameter(ValueError):
    pass


class InfeasibleMigration(Exception):
    """A migration violates one or more placement constraints.

    ``constraints`` lists every violated name from :data:`CONSTRAINTS`;
    ``constraint`` is the first of them.
    """

    def __init__(self, constraints: Sequence[str], message: str = ""):
        self.constraints = tuple(constraints)
        self.constraint = self.constraints[0]
        super().__init__(message or f"infeasible migration: {', '.join(self.constraints)}")


class ValidationError(ValueError):
    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


def fragment_of_numa(free_cpu: int, x: int) -> int:
    """Free cores on one NUMA that an additional ``x``-core VM cannot use."""
    if x <= 0:
        raise InvalidParameter(f"fragment size X must be positive, got {x}")
    if free_cpu < 0:
        raise InvalidParameter(f"free cpu must be non-negative, got {free_cpu}")
    return free_cpu % x


@dataclass(frozen=True)
class NumaState:
    capacity_cpu: int
    capacity_mem: int
    free_cpu: int
    free_mem: int

    def __post_init__(self):
        if not 0 <= self.free_cpu <= self.capacity_cpu:
            raise InvalidParameter(f"free_cpu {self.free_cpu} outside [0, {self.capacity_cpu}]")
        if not 0 <= self.free_mem <= self.capacity_mem:
            raise InvalidParameter(f"free_mem {self.free_mem} outside [0, {self.capacity_mem}]")


@dataclass(frozen=True)
class PhysicalMachine:
    id: int
    numas: tuple[NumaState, NumaState]
    hosted: tuple[tuple[int, int], ...] = ()  # (vm id, numa index or BOTH)


@dataclass(frozen=True)
class VirtualMachine:
    id: int
    cpu: int
    mem: int
    numa_count: int = 1
    vm_type: str | None = None
    affinity_conflicts: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.numa_count not in (1, 2):
            raise InvalidParameter(f"VM {self.id}: numa_count must be 1 or 2")
        if self.cpu <= 0 or self.mem < 0:
            raise InvalidParameter(f"VM {self.id}: non-positive demand")
        if self.cpu % self.numa_count or self.mem % self.numa_count:
            raise InvalidParameter(f"VM {self.id}: demand not divisible by numa_count")
        if self.vm_type is not None and self.vm_type in VM_TYPES:
            cpu, mem, w = VM_TYPES[self.vm_type]
            if (self.cpu, self.numa_count) != (cpu, w) or self.mem < mem:
                raise InvalidParameter(f"VM {self.id}: fields disagree with type {self.vm_type}")
        object.__setattr__(self, "affinity_conflicts", frozenset(self.affinity_conflicts))

    @classmethod
    def of_type(cls, id: int, vm_type: str, affinity_conflicts: Iterable[int] = (),
                mem: int | None = None) -> "VirtualMachine":
        cpu, default_mem, w = VM_TYPES[vm_type]
        return cls(id, cpu, default_mem if mem is None else mem, w, vm_type,
                   frozenset(affinity_conflicts))

    @property
    def numa_cpu(self) -> int:
        return self.cpu // self.numa_count

    @property
    def numa_mem(self) -> int:
        return self.mem // self.numa_count


@dataclass(frozen=True)
class MigrationAction:
    """Move VM ``vm`` to PM ``dest_pm``.

    ``dest_numa`` is optional; when ``None`` the simulator picks the NUMA.
    """

    vm: int
    dest_pm: int
    dest_numa: int | None = None


@dataclass(frozen=True)
class MigrationPlan:
    actions: tuple[MigrationAction, ...] = ()
    mnl: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))
        if self.mnl is not None and len(self.actions) > self.mnl:
            raise InvalidParameter(f"plan has {len(self.actions)} actions, limit is {self.mnl}")

    def __len__(self):
        return len(self.actions)

    def __iter__(self):
        return iter(self.actions)

    def __getitem__(self, i):
        return self.actions[i]


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class ClusterState:
    """Full VM -> (PM, NUMA) assignment plus per-NUMA free resources.

    PM and VM ids are their positions. ``vm_numa`` holds 0, 1 or :data:`BOTH`.
    """

    __slots__ = ("cap_cpu", "cap_mem", "vms", "vm_cpu", "vm_mem", "vm_w",
                 "vm_pm", "vm_numa", "free_cpu", "free_mem", "conflict_pairs")

    def __init__(self, cap_cpu, cap_mem, vms: Sequence[VirtualMachine], vm_pm, vm_numa,
                 validate: bool = True):
        self.cap_cpu = _readonly(np.array(cap_cpu, dtype=np.int64).reshape(-1, 2))
        self.cap_mem = _readonly(np.array(cap_mem, dtype=np.int64).reshape(-1, 2))
        self.vms = tuple(vms)
        for k, vm in enumerate(self.vms):
            if vm.id != k:
                raise InvalidParameter(f"VM at position {k} has id {vm.id}")
        m = len(self.vms)
        self.vm_cpu = _readonly(np.array([v.cpu for v in self.vms], dtype=np.int64).reshape(m))
        self.vm_mem = _readonly(np.array([v.mem for v in self.vms], dtype=np.int64).reshape(m))
        self.vm_w = _readonly(np.array([v.numa_count for v in self.vms], dtype=np.int64).reshape(m))
        self.vm_pm = _readonly(np.array(vm_pm, dtype=np.int64).reshape(m))
        self.vm_numa = _readonly(np.array(vm_numa, dtype=np.int64).reshape(m))
        pairs = sorted({(a, b) for a, v in enumerate(self.vms) for b in v.affinity_conflicts
                        if b != a} | {(b, a) for a, v in enumerate(self.vms)
                                      for b in v.affinity_conflicts if b != a})
        self.conflict_pairs = _readonly(np.array(pairs, dtype=np.int64).reshape(-1, 2))
        if validate:
            problems = self.violations()
            if problems:
                raise ValidationError(problems)
        self.free_cpu, self.free_mem = self._compute_free()

    @classmethod
    def _derived(cls, base: "ClusterState", vm_pm, vm_numa, free_cpu, free_mem) -> "ClusterState":
        new = object.__new__(cls)
        for name in ("cap_cpu", "cap_mem", "vms", "vm_cpu", "vm_mem", "vm_w", "conflict_pairs"):
            object.__setattr__(new, name, getattr(base, name))
        new.vm_pm = _readonly(vm_pm)
        new.vm_numa = _readonly(vm_numa)
        new.free_cpu = _readonly(free_cpu)
        new.free_mem = _readonly(free_mem)
        return new

    def with_placement(self, vm_pm, vm_numa, validate: bool = True) -> "ClusterState":
        return ClusterState(self.cap_cpu, self.cap_mem, self.vms, vm_pm, vm_numa, validate)

    def _usage(self):
        n = len(self.cap_cpu)
        used_cpu = np.zeros((n, 2), dtype=np.int64)
        used_mem = np.zeros((n, 2), dtype=np.int64)
        if len(self.vms) == 0:
            return used_cpu, used_mem
        per_cpu = self.vm_cpu // self.vm_w
        per_mem = self.vm_mem // self.vm_w
        pm = np.clip(self.vm_pm, 0, max(n - 1, 0))
        for j in (0, 1):
            on = (self.vm_numa == j) | (self.vm_numa == BOTH)
            np.add.at(used_cpu[:, j], pm[on], per_cpu[on])
            np.add.at(used_mem[:, j], pm[on], per_mem[on])
        return used_cpu, used_mem

    def _compute_free(self):
        used_cpu, used_mem = self._usage()
        return _readonly(self.cap_cpu - used_cpu), _readonly(self.cap_mem - used_mem)

    def violations(self) -> list[str]:
        """Every constraint violation in this state, as readable strings."""
        out = []
        n = len(self.cap_cpu)
        if (self.cap_cpu < 0).any() or (self.cap_mem < 0).any():
            out.append("placement: negative NUMA capacity")
        for k in range(len(self.vms)):
            p, j, w = int(self.vm_pm[k]), int(self.vm_numa[k]), int(self.vm_w[k])
            if not 0 <= p < n:
                out.append(f"placement: VM {k} on unknown PM {p}")
            elif w == 2 and j != BOTH:
                out.append(f"numa_shape: double-NUMA VM {k} placed on a single NUMA")
            elif w == 1 and j not in (0, 1):
                out.append(f"numa_shape: single-NUMA VM {k} has NUMA {j}")
            for c in self.vms[k].affinity_conflicts:
                if not 0 <= c < len(self.vms):
                    out.append(f"affinity: VM {k} conflicts with unknown VM {c}")
        if out:
            return out
        used_cpu, used_mem = self._usage()
        for i, j in zip(*np.nonzero(used_cpu > self.cap_cpu)):
            out.append(f"cpu capacity: PM {i} NUMA {j} uses {used_cpu[i, j]} of {self.cap_cpu[i, j]}")
        for i, j in zip(*np.nonzero(used_mem > self.cap_mem)):
            out.append(f"memory capacity: PM {i} NUMA {j} uses {used_mem[i, j]} of {self.cap_mem[i, j]}")
        for a, b in self.conflict_pairs:
            if a < b and self.vm_pm[a] == self.vm_pm[b]:
                out.append(f"affinity: VMs {a} and {b} share PM {self.vm_pm[a]}")
        return out

    @property
    def n_pms(self) -> int:
        return len(self.cap_cpu)

    @property
    def n_vms(self) -> int:
        return len(self.vms)

    def placement(self, vm: int) -> tuple[int, int]:
        return int(self.vm_pm[vm]), int(self.vm_numa[vm])

    def hosted_on(self, pm: int) -> np.ndarray:
        return np.flatnonzero(self.vm_pm == pm)

    def pm(self, i: int) -> PhysicalMachine:
        numas = tuple(NumaState(int(self.cap_cpu[i, j]), int(self.cap_mem[i, j]),
                                int(self.free_cpu[i, j]), int(self.free_mem[i, j])) for j in (0, 1))
        hosted = tuple((int(k), int(self.vm_numa[k])) for k in self.hosted_on(i))
        return PhysicalMachine(i, numas, hosted)

    @property
    def pms(self) -> tuple[PhysicalMachine, ...]:
        return tuple(self.pm(i) for i in range(self.n_pms))

    def key(self) -> bytes:
        """Hashable fingerprint of the placement."""
        return self.vm_pm.tobytes() + self.vm_numa.tobytes()

    def __eq__(self, other):
        if not isinstance(other, ClusterState):
            return NotImplemented
        return (self.vms == other.vms
                and np.array_equal(self.cap_cpu, other.cap_cpu)
                and np.array_equal(self.cap_mem, other.cap_mem)
                and np.array_equal(self.vm_pm, other.vm_pm)
                and np.array_equal(self.vm_numa, other.vm_numa)
                and np.array_equal(self.free_cpu, other.free_cpu)
                and np.array_equal(self.free_mem, other.free_mem))

    __hash__ = None

    def __repr__(self):
        return f"ClusterState(n_pms={self.n_pms}, n_vms={self.n_vms})"


def total_fragments(state: ClusterState, x: int) -> int:
    if x <= 0:
        raise InvalidParameter(f"fragment size X must be positive, got {x}")
    return int((state.free_cpu % x).sum())


def fragment_rate(state: ClusterState, x: int) -> float:
    """Fraction of free CPU stranded in X-core fragments; 0 for a fully packed cluster."""
    total = int(state.free_cpu.sum())
    if total == 0:
        return 0.0
    return total_fragments(state, x) / total


def migration_violations(state: ClusterState, vm: int, dest_pm: int, dest_numa: int) -> list[str]:
    """Names of the constraints violated by putting ``vm`` on (dest_pm, dest_numa)."""
    if not 0 <= vm < state.n_vms:
        raise InvalidParameter(f"unknown VM {vm}")
    if not 0 <= dest_pm < state.n_pms:
        raise InvalidParameter(f"unknown PM {dest_pm}")
    w = int(state.vm_w[vm])
    src_pm, src_numa = state.placement(vm)
    out = []
    if (w == 2 and dest_numa != BOTH) or (w == 1 and dest_numa not in (0, 1)):
        return ["numa_shape"]
    if (dest_pm, dest_numa) == (src_pm, src_numa):
        return ["noop"]
    for c in state.vms[vm].affinity_conflicts:
        if c != vm and state.vm_pm[c] == dest_pm:
            out.append("affinity")
            break
    cpu = int(state.vm_cpu[vm]) // w
    mem = int(state.vm_mem[vm]) // w
    numas = (0, 1) if dest_numa == BOTH else (dest_numa,)
    cpu_ok = mem_ok = True
    for j in numas:
        free_c = int(state.free_cpu[dest_pm, j])
        free_m = int(state.free_mem[dest_pm, j])
        if dest_pm == src_pm and (src_numa == j or src_numa == BOTH):
            free_c += cpu
            free_m += mem
        cpu_ok &= free_c >= cpu
        mem_ok &= free_m >= mem
    if not cpu_ok:
        out.append("cpu")
    if not mem_ok:
        out.append("memory")
    return out


def apply_migration(state: ClusterState, action: MigrationAction,
                    dest_numa: int | None = None) -> ClusterState:
    """Return the state after moving ``action.vm`` onto ``action.dest_pm``.

    ``dest_numa`` overrides ``action.dest_numa``; a double-NUMA VM always lands on
    :data:`BOTH`. Same-PM moves to the other NUMA are allowed here.
    """
    k, dest = action.vm, action.dest_pm
    if dest_numa is None:
        dest_numa = action.dest_numa
    if dest_numa is None:
        if not 0 <= k < state.n_vms:
            raise InvalidParameter(f"unknown VM {k}")
        if state.vm_w[k] == 2:
            dest_numa = BOTH
        else:
            raise InvalidParameter("destination NUMA required for a single-NUMA VM")
    bad = migration_violations(state, k, dest, dest_numa)
    if bad:
        raise InfeasibleMigration(bad, f"VM {k} -> PM {dest} NUMA {dest_numa}: {', '.join(bad)}")
    w = int(state.vm_w[k])
    cpu = int(state.vm_cpu[k]) // w
    mem = int(state.vm_mem[k]) // w
    src_pm, src_numa = state.placement(k)
    free_cpu = state.free_cpu.copy()
    free_mem = state.free_mem.copy()
    for j in ((0, 1) if src_numa == BOTH else (src_numa,)):
        free_cpu[src_pm, j] += cpu
        free_mem[src_pm, j] += mem
    for j in ((0, 1) if dest_numa == BOTH else (dest_numa,)):
        free_cpu[dest, j] -= cpu
        free_mem[dest, j] -= mem
    vm_pm = state.vm_pm.copy()
    vm_numa = state.vm_numa.copy()
    vm_pm[k] = dest
    vm_numa[k] = dest_numa
    return ClusterState._derived(state, vm_pm, vm_numa, free_cpu, free_mem)
