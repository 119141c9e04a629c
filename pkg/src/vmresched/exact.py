"""Exact minimum-fragment rescheduling for small clusters, a brute-force oracle, and POP.

The solver searches final assignments directly: it picks the set of VMs that
leave their slot (at most MNL of them) and then places that set, pruning with
fragment lower bounds against an incumbent from the greedy heuristic.
"""
from __future__ import annotations

import heapq
import itertools
import time
from dataclasses import dataclass

import numpy as np

from .cluster import BOTH, ClusterState, InvalidParameter, MigrationPlan, total_fragments
from .objectives import ObjectiveSpec, XCoreFR
from .ordering import order_migrations


@dataclass(frozen=True)
class MipInstance:
    state: ClusterState
    mnl: int
    x: int = 16

    def __post_init__(self):
        if self.mnl < 0:
            raise InvalidParameter("mnl must be non-negative")
        if self.x <= 0:
            raise InvalidParameter("X must be positive")

    @classmethod
    def from_state(cls, state: ClusterState, mnl: int, objective=None) -> "MipInstance":
        x = 16
        if objective is not None:
            kind = objective.kind if isinstance(objective, ObjectiveSpec) else objective
            if not isinstance(kind, XCoreFR):
                raise InvalidParameter("the exact solver handles X-core fragment objectives only")
            x = kind.x
        return cls(state, mnl, x)

    def capacity_headroom(self) -> np.ndarray:
        """Largest number of X-core VMs each NUMA could still take."""
        return self.state.free_cpu // self.x


@dataclass(frozen=True)
class ExactResult:
    plan: MigrationPlan
    objective: int  # total fragments of the final assignment
    optimal: bool
    lower_bound: int
    ordering_feasible: bool
    assignment: tuple  # (vm_pm, vm_numa) arrays of the final assignment
    nodes: int


def _round_up_congruent(v: int, residue: int, x: int) -> int:
    """Smallest value >= v that is congruent to ``residue`` modulo ``x``."""
    return v + ((residue - v) % x)


class _Search:
    def __init__(self, inst: MipInstance, deadline: float):
        st = inst.state
        self.st = st
        self.x = inst.x
        self.deadline = deadline
        self.w = st.vm_w
        self.s_cpu = st.vm_cpu // st.vm_w
        self.s_mem = st.vm_mem // st.vm_w
        self.residue = int(st.free_cpu.sum()) % inst.x
        self.nodes = 0
        self.timed_out = False
        n = st.n_pms
        self.single_slots = [(i, j) for i in range(n) for j in (0, 1)]
        self.double_slots = [(i, BOTH) for i in range(n)]
        self.conflicts = [sorted(v.affinity_conflicts) for v in st.vms]
        # VMs interchangeable for the objective: same shape, same source slot, same conflicts
        self.cls = [(int(st.vm_cpu[k]), int(st.vm_mem[k]), int(st.vm_w[k]), int(st.vm_pm[k]),
                     int(st.vm_numa[k]), tuple(self.conflicts[k])) for k in range(st.n_vms)]

    def bound(self, free_cpu, remaining_cpu: int, remaining_numas: int) -> int:
        """Fragments after placing ``remaining_cpu`` cores over at most ``remaining_numas`` NUMAs."""
        frag = free_cpu % self.x
        total = int(frag.sum())
        if remaining_cpu and remaining_numas:
            flat = np.sort(frag.ravel())[::-1]
            total -= min(remaining_cpu, int(flat[:remaining_numas].sum()))
        return max(_round_up_congruent(max(total, 0), self.residue, self.x), self.residue)

    def lifted(self, subset):
        fc = self.st.free_cpu.copy()
        fm = self.st.free_mem.copy()
        for k in subset:
            i, j = int(self.st.vm_pm[k]), int(self.st.vm_numa[k])
            for jj in ((0, 1) if j == BOTH else (j,)):
                fc[i, jj] += self.s_cpu[k]
                fm[i, jj] += self.s_mem[k]
        return fc, fm

    def subset_bound(self, subset):
        fc, fm = self.lifted(subset)
        t = int(self.st.vm_cpu[list(subset)].sum())
        return self.bound(fc, t, int(self.w[list(subset)].sum())), fc, fm

    def place(self, subset, fc, fm, best):
        """DFS over placements of ``subset``; returns (fragments, {vm: slot}) of the best found below ``best``."""
        order = sorted(subset, key=lambda k: (-int(self.st.vm_cpu[k]), self.cls[k], k))
        in_set = set(subset)
        pos = {}
        found = [best, None]
        rem_cpu = [int(self.st.vm_cpu[order].sum())]
        rem_numas = [int(self.w[order].sum())]

        def rec(d):
            self.nodes += 1
            if self.nodes % 2048 == 0 and time.perf_counter() > self.deadline:
                self.timed_out = True
            if self.timed_out:
                return
            if d == len(order):
                f = int((fc % self.x).sum())
                if f < found[0]:
                    found[0], found[1] = f, dict(pos)
                return
            if self.bound(fc, rem_cpu[0], rem_numas[0]) >= found[0]:
                return
            k = order[d]
            src = (int(self.st.vm_pm[k]), int(self.st.vm_numa[k]))
            slots = self.double_slots if self.w[k] == 2 else self.single_slots
            blocked = set()
            for c in self.conflicts[k]:
                if c in in_set:
                    if c in pos:
                        blocked.add(pos[c][0])
                else:
                    blocked.add(int(self.st.vm_pm[c]))
            # canonical order among interchangeable VMs
            floor = None
            if d and self.cls[order[d - 1]] == self.cls[k]:
                floor = pos[order[d - 1]]
            c_cpu, c_mem = self.s_cpu[k], self.s_mem[k]
            for slot in slots:
                if slot == src or slot[0] in blocked:
                    continue
                if floor is not None and slot < floor:
                    continue
                i, j = slot
                numas = (0, 1) if j == BOTH else (j,)
                if any(fc[i, jj] < c_cpu or fm[i, jj] < c_mem for jj in numas):
                    continue
                for jj in numas:
                    fc[i, jj] -= c_cpu
                    fm[i, jj] -= c_mem
                pos[k] = slot
                rem_cpu[0] -= int(self.st.vm_cpu[k])
                rem_numas[0] -= int(self.w[k])
                rec(d + 1)
                rem_cpu[0] += int(self.st.vm_cpu[k])
                rem_numas[0] += int(self.w[k])
                del pos[k]
                for jj in numas:
                    fc[i, jj] += c_cpu
                    fm[i, jj] += c_mem
                if self.timed_out:
                    return

        rec(0)
        return found[0], found[1]


def _assignment_from_plan(state: ClusterState, plan) -> tuple[np.ndarray, np.ndarray]:
    from .simulator import rollout_plan
    final = rollout_plan(state, plan).final_state
    return final.vm_pm.copy(), final.vm_numa.copy()


def solve_exact(instance: MipInstance, time_limit: float = 60.0, incumbent=None) -> ExactResult:
    """Minimum total fragments over final assignments that move at most ``mnl`` distinct VMs.

    ``incumbent`` is an optional starting plan; by default the greedy heuristic's plan.
    The returned plan is an ordered, individually feasible move sequence; when
    no such order exists ``ordering_feasible`` is False and the plan is the
    longest feasible prefix.
    """
    from .baselines import ha_reschedule
    st = instance.state
    t0 = time.perf_counter()
    f0 = total_fragments(st, instance.x)
    best_pm, best_numa = st.vm_pm.copy(), st.vm_numa.copy()
    best = f0
    if incumbent is None and instance.mnl > 0:
        incumbent = ha_reschedule(st, instance.mnl, ObjectiveSpec(XCoreFR(instance.x)))
    if incumbent is not None and len(incumbent):
        ipm, inuma = _assignment_from_plan(st, incumbent)
        moved = int(((ipm != st.vm_pm) | (inuma != st.vm_numa)).sum())
        fi = total_fragments(st.with_placement(ipm, inuma), instance.x)
        if moved <= instance.mnl and fi < best:
            best, best_pm, best_numa = fi, ipm, inuma
    search = _Search(instance, t0 + time_limit)
    residue = search.residue
    kmax = min(instance.mnl, st.n_vms)
    enumerated = True
    heap = []
    if best > residue and kmax > 0:
        for size in range(1, kmax + 1):
            for subset in itertools.combinations(range(st.n_vms), size):
                lb, _, _ = search.subset_bound(subset)
                if lb < best:
                    heap.append((lb, subset))
            if time.perf_counter() > search.deadline:
                search.timed_out = True
                enumerated = size == kmax
                break
        heapq.heapify(heap)
        while heap and not search.timed_out:
            lb, subset = heap[0]
            if lb >= best:
                break
            heapq.heappop(heap)
            _, fc, fm = search.subset_bound(subset)
            f, pos = search.place(subset, fc, fm, best)
            if pos is not None:
                best = f
                best_pm, best_numa = st.vm_pm.copy(), st.vm_numa.copy()
                for k, (i, j) in pos.items():
                    best_pm[k], best_numa[k] = i, j
            if search.timed_out:
                heapq.heappush(heap, (lb, subset))
    if not search.timed_out:
        lower = best
    elif not enumerated:
        lower = residue
    else:
        lower = min([best] + [lb for lb, _ in heap])
    optimal = not search.timed_out
    order = order_migrations(st, best_pm, best_numa, allow_relay=True)
    plan = MigrationPlan(order.actions)
    return ExactResult(plan, best, optimal, min(lower, best), order.feasible,
                       (best_pm, best_numa), search.nodes)


def exhaustive_optimum(state: ClusterState, mnl: int, x: int = 16) -> int:
    """Brute-force minimum total fragments over every final assignment moving at most ``mnl`` VMs.

    Deliberately naive: full recomputation of usage per candidate assignment.
    """
    m, n = state.n_vms, state.n_pms
    cap_cpu = state.cap_cpu.tolist()
    cap_mem = state.cap_mem.tolist()
    vms = state.vms
    orig = [(int(state.vm_pm[k]), int(state.vm_numa[k])) for k in range(m)]
    conflicts = [(a, b) for a in range(m) for b in vms[a].affinity_conflicts if a < b]

    def slots(k):
        if vms[k].numa_count == 2:
            return [(i, BOTH) for i in range(n)]
        return [(i, j) for i in range(n) for j in (0, 1)]

    def frag_of(assign):
        used_c = [[0, 0] for _ in range(n)]
        used_m = [[0, 0] for _ in range(n)]
        for k, (i, j) in enumerate(assign):
            for jj in ((0, 1) if j == BOTH else (j,)):
                used_c[i][jj] += vms[k].cpu // vms[k].numa_count
                used_m[i][jj] += vms[k].mem // vms[k].numa_count
        total = 0
        for i in range(n):
            for j in (0, 1):
                if used_c[i][j] > cap_cpu[i][j] or used_m[i][j] > cap_mem[i][j]:
                    return None
                total += (cap_cpu[i][j] - used_c[i][j]) % x
        for a, b in conflicts:
            if assign[a][0] == assign[b][0]:
                return None
        return total

    best = frag_of(orig)
    for size in range(1, min(mnl, m) + 1):
        for subset in itertools.combinations(range(m), size):
            choices = [[s for s in slots(k) if s != orig[k]] for k in subset]
            for combo in itertools.product(*choices):
                assign = list(orig)
                for k, s in zip(subset, combo):
                    assign[k] = s
                f = frag_of(assign)
                if f is not None and f < best:
                    best = f
    return best


def _sub_state(state: ClusterState, pms: list[int]):
    """Restrict to ``pms`` and the VMs they host; returns (sub state, vm id map, pm id map)."""
    pm_new = {p: i for i, p in enumerate(pms)}
    vm_ids = [k for k in range(state.n_vms) if int(state.vm_pm[k]) in pm_new]
    vm_new = {k: i for i, k in enumerate(vm_ids)}
    from .cluster import VirtualMachine
    vms = [VirtualMachine(vm_new[k], v.cpu, v.mem, v.numa_count, v.vm_type,
                          frozenset(vm_new[c] for c in v.affinity_conflicts if c in vm_new))
           for k, v in ((k, state.vms[k]) for k in vm_ids)]
    sub = ClusterState(state.cap_cpu[pms], state.cap_mem[pms], vms,
                       [pm_new[int(state.vm_pm[k])] for k in vm_ids],
                       [int(state.vm_numa[k]) for k in vm_ids])
    return sub, vm_ids, pms


def pop_solve(instance: MipInstance, partitions: int = 16, seed: int = 0,
              time_limit: float = 5.0, mnl_split: str = "even"):
    """Random PM partition; each part (with its hosted VMs) solved exactly; plans concatenated.

    ``mnl_split`` is ``even`` or ``proportional`` (to the number of hosted VMs).
    Returns (plan, total fragments of the final state).
    """
    from .cluster import MigrationAction
    from .simulator import rollout_plan
    if partitions < 1:
        raise InvalidParameter("partitions must be at least 1")
    st = instance.state
    if partitions == 1:
        r = solve_exact(instance, time_limit)
        return r.plan, r.objective
    rng = np.random.default_rng(seed)
    perm = rng.permutation(st.n_pms)
    parts = [sorted(int(p) for p in perm[g::partitions]) for g in range(partitions)]
    parts = [p for p in parts if p]
    if mnl_split == "proportional":
        sizes = np.array([int(np.isin(st.vm_pm, p).sum()) for p in parts], dtype=float)
        share = np.floor(instance.mnl * sizes / max(sizes.sum(), 1)).astype(int)
        for i in np.argsort(-sizes, kind="stable")[: instance.mnl - share.sum()]:
            share[i] += 1
    else:
        share = [instance.mnl // len(parts) + (1 if g < instance.mnl % len(parts) else 0)
                 for g in range(len(parts))]
    actions = []
    for pms, budget in zip(parts, share):
        sub, vm_ids, pm_ids = _sub_state(st, pms)
        if budget == 0 or sub.n_vms == 0:
            continue
        r = solve_exact(MipInstance(sub, int(budget), instance.x), time_limit / len(parts))
        actions.extend(MigrationAction(vm_ids[a.vm], pm_ids[a.dest_pm], a.dest_numa)
                       for a in r.plan)
    plan = MigrationPlan(actions)
    final = rollout_plan(st, plan).final_state
    return plan, total_fragments(final, instance.x)
