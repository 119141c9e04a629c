"""Deterministic rescheduling episodes: legality masks, stepping and plan rollouts."""
from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from .cluster import (BOTH, ClusterState, InfeasibleMigration, InvalidParameter,
                      MigrationAction, MigrationPlan, ValidationError, apply_migration,
                      migration_violations)
from .objectives import (ObjectiveSpec, goal_reached, numa_cost, objective_value,
                         step_reward)


class IllegalAction(InfeasibleMigration):
    pass


class EpisodeFinished(RuntimeError):
    pass


class PlanError(Exception):
    def __init__(self, step: int, cause: Exception):
        self.step = step
        self.cause = cause
        self.constraints = getattr(cause, "constraints", ())
        super().__init__(f"plan step {step}: {cause}")


@dataclass(frozen=True)
class StepRecord:
    action: MigrationAction  # dest_numa resolved
    src_pm: int
    src_numa: int
    reward: Fraction


@dataclass(frozen=True)
class Episode:
    state: ClusterState
    mnl: int
    objective: ObjectiveSpec
    step_index: int = 0
    done: bool = False
    cumulative_reward: Fraction = Fraction(0)
    initial: ClusterState | None = None
    trace: tuple[StepRecord, ...] = ()

    @property
    def remaining(self) -> int:
        return self.mnl - self.step_index


def numa_fit(state: ClusterState) -> np.ndarray:
    """(M, N, 2) mask of NUMAs that can take each VM, ignoring the VM's own footprint.

    For double-NUMA VMs both entries carry the PM-level answer.
    """
    w = state.vm_w
    s_cpu = state.vm_cpu // w
    s_mem = state.vm_mem // w
    fit = ((state.free_cpu[None, :, :] >= s_cpu[:, None, None])
           & (state.free_mem[None, :, :] >= s_mem[:, None, None]))
    double = w == 2
    if double.any():
        both = fit[double].all(axis=2)
        fit[double] = both[:, :, None]
    return fit


def pair_mask(state: ClusterState) -> np.ndarray:
    """(M, N) legality of every (VM, destination PM) pair."""
    m, n = state.n_vms, state.n_pms
    legal = np.zeros((m, n), dtype=bool)
    w = state.vm_w
    single = np.flatnonzero(w == 1)
    double = np.flatnonzero(w == 2)
    if len(single):
        fit = ((state.free_cpu[None] >= state.vm_cpu[single, None, None])
               & (state.free_mem[None] >= state.vm_mem[single, None, None]))
        fit[np.arange(len(single)), state.vm_pm[single], state.vm_numa[single]] = False
        legal[single] = fit[..., 0] | fit[..., 1]
    if len(double):
        mc = state.free_cpu.min(axis=1)
        mm = state.free_mem.min(axis=1)
        fit = ((mc[None] >= state.vm_cpu[double, None] // 2)
               & (mm[None] >= state.vm_mem[double, None] // 2))
        fit[np.arange(len(double)), state.vm_pm[double]] = False
        legal[double] = fit
    if len(state.conflict_pairs):
        a, b = state.conflict_pairs[:, 0], state.conflict_pairs[:, 1]
        legal[a, state.vm_pm[b]] = False
    return legal


def vm_mask(state: ClusterState) -> np.ndarray:
    """VMs with at least one legal destination."""
    return pair_mask(state).any(axis=1)


def legal_pm_mask(state: ClusterState, vm: int) -> np.ndarray:
    w = int(state.vm_w[vm])
    s_cpu = int(state.vm_cpu[vm]) // w
    s_mem = int(state.vm_mem[vm]) // w
    fit = (state.free_cpu >= s_cpu) & (state.free_mem >= s_mem)
    src_pm, src_numa = state.placement(vm)
    if w == 1:
        fit[src_pm, src_numa] = False
        legal = fit.any(axis=1)
    else:
        legal = fit.all(axis=1)
        legal[src_pm] = False
    conflicts = list(state.vms[vm].affinity_conflicts)
    if conflicts:
        legal[state.vm_pm[conflicts]] = False
    return legal


def choose_numa(state: ClusterState, vm: int, pm: int, spec: ObjectiveSpec = ObjectiveSpec()) -> int:
    """Destination NUMA on ``pm``: smallest post-placement fragment, lower index on ties."""
    if state.vm_w[vm] == 2:
        return BOTH
    s_cpu = int(state.vm_cpu[vm])
    s_mem = int(state.vm_mem[vm])
    src_pm, src_numa = state.placement(vm)
    cands = [j for j in (0, 1)
             if not (pm == src_pm and j == src_numa)
             and state.free_cpu[pm, j] >= s_cpu and state.free_mem[pm, j] >= s_mem]
    if not cands:
        raise IllegalAction(["cpu"], f"VM {vm} fits on no NUMA of PM {pm}")
    if len(cands) == 1:
        return cands[0]
    tc, tm = int(state.free_cpu.sum()), int(state.free_mem.sum())
    post_cpu = state.free_cpu[pm] - s_cpu
    post_mem = state.free_mem[pm] - s_mem
    cost = numa_cost(spec.kind, post_cpu, post_mem, tc, tm)
    return int(min(cands, key=lambda j: (cost[j], j)))


def action_violations(state: ClusterState, action: MigrationAction,
                      spec: ObjectiveSpec = ObjectiveSpec()) -> list[str]:
    """Constraints violated by ``action``; empty when the simulator accepts it."""
    k = action.vm
    if action.dest_numa is not None:
        return migration_violations(state, k, action.dest_pm, action.dest_numa)
    if state.vm_w[k] == 2:
        return migration_violations(state, k, action.dest_pm, BOTH)
    per = [migration_violations(state, k, action.dest_pm, j) for j in (0, 1)]
    if not per[0] or not per[1]:
        return []
    return sorted(set(per[0]) | set(per[1]), key=("numa_shape", "noop", "affinity", "cpu", "memory").index)


def reset(mapping: ClusterState, mnl: int, objective: ObjectiveSpec = ObjectiveSpec()) -> Episode:
    if mnl < 0:
        raise InvalidParameter("mnl must be non-negative")
    problems = mapping.violations()
    if problems:
        raise ValidationError(problems)
    done = mnl == 0 or goal_reached(mapping, objective)
    return Episode(mapping, mnl, objective, done=done, initial=mapping)


def legal_pms(ep: Episode, vm: int) -> np.ndarray:
    return legal_pm_mask(ep.state, vm)


def step(ep: Episode, action: MigrationAction) -> tuple[Episode, Fraction]:
    if ep.done:
        raise EpisodeFinished("episode is done")
    state = ep.state
    if not 0 <= action.vm < state.n_vms or not 0 <= action.dest_pm < state.n_pms:
        raise InvalidParameter(f"unknown VM or PM in {action}")
    bad = action_violations(state, action, ep.objective)
    if bad:
        raise IllegalAction(bad, f"{action}: {', '.join(bad)}")
    numa = action.dest_numa
    if numa is None:
        numa = choose_numa(state, action.vm, action.dest_pm, ep.objective)
    resolved = MigrationAction(action.vm, action.dest_pm, numa)
    after = apply_migration(state, resolved)
    r = step_reward(state, after, resolved, ep.objective)
    src_pm, src_numa = state.placement(action.vm)
    idx = ep.step_index + 1
    done = idx >= ep.mnl or goal_reached(after, ep.objective)
    rec = StepRecord(resolved, src_pm, src_numa, r)
    return replace(ep, state=after, step_index=idx, done=done,
                   cumulative_reward=ep.cumulative_reward + r, trace=ep.trace + (rec,)), r


def has_legal_action(ep: Episode) -> bool:
    return (not ep.done) and bool(vm_mask(ep.state).any())


@dataclass(frozen=True)
class RolloutResult:
    final_state: ClusterState
    objective: float
    rewards: tuple[Fraction, ...]
    episode: Episode


def rollout_plan(mapping: ClusterState, plan: MigrationPlan | list,
                 objective: ObjectiveSpec = ObjectiveSpec(), mnl: int | None = None) -> RolloutResult:
    actions = list(plan)
    if mnl is None:
        mnl = len(actions)
    if len(actions) > mnl:
        raise PlanError(mnl, InvalidParameter(f"plan length {len(actions)} exceeds mnl {mnl}"))
    ep = reset(mapping, mnl, objective)
    rewards = []
    for i, a in enumerate(actions):
        try:
            ep, r = step(ep, a)
        except (InfeasibleMigration, EpisodeFinished, InvalidParameter) as e:
            raise PlanError(i, e) from e
        rewards.append(r)
    return RolloutResult(ep.state, objective_value(ep.state, objective), tuple(rewards), ep)


def validate_plan(mapping: ClusterState, plan, objective: ObjectiveSpec = ObjectiveSpec(),
                  mnl: int | None = None) -> bool:
    try:
        rollout_plan(mapping, plan, objective, mnl)
    except PlanError:
        return False
    return True
