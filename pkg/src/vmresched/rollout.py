"""Lockstep policy rollouts over several episodes at once."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np
import torch

from .cluster import ClusterState, MigrationAction, MigrationPlan
from .features import FeatureTensor
from .objectives import ObjectiveSpec, objective_value
from .policy import TwoStagePolicy, _pick, make_batch, masked_log_softmax
from .simulator import pair_mask, reset, step


@dataclass
class StepData:
    feat: FeatureTensor
    vm_mask: np.ndarray
    pm_mask: np.ndarray  # legal destinations of the chosen VM
    vm: int
    pm: int
    logp: float
    value: float
    reward: Fraction
    done: bool


@dataclass
class Trajectory:
    mapping: ClusterState
    actions: list = field(default_factory=list)  # resolved MigrationActions
    steps: list = field(default_factory=list)  # StepData when recording
    rewards: list = field(default_factory=list)
    final_state: ClusterState | None = None
    objective: float = float("nan")

    @property
    def plan(self) -> MigrationPlan:
        return MigrationPlan(self.actions)

    @property
    def total_reward(self) -> Fraction:
        return sum(self.rewards, Fraction(0))


def run_episodes(policy: TwoStagePolicy, mappings: Sequence[ClusterState], mnl: int,
                 objective: ObjectiveSpec, rngs: Sequence[np.random.Generator], greedy: bool = False,
                 vm_filter: Callable | None = None, pm_filter: Callable | None = None,
                 record: bool = False) -> list[Trajectory]:
    """Run one episode per mapping, batching the network calls of all live episodes.

    Episodes with no legal action end early. Filters, when given, map a
    probability vector to the distribution actually sampled from.
    """
    eps = [reset(m, mnl, objective) for m in mappings]
    trajs = [Trajectory(m) for m in mappings]
    live = [i for i, e in enumerate(eps) if not e.done]
    while live:
        masks = {i: pair_mask(eps[i].state) for i in live}
        live = [i for i in live if masks[i].any()]
        if not live:
            break
        feats = [policy.encode(eps[i].state) for i in live]
        with torch.no_grad():
            batch = make_batch(feats, policy.dtype)
            vm, pm, logits, scores = policy.trunk(batch)
            m = logits.shape[1]
            vm_mask = np.zeros((len(live), m), dtype=bool)
            for r, i in enumerate(live):
                vm_mask[r, :masks[i].shape[0]] = masks[i].any(axis=1)
            vm_probs = masked_log_softmax(logits, torch.as_tensor(vm_mask)).exp().double().numpy()
            values = policy.value(vm, pm, batch).double().numpy() if record else None
            sel = []
            p_vm = []
            for r, i in enumerate(live):
                p = vm_probs[r, :len(feats[r].vm)]
                if vm_filter is not None:
                    p = vm_filter(p)
                k = _pick(p, rngs[i], greedy)
                sel.append(k)
                p_vm.append(p[k])
            n = pm.shape[1]
            pm_mask = np.zeros((len(live), n), dtype=bool)
            for r, i in enumerate(live):
                pm_mask[r, :masks[i].shape[1]] = masks[i][sel[r]]
            pm_logits = policy.pm_logits(torch.as_tensor(sel), vm, pm, scores, batch)
            pm_probs = masked_log_softmax(pm_logits, torch.as_tensor(pm_mask)).exp().double().numpy()
        for r, i in enumerate(live):
            pp = pm_probs[r, :len(feats[r].pm)]
            if pm_filter is not None:
                pp = pm_filter(pp)
            dest = _pick(pp, rngs[i], greedy)
            eps[i], rew = step(eps[i], MigrationAction(sel[r], dest))
            trajs[i].actions.append(eps[i].trace[-1].action)
            trajs[i].rewards.append(rew)
            if record:
                trajs[i].steps.append(StepData(feats[r], vm_mask[r, :len(feats[r].vm)].copy(),
                                               pm_mask[r, :len(feats[r].pm)].copy(), sel[r], dest,
                                               float(np.log(p_vm[r]) + np.log(pp[dest])),
                                               float(values[r]), rew, eps[i].done))
        live = [i for i in live if not eps[i].done]
    for t, e in zip(trajs, eps):
        t.final_state = e.state
        t.objective = objective_value(e.state, objective)
        if record and t.steps:
            t.steps[-1].done = True
    return trajs


def greedy_plan(policy: TwoStagePolicy, mapping: ClusterState, mnl: int,
                objective: ObjectiveSpec = ObjectiveSpec()) -> Trajectory:
    return run_episodes(policy, [mapping], mnl, objective, [np.random.default_rng(0)], greedy=True)[0]
