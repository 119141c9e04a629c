"""Risk-seeking evaluation: sample K trajectories with action thresholding, deploy the best one."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial
from typing import Sequence

import numpy as np

from .cluster import ClusterState, MigrationPlan
from .objectives import ObjectiveSpec
from .policy import TwoStagePolicy, load_checkpoint
from .rollout import run_episodes
from .simulator import rollout_plan

DEFAULT_QUANTILES = (0.95, 0.98, 0.99, 0.995)


def threshold_probs(probs, quantile: float) -> np.ndarray:
    """Zero entries below the ``quantile`` of the positive entries, then renormalise.

    Zero entries stay zero and the largest entry always survives.
    """
    p = np.asarray(probs, dtype=np.float64)
    if not 0.0 <= quantile < 1.0:
        raise ValueError(f"quantile must lie in [0, 1), got {quantile}")
    if quantile == 0.0:
        return p / p.sum()
    pos = p > 0
    cut = np.quantile(p[pos], quantile)
    keep = pos & (p >= cut)
    keep[np.argmax(p)] = True
    out = np.where(keep, p, 0.0)
    return out / out.sum()


def clean_trajectory_bound(p1: float, mnl: int) -> tuple[float, float]:
    """Upper bounds (1 - p1)^mnl and exp(-mnl * p1) on the chance of never sampling a bad action."""
    return (1.0 - p1) ** mnl, math.exp(-mnl * p1)


@dataclass
class BestOfK:
    plan: MigrationPlan
    objective: float
    objectives: list  # every trajectory's final objective, in seed order


def _filters(vm_q, pm_q):
    vf = partial(threshold_probs, quantile=vm_q) if vm_q > 0 else None
    pf = partial(threshold_probs, quantile=pm_q) if pm_q > 0 else None
    return vf, pf


def best_of_k(mapping: ClusterState, checkpoint, k: int, quantiles=(0.0, 0.0), seed: int = 0,
              mnl: int = 50, objective: ObjectiveSpec = ObjectiveSpec()) -> BestOfK:
    """Sample ``k`` trajectories and keep the lowest final objective.

    Trajectory ``t`` draws from the ``t``-th child of ``SeedSequence(seed)``, so
    the K-sample set is a prefix of the (K+1)-sample set.
    """
    if k < 1:
        raise ValueError("K must be at least 1")
    policy = checkpoint if isinstance(checkpoint, TwoStagePolicy) else load_checkpoint(checkpoint)
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(k)]
    vf, pf = _filters(*quantiles)
    trajs = run_episodes(policy, [mapping] * k, mnl, objective, rngs, vm_filter=vf, pm_filter=pf)
    objs = []
    for t in trajs:
        # scored independently of the sampler's own bookkeeping
        objs.append(rollout_plan(mapping, t.plan, objective, mnl=max(mnl, len(t.actions))).objective)
    best = int(np.argmin(objs))
    return BestOfK(trajs[best].plan, objs[best], objs)


def quantile_grid(values: Sequence[float] = DEFAULT_QUANTILES, include_untuned: bool = True):
    pairs = [(a, b) for a in values for b in values]
    return ([(0.0, 0.0)] if include_untuned else []) + pairs


def tune_quantiles(checkpoint, validation: Sequence[ClusterState], grid=None, k: int = 16,
                   seed: int = 0, mnl: int = 50, objective: ObjectiveSpec = ObjectiveSpec()):
    """Grid pair with the lowest mean best-of-K validation objective; ties go to lower quantiles.

    All pairs see the same seeds per mapping. Returns ((vm_q, pm_q), {pair: mean}).
    """
    if not validation:
        raise ValueError("validation set is empty")
    policy = checkpoint if isinstance(checkpoint, TwoStagePolicy) else load_checkpoint(checkpoint)
    grid = list(grid) if grid is not None else quantile_grid()
    scores = {}
    for pair in grid:
        vals = [best_of_k(m, policy, k, pair, seed + j, mnl, objective).objective
                for j, m in enumerate(validation)]
        scores[tuple(pair)] = float(np.mean(vals))
    best = min(scores, key=lambda p: (scores[p], p))
    return best, scores
