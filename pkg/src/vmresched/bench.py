"""Benchmark harness, latency accounting and migration timelines."""
from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .cluster import BOTH, ClusterState, MigrationPlan
from .objectives import ObjectiveSpec, XCoreFR, base_kind, format_kind
from .simulator import rollout_plan

DEFAULT_BUDGET = 5.0


class BudgetExceeded(RuntimeError):
    def __init__(self, cell: dict):
        self.cell = cell
        super().__init__(f"{cell['algorithm']} on mapping {cell['mapping']} (mnl {cell['mnl']}) "
                         f"took {cell['wall_clock']:.3f}s, budget {cell['budget']}s")


@dataclass
class AlgoSpec:
    """An algorithm name plus its keyword parameters, e.g. ``mcts`` with ``budget=1000``."""

    name: str
    params: dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        if not self.params:
            return self.name
        return self.name + "(" + ",".join(f"{k}={v}" for k, v in sorted(self.params.items())) + ")"


def _policy_algo(mapping, mnl, objective, seed, checkpoint, k=1, vm_q=0.0, pm_q=0.0):
    from .risk import best_of_k
    from .rollout import greedy_plan
    if k == 1 and vm_q == 0 and pm_q == 0:
        from .policy import TwoStagePolicy, load_checkpoint
        policy = checkpoint if isinstance(checkpoint, TwoStagePolicy) else load_checkpoint(checkpoint)
        return greedy_plan(policy, mapping, mnl, objective).plan
    return best_of_k(mapping, checkpoint, k, (vm_q, pm_q), seed, mnl, objective).plan


def _run_algo(spec: AlgoSpec, mapping: ClusterState, mnl: int, objective: ObjectiveSpec, seed: int):
    from . import baselines, exact
    p = dict(spec.params)
    if spec.name == "ha":
        return baselines.ha_reschedule(mapping, mnl, objective)
    if spec.name == "vbpp":
        return baselines.alpha_vbpp(mapping, mnl, p.get("alpha", 10), objective)
    if spec.name == "mcts":
        return baselines.mcts_reschedule(mapping, mnl, p.get("budget", 1000),
                                         p.get("exploration_c", 2 ** 0.5), seed, objective)
    if spec.name == "random":
        return baselines.random_policy(mapping, mnl, seed, objective)
    if spec.name == "exact":
        inst = exact.MipInstance.from_state(mapping, mnl, objective)
        return exact.solve_exact(inst, p.get("time_limit", 60.0)).plan
    if spec.name == "pop":
        inst = exact.MipInstance.from_state(mapping, mnl, objective)
        return exact.pop_solve(inst, p.get("partitions", 16), seed, p.get("time_limit", 5.0))[0]
    if spec.name == "policy":
        return _policy_algo(mapping, mnl, objective, seed, **p)
    raise KeyError(f"unknown algorithm {spec.name!r}")


ALGORITHMS = ("ha", "vbpp", "mcts", "random", "exact", "pop", "policy")


def run_cell(spec: AlgoSpec, mapping: ClusterState, mapping_id, mnl: int, objective: ObjectiveSpec,
             budget: float, seed: int = 0) -> dict:
    """One (algorithm, mapping, MNL) cell; timing covers plan construction only."""
    t0 = time.perf_counter()
    plan = _run_algo(spec, mapping, mnl, objective, seed)
    wall = time.perf_counter() - t0
    # relays from the exact ordering may lengthen a plan beyond mnl moves of distinct VMs
    res = rollout_plan(mapping, plan, objective, mnl=max(mnl, len(plan)))
    kind = base_kind(objective.kind)
    row = {"algorithm": spec.label, "mapping": mapping_id, "mnl": mnl,
           "initial_objective": rollout_plan(mapping, [], objective).objective,
           "final_objective": res.objective, "plan_length": len(plan),
           "wall_clock": wall, "budget": budget, "budget_met": wall <= budget}
    if isinstance(kind, XCoreFR):
        row["initial_fragments"] = int((mapping.free_cpu % kind.x).sum())
        row["final_fragments"] = int((res.final_state.free_cpu % kind.x).sum())
    return row


def _cell_job(args):
    return run_cell(*args)


@dataclass
class BenchReport:
    rows: list
    summary: dict


def run_bench(mappings: Sequence[ClusterState], algorithms: Sequence[AlgoSpec | str], mnls: Sequence[int],
              objective: ObjectiveSpec = ObjectiveSpec(), budget: float = DEFAULT_BUDGET,
              out=None, serial: bool = False, strict: bool = False, seed: int = 0,
              workers: int | None = None) -> BenchReport:
    """Every (algorithm, mapping, MNL) cell, each plan replayed to recompute its objective.

    Cells over budget are reported with ``budget_met`` False; with ``strict`` the
    first such cell raises :class:`BudgetExceeded` (serial order).
    """
    algos = [a if isinstance(a, AlgoSpec) else AlgoSpec(a) for a in algorithms]
    jobs = [(a, m, i, mnl, objective, budget, seed)
            for a in algos for i, m in enumerate(mappings) for mnl in mnls]
    rows = []
    if serial or strict or len(jobs) <= 1:
        for j in jobs:
            row = run_cell(*j)
            rows.append(row)
            if strict and not row["budget_met"]:
                if out is not None:
                    _write_report(rows, _summarise(rows, objective, budget), out)
                raise BudgetExceeded(row)
    else:
        with ProcessPoolExecutor(max_workers=workers or os.cpu_count()) as ex:
            rows = list(ex.map(_cell_job, jobs))
    summary = _summarise(rows, objective, budget)
    if out is not None:
        _write_report(rows, summary, out)
    return BenchReport(rows, summary)


def _summarise(rows, objective, budget) -> dict:
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["algorithm"], r["mnl"]), []).append(r)
    cells = []
    for (algo, mnl), rs in groups.items():
        cells.append({"algorithm": algo, "mnl": mnl, "count": len(rs),
                      "mean_final_objective": float(np.mean([r["final_objective"] for r in rs])),
                      "mean_wall_clock": float(np.mean([r["wall_clock"] for r in rs])),
                      "max_wall_clock": float(np.max([r["wall_clock"] for r in rs])),
                      "budget_met_fraction": float(np.mean([r["budget_met"] for r in rs]))})
    return {"objective": format_kind(objective.kind), "budget": budget, "cells": len(rows),
            "groups": cells}


def _write_report(rows, summary, out) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if rows:
        keys = list(rows[0])
        for r in rows:
            keys.extend(k for k in r if k not in keys)
        with open(out / "bench.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=keys)
            w.writeheader()
            w.writerows(rows)
    else:
        (out / "bench.csv").write_text("")
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


# --- timelines --------------------------------------------------------------------------

TIMELINE_FIELDS = ["step", "vm", "vm_type", "vm_cpu", "vm_mem", "src_pm", "src_numa", "dest_pm",
                   "dest_numa", "src_frag_before", "src_frag_after", "dest_frag_before",
                   "dest_frag_after", "reward"]


def _numa_label(j: int) -> str:
    return "both" if j == BOTH else str(j)


def _slot_frag(state: ClusterState, pm: int, numa: int, x: int) -> int:
    f = state.free_cpu[pm] % x
    return int(f.sum() if numa == BOTH else f[numa])


def timeline_rows(mapping: ClusterState, plan, objective: ObjectiveSpec = ObjectiveSpec()) -> list[dict]:
    """One row per migration; fragment columns cover the source and destination NUMA slots.

    Raises :class:`PlanError` at the first illegal step.
    """
    res = rollout_plan(mapping, plan, objective, mnl=max(len(plan), 0))
    kind = base_kind(objective.kind)
    x = kind.x if isinstance(kind, XCoreFR) else 16
    rows = []
    state = mapping
    for i, rec in enumerate(res.episode.trace):
        vm = mapping.vms[rec.action.vm]
        nxt = state.with_placement(*_moved(state, rec))
        src, dst = rec.src_pm, rec.action.dest_pm
        sn, dn = rec.src_numa, rec.action.dest_numa
        rows.append({"step": i, "vm": vm.id, "vm_type": vm.vm_type, "vm_cpu": vm.cpu, "vm_mem": vm.mem,
                     "src_pm": src, "src_numa": _numa_label(rec.src_numa), "dest_pm": dst,
                     "dest_numa": _numa_label(rec.action.dest_numa),
                     "src_frag_before": _slot_frag(state, src, sn, x),
                     "src_frag_after": _slot_frag(nxt, src, sn, x),
                     "dest_frag_before": _slot_frag(state, dst, dn, x),
                     "dest_frag_after": _slot_frag(nxt, dst, dn, x),
                     "reward": rec.reward})
        state = nxt
    return rows


def _moved(state: ClusterState, rec):
    pm, numa = state.vm_pm.copy(), state.vm_numa.copy()
    pm[rec.action.vm] = rec.action.dest_pm
    numa[rec.action.vm] = rec.action.dest_numa
    return pm, numa


def format_timeline(rows: Sequence[dict]) -> str:
    cells = [TIMELINE_FIELDS] + [[str(r[k]) for k in TIMELINE_FIELDS] for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(TIMELINE_FIELDS))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(line, widths)) for line in cells) + "\n"


def emit_timeline(mapping: ClusterState, plan, out, objective: ObjectiveSpec = ObjectiveSpec()) -> list[dict]:
    """Write ``<out>.csv`` and ``<out>.txt``; returns the rows."""
    rows = timeline_rows(mapping, plan, objective)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out.with_suffix(".csv"), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=TIMELINE_FIELDS)
        w.writeheader()
        w.writerows({**r, "reward": str(r["reward"])} for r in rows)
    out.with_suffix(".txt").write_text(format_timeline(rows))
    return rows


# --- generalisation harness ---------------------------------------------------------------

def generalization_grid(algorithms: Sequence[AlgoSpec | str], base_config, workload_levels: Sequence[float],
                        mnls: Sequence[int], count: int = 10, objective: ObjectiveSpec = ObjectiveSpec(),
                        budget: float = DEFAULT_BUDGET, seed: int = 0, out=None) -> list[dict]:
    """Benchmark across generated workload levels and MNLs (e.g. a policy trained at one level)."""
    from .datasets import generate_dataset
    rows = []
    for level in workload_levels:
        cfg = replace(base_config, workload_level=level, vm_count=None)
        maps = generate_dataset(cfg, count)
        rep = run_bench(maps, algorithms, mnls, objective, budget, serial=True, seed=seed)
        for r in rep.rows:
            rows.append({"workload_level": level, **r})
    if out is not None:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]) if rows else ["workload_level"])
            w.writeheader()
            w.writerows(rows)
    return rows
