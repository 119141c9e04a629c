"""Objectives and per-step rewards.

Rewards are exact :class:`fractions.Fraction` values with denominator ``c``
(64 by default) so that episode sums telescope exactly.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Union

import numpy as np

from .cluster import (ClusterState, InvalidParameter, MigrationAction, fragment_rate,
                      total_fragments)


@dataclass(frozen=True)
class XCoreFR:
    x: int = 16

    def __post_init__(self):
        if self.x <= 0:
            raise InvalidParameter("X must be positive")


@dataclass(frozen=True)
class MemFragFR:
    block_gb: int = 64

    def __post_init__(self):
        if self.block_gb <= 0:
            raise InvalidParameter("memory block must be positive")


@dataclass(frozen=True)
class Mixed:
    """``lam * b + (1 - lam) * a``."""

    lam: float
    a: "Kind"
    b: "Kind"

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidParameter(f"lambda must lie in [0, 1], got {self.lam}")


@dataclass(frozen=True)
class MinMnlToGoal:
    goal: float
    base: "Kind" = XCoreFR()

    def __post_init__(self):
        if not 0.0 <= self.goal <= 1.0:
            raise InvalidParameter("FR goal must lie in [0, 1]")


Kind = Union[XCoreFR, MemFragFR, Mixed, MinMnlToGoal]


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: Kind = XCoreFR()
    c: int = 64

    def __post_init__(self):
        if self.c <= 0:
            raise InvalidParameter("scaling constant must be positive")

    def __str__(self):
        return format_kind(self.kind)


def _frac(v) -> Fraction:
    if isinstance(v, float):
        return Fraction(repr(v))
    return Fraction(v)


def memory_fragment_rate(state: ClusterState, block_gb: int) -> float:
    if block_gb <= 0:
        raise InvalidParameter("memory block must be positive")
    total = int(state.free_mem.sum())
    if total == 0:
        return 0.0
    return int((state.free_mem % block_gb).sum()) / total


def mixed_objective(fr_a: float, fr_b: float, lam: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise InvalidParameter(f"lambda must lie in [0, 1], got {lam}")
    if lam == 0:
        return fr_a
    if lam == 1:
        return fr_b
    return lam * fr_b + (1 - lam) * fr_a


def goal_reward(step_r, current_fr, fr_goal):
    """Penalty of 1 per step above the goal, bonus of 10 once the goal is met."""
    return (10 if current_fr <= fr_goal else -1) + step_r


def base_kind(kind: Kind) -> Kind:
    return kind.base if isinstance(kind, MinMnlToGoal) else kind


def objective_value(state: ClusterState, kind: Kind | ObjectiveSpec) -> float:
    if isinstance(kind, ObjectiveSpec):
        kind = kind.kind
    if isinstance(kind, XCoreFR):
        return fragment_rate(state, kind.x)
    if isinstance(kind, MemFragFR):
        return memory_fragment_rate(state, kind.block_gb)
    if isinstance(kind, Mixed):
        return mixed_objective(objective_value(state, kind.a), objective_value(state, kind.b),
                               kind.lam)
    return objective_value(state, kind.base)


def exact_value(state: ClusterState, kind: Kind | ObjectiveSpec) -> Fraction:
    """Objective value as an exact rational, used for goal tests and tie-free comparisons."""
    if isinstance(kind, ObjectiveSpec):
        kind = kind.kind
    if isinstance(kind, XCoreFR):
        total = int(state.free_cpu.sum())
        return Fraction(total_fragments(state, kind.x), total) if total else Fraction(0)
    if isinstance(kind, MemFragFR):
        total = int(state.free_mem.sum())
        frag = int((state.free_mem % kind.block_gb).sum())
        return Fraction(frag, total) if total else Fraction(0)
    if isinstance(kind, Mixed):
        lam = _frac(kind.lam)
        return lam * exact_value(state, kind.b) + (1 - lam) * exact_value(state, kind.a)
    return exact_value(state, kind.base)


def numa_cost(kind: Kind, free_cpu: np.ndarray, free_mem: np.ndarray,
              total_cpu: int, total_mem: int) -> np.ndarray:
    """Per-NUMA contribution to the objective, up to a positive constant.

    Single-resource objectives return raw fragment sizes; mixtures weight each
    component by its (migration-invariant) denominator.
    """
    if isinstance(kind, XCoreFR):
        return (free_cpu % kind.x).astype(np.float64)
    if isinstance(kind, MemFragFR):
        return (free_mem % kind.block_gb).astype(np.float64)
    if isinstance(kind, Mixed):
        def scaled(k):
            k = base_kind(k)
            denom = total_mem if isinstance(k, MemFragFR) else total_cpu
            return numa_cost(k, free_cpu, free_mem, total_cpu, total_mem) / max(denom, 1)
        return kind.lam * scaled(kind.b) + (1 - kind.lam) * scaled(kind.a)
    return numa_cost(kind.base, free_cpu, free_mem, total_cpu, total_mem)


def rescaled_fragment_size(free_cpu, x: int, c: int) -> Fraction:
    """Fragments on both NUMAs of one PM, divided by ``c``.

    ``free_cpu`` is the PM's pair of free-core counts (or a ``PhysicalMachine``).
    """
    if hasattr(free_cpu, "numas"):
        free_cpu = [n.free_cpu for n in free_cpu.numas]
    return Fraction(sum(int(f) % x for f in free_cpu), c)


def _pm_fragment_units(state: ClusterState, pm: int, kind: Kind) -> Fraction:
    if isinstance(kind, XCoreFR):
        return Fraction(int((state.free_cpu[pm] % kind.x).sum()))
    if isinstance(kind, MemFragFR):
        return Fraction(int((state.free_mem[pm] % kind.block_gb).sum()))
    raise TypeError(kind)


def _fr_reward(before: ClusterState, after: ClusterState, pms: list[int], kind: Kind,
               c: int) -> Fraction:
    if isinstance(kind, Mixed):
        lam = _frac(kind.lam)
        return (lam * _fr_reward(before, after, pms, base_kind(kind.b), c)
                + (1 - lam) * _fr_reward(before, after, pms, base_kind(kind.a), c))
    kind = base_kind(kind)
    return sum((_pm_fragment_units(before, p, kind) - _pm_fragment_units(after, p, kind)
                for p in pms), Fraction(0)) / c


def step_reward(before: ClusterState, after: ClusterState, action: MigrationAction,
                spec: ObjectiveSpec = ObjectiveSpec()) -> Fraction:
    """Fragment change on the source and destination PMs, scaled by ``1/c``.

    A same-PM NUMA switch counts that PM once.
    """
    k = action.vm
    src = int(before.vm_pm[k])
    if int(after.vm_pm[k]) != action.dest_pm:
        raise ValueError(f"after-state does not place VM {k} on PM {action.dest_pm}")
    moved = np.flatnonzero((before.vm_pm != after.vm_pm) | (before.vm_numa != after.vm_numa))
    if moved.tolist() != [k]:
        raise ValueError(f"states differ in VMs {moved.tolist()}, expected only VM {k}")
    pms = sorted({src, action.dest_pm})
    r = _fr_reward(before, after, pms, spec.kind, spec.c)
    if isinstance(spec.kind, MinMnlToGoal):
        return goal_reward(r, exact_value(after, spec.kind.base), _frac(spec.kind.goal))
    return r


def goal_reached(state: ClusterState, spec: ObjectiveSpec) -> bool:
    if not isinstance(spec.kind, MinMnlToGoal):
        return False
    return exact_value(state, spec.kind.base) <= _frac(spec.kind.goal)


_KIND_RE = {
    "fr": re.compile(r"^fr(\d+)$"),
    "mem": re.compile(r"^mem(\d+)$"),
}


def parse_kind(text: str) -> Kind:
    """Parse ``fr16``, ``mem64``, ``mix:0.4:fr16:fr64`` or ``goal:0.3:fr16``."""
    text = text.strip().lower()
    if m := _KIND_RE["fr"].match(text):
        return XCoreFR(int(m.group(1)))
    if m := _KIND_RE["mem"].match(text):
        return MemFragFR(int(m.group(1)))
    parts = text.split(":", 2)
    if parts[0] == "mix" and len(parts) == 3:
        a, b = parts[2].split(":", 1)
        return Mixed(float(parts[1]), parse_kind(a), parse_kind(b))
    if parts[0] == "goal" and len(parts) == 3:
        return MinMnlToGoal(float(parts[1]), parse_kind(parts[2]))
    raise InvalidParameter(f"cannot parse objective {text!r}")


def format_kind(kind: Kind) -> str:
    if isinstance(kind, XCoreFR):
        return f"fr{kind.x}"
    if isinstance(kind, MemFragFR):
        return f"mem{kind.block_gb}"
    if isinstance(kind, Mixed):
        return f"mix:{kind.lam}:{format_kind(kind.a)}:{format_kind(kind.b)}"
    return f"goal:{kind.goal}:{format_kind(kind.base)}"


def parse_objective(text: str, c: int = 64) -> ObjectiveSpec:
    return ObjectiveSpec(parse_kind(text), c)
