"""Turn a target assignment into an ordered sequence of individually feasible migrations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cluster import BOTH, ClusterState, MigrationAction, apply_migration, migration_violations


@dataclass(frozen=True)
class OrderingResult:
    actions: tuple[MigrationAction, ...]
    feasible: bool  # every VM reached its target
    relays: int = 0
    final_state: ClusterState | None = None


def _pending(state: ClusterState, target_pm, target_numa) -> list[int]:
    diff = (state.vm_pm != target_pm) | (state.vm_numa != target_numa)
    return np.flatnonzero(diff).tolist()


def _search(state, target_pm, target_numa, node_limit):
    """DFS over move orders with a memo of dead done-sets.

    Returns (actions, final_state, complete). When no full order exists the
    longest prefix found is returned.
    """
    dead = set()
    best = ([], state)
    nodes = 0

    def rec(st, done, acts):
        nonlocal best, nodes
        nodes += 1
        pend = _pending(st, target_pm, target_numa)
        if not pend:
            return acts, st
        if len(acts) > len(best[0]):
            best = (list(acts), st)
        if done in dead or nodes > node_limit:
            return None
        for k in pend:
            a = MigrationAction(k, int(target_pm[k]), int(target_numa[k]))
            if migration_violations(st, k, a.dest_pm, a.dest_numa):
                continue
            out = rec(apply_migration(st, a), done | {k}, acts + [a])
            if out is not None:
                return out
        dead.add(done)
        return None

    out = rec(state, frozenset(), [])
    if out is not None:
        return out[0], out[1], True
    return best[0], best[1], False


def _relay_move(state, target_pm, target_numa):
    """Park one pending VM on the PM with the most free CPU that is neither its source nor target."""
    pend = _pending(state, target_pm, target_numa)
    free = state.free_cpu.sum(axis=1)
    for k in sorted(pend, key=lambda k: (-int(state.vm_cpu[k]), k)):
        src = int(state.vm_pm[k])
        for i in np.argsort(-free, kind="stable"):
            i = int(i)
            if i in (src, int(target_pm[k])):
                continue
            numas = (BOTH,) if state.vm_w[k] == 2 else (0, 1)
            for j in numas:
                if not migration_violations(state, k, i, j):
                    return MigrationAction(k, i, j)
    return None


def order_migrations(state: ClusterState, target_pm, target_numa, allow_relay: bool = True,
                     max_relays: int = 4, node_limit: int = 20000) -> OrderingResult:
    """Order moves from ``state`` to the target assignment.

    Tries every order of direct moves first; when none completes and relays
    are allowed, parks a blocking VM on the most-free PM and retries.
    """
    target_pm = np.asarray(target_pm, dtype=np.int64)
    target_numa = np.asarray(target_numa, dtype=np.int64)
    acts, st, ok = _search(state, target_pm, target_numa, node_limit)
    actions = list(acts)
    relays = 0
    while not ok and allow_relay and relays < max_relays:
        relay = _relay_move(st, target_pm, target_numa)
        if relay is None:
            break
        actions.append(relay)
        st = apply_migration(st, relay)
        relays += 1
        acts, st, ok = _search(st, target_pm, target_numa, node_limit)
        actions.extend(acts)
    return OrderingResult(tuple(actions), ok, relays, st)
