"""Non-learned rescheduling baselines: greedy heuristic (HA), alpha-VBPP, UCT search, random."""
from __future__ import annotations

import math

import numpy as np

from .cluster import (BOTH, ClusterState, InvalidParameter, MigrationAction, MigrationPlan,
                      apply_migration)
from .objectives import ObjectiveSpec, base_kind, goal_reached, numa_cost, objective_value
from .ordering import order_migrations
from .simulator import choose_numa, pair_mask, reset, step

EPS = 1e-12


def _costs(state: ClusterState, kind, free_cpu, free_mem):
    return numa_cost(kind, free_cpu, free_mem, int(state.free_cpu.sum()), int(state.free_mem.sum()))


def removal_drop(state: ClusterState, kind) -> np.ndarray:
    """(M,) objective drop, in cost units, from lifting each VM off its NUMA(s)."""
    kind = base_kind(kind)
    w = state.vm_w
    s_cpu, s_mem = state.vm_cpu // w, state.vm_mem // w
    before = _costs(state, kind, state.free_cpu, state.free_mem)
    pm = state.vm_pm
    out = np.zeros(state.n_vms)
    for j in (0, 1):
        on = (state.vm_numa == j) | (state.vm_numa == BOTH)
        fc = state.free_cpu[pm, j] + s_cpu
        fm = state.free_mem[pm, j] + s_mem
        after = _costs(state, kind, fc, fm)
        out += np.where(on, before[pm, j] - after, 0.0)
    return out


def insertion_drop(state: ClusterState, kind):
    """(M, N) objective drop from placing each VM on each PM, and the best NUMA per pair.

    Infeasible NUMAs (capacity, own slot) score -inf; affinity is left to the caller.
    """
    kind = base_kind(kind)
    w = state.vm_w
    s_cpu, s_mem = state.vm_cpu // w, state.vm_mem // w
    fc = state.free_cpu[None] - s_cpu[:, None, None]
    fm = state.free_mem[None] - s_mem[:, None, None]
    fit = (fc >= 0) & (fm >= 0)
    before = _costs(state, kind, state.free_cpu, state.free_mem)
    gain = before[None] - _costs(state, kind, np.maximum(fc, 0), np.maximum(fm, 0))
    rows = np.arange(state.n_vms)
    single = w == 1
    fit[rows[single], state.vm_pm[single], state.vm_numa[single]] = False
    gain = np.where(fit, gain, -np.inf)
    numa = np.argmax(gain, axis=2)  # first index on ties
    best = np.take_along_axis(gain, numa[..., None], axis=2)[..., 0]
    double = ~single
    if double.any():
        both = fit[double].all(axis=2)
        dgain = np.where(both, gain[double].sum(axis=2), -np.inf)
        dgain[np.arange(double.sum()), state.vm_pm[double]] = -np.inf
        best[double] = dgain
        numa[double] = BOTH
    return best, numa


def drop_matrix(state: ClusterState, kind):
    """Exact single-step objective drop for every legal (VM, PM) pair; -inf elsewhere."""
    ins, numa = insertion_drop(state, kind)
    score = removal_drop(state, kind)[:, None] + ins
    score = np.where(pair_mask(state), score, -np.inf)
    return score, numa


def ha_choice(state: ClusterState, kind):
    """Best (vm, pm, numa, drop) under the greedy rule, or None when nothing lowers the objective.

    Ties: larger VM CPU, then lower VM id, then lower PM id.
    """
    score, numa = drop_matrix(state, kind)
    if score.size == 0:
        return None
    top = score.max()
    if not top > EPS:
        return None
    vms, pms = np.nonzero(score >= top - EPS)
    order = np.lexsort((pms, vms, -state.vm_cpu[vms]))
    k, i = int(vms[order[0]]), int(pms[order[0]])
    return k, i, int(numa[k, i]), float(score[k, i])


def ha_reschedule(mapping: ClusterState, mnl: int, objective: ObjectiveSpec = ObjectiveSpec()) -> MigrationPlan:
    """Filtering-then-scoring greedy: each step takes the legal move with the largest objective drop."""
    ep = reset(mapping, mnl, objective)
    actions = []
    while not ep.done:
        choice = ha_choice(ep.state, objective.kind)
        if choice is None:
            break
        k, i, j, _ = choice
        a = MigrationAction(k, i, j)
        ep, _ = step(ep, a)
        actions.append(a)
    return MigrationPlan(actions, mnl)


# --- alpha-VBPP -------------------------------------------------------------------------

class _Virtual:
    """Mutable placement used while a VBPP stage removes and repacks VMs."""

    def __init__(self, state: ClusterState):
        self.state = state
        self.pm = state.vm_pm.copy()
        self.numa = state.vm_numa.copy()
        self.free_cpu = state.free_cpu.copy()
        self.free_mem = state.free_mem.copy()
        self.s_cpu = state.vm_cpu // state.vm_w
        self.s_mem = state.vm_mem // state.vm_w

    def _touch(self, k, i, j, sign):
        for jj in ((0, 1) if j == BOTH else (j,)):
            self.free_cpu[i, jj] += sign * self.s_cpu[k]
            self.free_mem[i, jj] += sign * self.s_mem[k]

    def lift(self, k):
        self._touch(k, self.pm[k], self.numa[k], +1)
        self.pm[k] = -1

    def put(self, k, i, j):
        self._touch(k, i, j, -1)
        self.pm[k], self.numa[k] = i, j

    def cost(self, kind, fc, fm):
        return numa_cost(kind, fc, fm, int(self.state.free_cpu.sum()), int(self.state.free_mem.sum()))

    def removal_gain(self, k, kind):
        i, j = self.pm[k], self.numa[k]
        g = 0.0
        for jj in ((0, 1) if j == BOTH else (j,)):
            fc, fm = self.free_cpu[i, jj], self.free_mem[i, jj]
            g += float(self.cost(kind, fc, fm) - self.cost(kind, fc + self.s_cpu[k], fm + self.s_mem[k]))
        return g

    def best_slot(self, k, kind):
        """Slot with the largest insertion gain; lowest PM then NUMA on ties."""
        fc = self.free_cpu - self.s_cpu[k]
        fm = self.free_mem - self.s_mem[k]
        fit = (fc >= 0) & (fm >= 0)
        gain = self.cost(kind, self.free_cpu, self.free_mem) - self.cost(kind, np.maximum(fc, 0), np.maximum(fm, 0))
        conflicts = [c for c in self.state.vms[k].affinity_conflicts if self.pm[c] >= 0]
        if conflicts:
            fit[self.pm[conflicts]] = False
        if self.state.vm_w[k] == 2:
            ok = fit.all(axis=1)
            g = np.where(ok, gain.sum(axis=1), -np.inf)
            if not ok.any():
                return None
            i = int(np.argmax(g))
            return i, BOTH
        g = np.where(fit, gain, -np.inf).ravel()
        if not fit.any():
            return None
        idx = int(np.argmax(g))
        return idx // 2, idx % 2


def _vbpp_stage(state: ClusterState, budget: int, kind):
    """Target placement after removing ``budget`` worst VMs and repacking them best-fit."""
    virt = _Virtual(state)
    legal_any = pair_mask(state).any(axis=1)
    removed = []
    for _ in range(budget):
        cands = [k for k in range(state.n_vms) if virt.pm[k] >= 0 and legal_any[k]]
        if not cands:
            break
        k = max(cands, key=lambda k: (virt.removal_gain(k, kind), int(state.vm_cpu[k]), -k))
        virt.lift(k)
        removed.append(k)
    while True:
        trial = _Virtual(state)
        for k in removed:
            trial.lift(k)
        failed = None
        for k in sorted(removed, key=lambda k: (-int(state.vm_cpu[k]), k)):
            slot = trial.best_slot(k, kind)
            if slot is None:
                failed = k
                break
            trial.put(k, *slot)
        if failed is None:
            return trial.pm, trial.numa
        removed.remove(failed)  # returns to its source; not counted


def alpha_vbpp(mapping: ClusterState, mnl: int, alpha: int = 10,
               objective: ObjectiveSpec = ObjectiveSpec()) -> MigrationPlan:
    """ceil(mnl / alpha) stages of remove-alpha-worst-then-repack."""
    if alpha <= 0:
        raise InvalidParameter("alpha must be positive")
    kind = base_kind(objective.kind)
    ep = reset(mapping, mnl, objective)
    actions = []
    for _ in range(math.ceil(mnl / alpha) if mnl else 0):
        if ep.done:
            break
        budget = min(alpha, ep.remaining)
        tpm, tnuma = _vbpp_stage(ep.state, budget, kind)
        order = order_migrations(ep.state, tpm, tnuma, allow_relay=False)
        for a in order.actions[:ep.remaining]:
            if ep.done:
                break
            ep, _ = step(ep, a)
            actions.append(a)
    return MigrationPlan(actions, mnl)


# --- UCT --------------------------------------------------------------------------------

class _Node:
    __slots__ = ("state", "depth", "actions", "untried", "children", "visits", "total",
                 "best", "best_traj", "terminal", "solved")

    def __init__(self, state, depth, terminal):
        self.state = state
        self.depth = depth
        self.children: dict[int, "_Node"] = {}
        self.visits = 0
        self.total = 0.0
        self.best = -math.inf
        self.best_traj: list = []
        self.terminal = terminal
        self.actions = None
        self.untried = None
        self.solved = False


def _greedy_tail(state: ClusterState, steps: int, kind):
    """HA continuation for at most ``steps`` moves; returns (actions, final state)."""
    acts = []
    for _ in range(steps):
        c = ha_choice(state, kind)
        if c is None:
            break
        a = MigrationAction(c[0], c[1], c[2])
        state = apply_migration(state, a)
        acts.append(a)
    return acts, state


def mcts_reschedule(mapping: ClusterState, mnl: int, budget: int = 1000,
                    exploration_c: float = math.sqrt(2), seed: int = 0,
                    objective: ObjectiveSpec = ObjectiveSpec()) -> MigrationPlan:
    """Plain UCT over (VM, PM) moves with greedy rollouts.

    Each committed step runs ``budget`` simulations from the current root.
    Rollouts are deterministic, so each node is rolled out once and its value
    cached; fully explored subtrees are marked solved and skipped. The plan
    follows the best trajectory (tree prefix plus greedy tail) found so far.
    """
    if budget <= 0:
        raise InvalidParameter("budget must be positive")
    kind = base_kind(objective.kind)
    rng = np.random.default_rng(seed)
    ep = reset(mapping, mnl, objective)
    v0 = objective_value(mapping, kind)
    scale = max(v0, 1e-9)

    def value(state):
        return (v0 - objective_value(state, kind)) / scale

    def is_terminal(state, depth):
        return depth >= mnl or goal_reached(state, objective)

    def expand_actions(node):
        mask = pair_mask(node.state)
        pairs = np.argwhere(mask)
        node.actions = [(int(k), int(i)) for k, i in pairs]
        node.untried = list(rng.permutation(len(node.actions)))

    def rollout(node, prefix):
        tail, final = _greedy_tail(node.state, mnl - node.depth, kind)
        return value(final), prefix + tail

    def select_child(node):
        logn = math.log(max(node.visits, 1))
        best, best_u = None, -math.inf
        for c in node.children.values():
            if c.solved:
                continue
            u = c.total / c.visits + exploration_c * math.sqrt(logn / c.visits)
            if u > best_u:
                best, best_u = c, u
        return best

    def simulate(root, root_prefix):
        path = [root]
        prefix = list(root_prefix)
        node = root
        while True:
            if node.terminal:
                break
            if node.actions is None:
                expand_actions(node)
            if node.untried:
                idx = int(node.untried.pop())
                k, i = node.actions[idx]
                j = choose_numa(node.state, k, i, objective)
                a = MigrationAction(k, i, j)
                st = apply_migration(node.state, a)
                child = _Node(st, node.depth + 1, is_terminal(st, node.depth + 1))
                node.children[idx] = child
                prefix.append(a)
                v, traj = rollout(child, prefix)
                child.best, child.best_traj = v, traj
                path.append(child)
                if child.terminal or not pair_mask(st).any():
                    child.solved = child.terminal = True
                break
            nxt = select_child(node)
            if nxt is None:
                node.solved = True
                break
            idx = next(i for i, c in node.children.items() if c is nxt)
            prefix.append(MigrationAction(*node.actions[idx], _numa_of(nxt, node.actions[idx][0])))
            node = nxt
            path.append(node)
        leaf = path[-1]
        v, traj = leaf.best, leaf.best_traj
        for n in reversed(path):
            n.visits += 1
            n.total += v
            if v > n.best:
                n.best, n.best_traj = v, traj
        for n in reversed(path[:-1]):
            if n.actions is not None and not n.untried and all(c.solved for c in n.children.values()):
                n.solved = True

    def _numa_of(child, k):
        return int(child.state.vm_numa[k])

    root = _Node(mapping, 0, is_terminal(mapping, 0) or mnl == 0)
    # stopping now is always an option
    root.best, root.best_traj = value(mapping), []
    committed: list[MigrationAction] = []
    while not ep.done:
        for _ in range(budget):
            if root.solved or root.terminal:
                break
            simulate(root, committed)
        traj = root.best_traj
        if len(traj) <= len(committed):
            break
        a = traj[len(committed)]
        ep, _ = step(ep, a)
        committed.append(a)
        nxt = None
        if root.actions is not None:
            for idx, c in root.children.items():
                if root.actions[idx] == (a.vm, a.dest_pm) and int(c.state.vm_numa[a.vm]) == a.dest_numa:
                    nxt = c
                    break
        if nxt is None:
            nxt = _Node(ep.state, len(committed), is_terminal(ep.state, len(committed)))
            nxt.best, nxt.best_traj = value(ep.state), list(committed)
        if nxt.best < root.best:
            nxt.best, nxt.best_traj = root.best, root.best_traj
        root = nxt
    return MigrationPlan(committed, mnl)


def random_policy(mapping: ClusterState, mnl: int, seed: int = 0,
                  objective: ObjectiveSpec = ObjectiveSpec()) -> MigrationPlan:
    """Uniformly random legal (VM, PM) pair each step; ends early when none is legal."""
    rng = np.random.default_rng(seed)
    ep = reset(mapping, mnl, objective)
    actions = []
    while not ep.done:
        pairs = np.argwhere(pair_mask(ep.state))
        if len(pairs) == 0:
            break
        k, i = pairs[rng.integers(len(pairs))]
        a = MigrationAction(int(k), int(i))
        ep, _ = step(ep, a)
        actions.append(ep.trace[-1].action)
    return MigrationPlan(actions, mnl)
