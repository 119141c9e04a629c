"""PPO training for the two-stage policy."""
from __future__ import annotations

import copy
import csv
import json
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .cluster import ClusterState
from .features import NormStats
from .objectives import MinMnlToGoal, ObjectiveSpec, XCoreFR, base_kind, exact_value
from .policy import PolicyConfig, TwoStagePolicy, make_batch, masked_log_softmax, save_checkpoint
from .rollout import StepData, Trajectory, run_episodes


class TrainingDiverged(RuntimeError):
    def __init__(self, message, dump: dict | None = None):
        self.dump = dump or {}
        super().__init__(message)


def compute_gae(rewards, values, dones, gamma: float = 0.99, lam: float = 0.95,
                last_value: float = 0.0):
    """Generalised advantage estimates and returns (advantages + values).

    ``dones[t]`` marks that the episode ended after step ``t``; the value after
    a terminal step is 0.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=bool)
    if not len(r) == len(v) == len(d):
        raise ValueError(f"length mismatch: {len(r)} rewards, {len(v)} values, {len(d)} dones")
    adv = np.zeros_like(r)
    gae = 0.0
    for t in reversed(range(len(r))):
        nonterminal = 0.0 if d[t] else 1.0
        nxt = v[t + 1] if t + 1 < len(r) else last_value
        delta = r[t] + gamma * nxt * nonterminal - v[t]
        gae = delta + gamma * lam * nonterminal * gae
        adv[t] = gae
    return adv, adv + v


def gae_direct(rewards, values, dones, gamma: float = 0.99, lam: float = 0.95,
               last_value: float = 0.0):
    """Same quantity as :func:`compute_gae` from the explicit sum of discounted TD errors."""
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=bool)
    n = len(r)
    delta = np.empty(n)
    for t in range(n):
        nxt = 0.0 if d[t] else (v[t + 1] if t + 1 < n else last_value)
        delta[t] = r[t] + gamma * nxt - v[t]
    adv = np.zeros(n)
    for t in range(n):
        for l in range(n - t):
            adv[t] += (gamma * lam) ** l * delta[t + l]
            if d[t + l]:
                break
    return adv, adv + v


@dataclass
class PPOConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    lr: float = 3e-4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    minibatch: int = 64


@dataclass
class RolloutBuffer:
    steps: list = field(default_factory=list)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @classmethod
    def from_trajectories(cls, trajs: Sequence[Trajectory], gamma: float, lam: float,
                          normalize: bool = True) -> "RolloutBuffer":
        steps, advs, rets = [], [], []
        for t in trajs:
            if not t.steps:
                continue
            a, r = compute_gae([float(s.reward) for s in t.steps], [s.value for s in t.steps],
                               [s.done for s in t.steps], gamma, lam)
            steps.extend(t.steps)
            advs.append(a)
            rets.append(r)
        adv = np.concatenate(advs) if advs else np.zeros(0)
        ret = np.concatenate(rets) if rets else np.zeros(0)
        if normalize and len(adv) > 1:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        return cls(steps, adv, ret)

    def __len__(self):
        return len(self.steps)


def evaluate_steps(policy: TwoStagePolicy, steps: Sequence[StepData]):
    """(log_prob, entropy, value) tensors of the recorded actions under ``policy``."""
    batch = make_batch([s.feat for s in steps], policy.dtype)
    vm, pm, logits, scores = policy.trunk(batch)
    m, n = logits.shape[1], pm.shape[1]
    vm_mask = np.zeros((len(steps), m), dtype=bool)
    pm_mask = np.zeros((len(steps), n), dtype=bool)
    for r, s in enumerate(steps):
        vm_mask[r, :len(s.vm_mask)] = s.vm_mask
        pm_mask[r, :len(s.pm_mask)] = s.pm_mask
    vm_mask = torch.as_tensor(vm_mask)
    pm_mask = torch.as_tensor(pm_mask)
    sel = torch.as_tensor([s.vm for s in steps])
    dest = torch.as_tensor([s.pm for s in steps])
    lp_vm = masked_log_softmax(logits, vm_mask)
    lp_pm = masked_log_softmax(policy.pm_logits(sel, vm, pm, scores, batch), pm_mask)
    rows = torch.arange(len(steps))
    logp = lp_vm[rows, sel] + lp_pm[rows, dest]

    def entropy(lp, mask):
        safe = lp.masked_fill(~mask, 0.0)  # keeps -inf out of the backward pass
        return -(safe.exp() * safe).masked_fill(~mask, 0.0).sum(-1)

    ent = entropy(lp_vm, vm_mask) + entropy(lp_pm, pm_mask)
    return logp, ent, policy.value(vm, pm, batch)


def clipped_surrogate(ratio, adv, clip: float):
    """Per-sample PPO objective min(r * A, clip(r) * A)."""
    return torch.minimum(ratio * adv, torch.clamp(ratio, 1 - clip, 1 + clip) * adv)


def ppo_update(policy: TwoStagePolicy, optimizer, buffer: RolloutBuffer, cfg: PPOConfig,
               rng: np.random.Generator) -> dict:
    """Clipped-surrogate epochs over ``buffer``; returns mean loss statistics."""
    n = len(buffer)
    old_logp = torch.as_tensor([s.logp for s in buffer.steps], dtype=policy.dtype)
    adv = torch.as_tensor(buffer.advantages, dtype=policy.dtype)
    ret = torch.as_tensor(buffer.returns, dtype=policy.dtype)
    stats = {"policy_loss": [], "value_loss": [], "entropy": [], "approx_kl": [], "clip_frac": []}
    policy.train()
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            idx = perm[start:start + cfg.minibatch]
            logp, ent, value = evaluate_steps(policy, [buffer.steps[i] for i in idx])
            ratio = torch.exp(logp - old_logp[idx])
            pl = -clipped_surrogate(ratio, adv[idx], cfg.clip).mean()
            vl = 0.5 * ((value - ret[idx]) ** 2).mean()
            loss = pl + cfg.value_coef * vl - cfg.entropy_coef * ent.mean()
            if not torch.isfinite(loss):
                raise TrainingDiverged("non-finite PPO loss", {
                    "policy_loss": pl.item(), "value_loss": vl.item(),
                    "entropy": ent.mean().item(), "ratio_max": ratio.max().item()})
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(policy.parameters(), cfg.max_grad_norm)
            optimizer.step()
            with torch.no_grad():
                stats["policy_loss"].append(float(pl))
                stats["value_loss"].append(float(vl))
                stats["entropy"].append(float(ent.mean()))
                stats["approx_kl"].append(float((old_logp[idx] - logp).mean()))
                stats["clip_frac"].append(float(((ratio - 1).abs() > cfg.clip).float().mean()))
    policy.eval()
    return {k: float(np.mean(v)) if v else 0.0 for k, v in stats.items()}


@dataclass
class TrainConfig:
    mnl: int = 4
    objective: str = "fr16"
    c: int = 64
    updates: int = 300
    episodes_per_update: int = 32
    eval_every: int = 10
    divergence_patience: int = 8  # consecutive worsening validation evals before halting
    time_budget: float | None = None  # seconds; stop after the update that crosses it
    seed: int = 0
    dataset_weights: list | None = None  # sampling weight per training set
    ppo: PPOConfig = field(default_factory=PPOConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)


def _check_telescoping(trajs: Sequence[Trajectory], spec: ObjectiveSpec):
    """Sum of rewards times c equals the episode's fragment reduction, exactly."""
    kind = base_kind(spec.kind)
    if isinstance(spec.kind, MinMnlToGoal) or not isinstance(kind, XCoreFR):
        return
    for t in trajs:
        before = int((t.mapping.free_cpu % kind.x).sum())
        after = int((t.final_state.free_cpu % kind.x).sum())
        total = sum((s for s in t.rewards), Fraction(0)) * spec.c
        if total != before - after:
            raise AssertionError(f"reward sum {total} != fragment reduction {before - after}")


class Trainer:
    """Single-writer PPO loop; deterministic for a fixed seed."""

    def __init__(self, train_sets: Sequence[Sequence[ClusterState]], val: Sequence[ClusterState],
                 cfg: TrainConfig = TrainConfig(), norm: NormStats | None = None):
        from .objectives import parse_objective
        self.cfg = cfg
        self.spec = parse_objective(cfg.objective, cfg.c)
        self.train_sets = [list(s) for s in train_sets]
        if not any(self.train_sets):
            raise ValueError("no training mappings")
        w = np.asarray(cfg.dataset_weights or [len(s) for s in self.train_sets], dtype=float)
        self.weights = w / w.sum()
        self.val = list(val)
        torch.manual_seed(cfg.seed)
        self.rng = np.random.default_rng(cfg.seed)
        if norm is None:
            pool = [m for s in self.train_sets for m in s]
            norm = NormStats.fit(pool[:500], cfg.policy.x)
        self.policy = TwoStagePolicy(cfg.policy, norm)
        self.policy.eval()
        self.optimizer = torch.optim.Adam(self.policy.parameters(), lr=cfg.ppo.lr)
        self.update = 0
        self.history: list[dict] = []
        self.best_val = float("inf")
        self.best_state = copy.deepcopy(self.policy.state_dict())
        self.val_trend: list[float] = []

    def sample_mappings(self, count: int) -> list[ClusterState]:
        sets = self.rng.choice(len(self.train_sets), size=count, p=self.weights)
        return [self.train_sets[s][int(self.rng.integers(len(self.train_sets[s])))] for s in sets]

    def evaluate(self, mappings: Sequence[ClusterState]) -> float:
        rngs = [np.random.default_rng(0) for _ in mappings]
        trajs = run_episodes(self.policy, mappings, self.cfg.mnl, self.spec, rngs, greedy=True)
        return float(np.mean([t.objective for t in trajs]))

    def step_update(self) -> dict:
        cfg = self.cfg
        maps = self.sample_mappings(cfg.episodes_per_update)
        seeds = self.rng.integers(2**63, size=len(maps))
        rngs = [np.random.default_rng(int(s)) for s in seeds]
        trajs = run_episodes(self.policy, maps, cfg.mnl, self.spec, rngs, record=True)
        _check_telescoping(trajs, self.spec)
        buf = RolloutBuffer.from_trajectories(trajs, cfg.ppo.gamma, cfg.ppo.gae_lambda)
        stats = ppo_update(self.policy, self.optimizer, buf, cfg.ppo, self.rng) if len(buf) else {}
        self.update += 1
        row = {"update": self.update,
               "mean_episode_reward": float(np.mean([float(t.total_reward) for t in trajs])),
               "mean_final_objective": float(np.mean([t.objective for t in trajs])),
               "steps": len(buf), **stats}
        if self.val and (self.update % cfg.eval_every == 0):
            v = self.evaluate(self.val)
            row["val_objective"] = v
            if v < self.best_val:
                self.best_val = v
                self.best_state = copy.deepcopy(self.policy.state_dict())
            self.val_trend.append(v)
            tail = self.val_trend[-(cfg.divergence_patience + 1):]
            if (len(tail) == cfg.divergence_patience + 1
                    and all(b > a for a, b in zip(tail, tail[1:]))):
                self.history.append(row)
                raise TrainingDiverged(
                    f"validation objective worsened {cfg.divergence_patience} evals in a row",
                    {"val_trend": tail, "update": self.update})
        self.history.append(row)
        return row

    def best_policy(self) -> TwoStagePolicy:
        p = TwoStagePolicy(self.cfg.policy, self.policy.norm)
        p.load_state_dict(self.best_state)
        p.eval()
        return p

    # resumable state: weights, optimiser and every RNG
    def save_state(self, path) -> None:
        torch.save({"update": self.update, "policy": self.policy.state_dict(),
                    "optimizer": self.optimizer.state_dict(), "rng": self.rng.bit_generator.state,
                    "torch_rng": torch.get_rng_state(), "best_val": self.best_val,
                    "best_state": self.best_state, "val_trend": self.val_trend,
                    "history": self.history}, path)

    def load_state(self, path) -> None:
        s = torch.load(path, map_location="cpu", weights_only=False)
        self.update = s["update"]
        self.policy.load_state_dict(s["policy"])
        self.optimizer.load_state_dict(s["optimizer"])
        self.rng.bit_generator.state = s["rng"]
        torch.set_rng_state(s["torch_rng"])
        self.best_val = s["best_val"]
        self.best_state = s["best_state"]
        self.val_trend = s["val_trend"]
        self.history = s["history"]


def write_curves(history: Sequence[dict], path) -> None:
    keys = []
    for row in history:
        keys.extend(k for k in row if k not in keys)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        w.writerows(history)


@dataclass
class TrainResult:
    policy: TwoStagePolicy
    history: list
    best_val: float
    halted: str | None = None


def train(train_sets, val, cfg: TrainConfig = TrainConfig(), out_dir=None,
          log=None) -> TrainResult:
    """Run PPO, keeping the best-by-validation weights; writes checkpoint and curves to ``out_dir``."""
    if train_sets and isinstance(train_sets[0], ClusterState):
        train_sets = [train_sets]
    trainer = Trainer(train_sets, val, cfg)
    t0 = time.perf_counter()
    halted = None
    try:
        while trainer.update < cfg.updates:
            row = trainer.step_update()
            if log is not None:
                log(row)
            if cfg.time_budget is not None and time.perf_counter() - t0 > cfg.time_budget:
                halted = "time budget reached"
                break
    except TrainingDiverged as e:
        halted = f"{e} {json.dumps(e.dump)}"
    if not trainer.val:
        trainer.best_state = copy.deepcopy(trainer.policy.state_dict())
    policy = trainer.best_policy()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(policy, out / "policy.pt", {"train_config": asdict(cfg), "best_val": trainer.best_val})
        write_curves(trainer.history, out / "curves.csv")
        if halted:
            (out / "halt_report.txt").write_text(halted + "\n")
    return TrainResult(policy, trainer.history, trainer.best_val, halted)
