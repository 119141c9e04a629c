"""Train the toy-scale policy (8 PMs, 24 VMs, MNL 4) and report held-out results.

    python3 scripts/train_toy.py --out runs/toy --updates 100
"""
import argparse
import json

import numpy as np

from vmresched.baselines import random_policy
from vmresched.cluster import total_fragments
from vmresched.datasets import generate_dataset, toy_config
from vmresched.exact import MipInstance, solve_exact
from vmresched.ppo import TrainConfig, train
from vmresched.rollout import greedy_plan
from vmresched.simulator import rollout_plan


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="runs/toy")
    p.add_argument("--updates", type=int, default=100)
    p.add_argument("--episodes", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()

    train_maps = generate_dataset(toy_config(0), 2000)
    val = generate_dataset(toy_config(100_000), 50)
    held = generate_dataset(toy_config(1000), 50)
    cfg = TrainConfig(mnl=4, updates=a.updates, episodes_per_update=a.episodes, seed=a.seed,
                      divergence_patience=1000)
    res = train(train_maps, val, cfg, out_dir=a.out,
                log=lambda r: print(json.dumps(r)) if "val_objective" in r else None)

    frag = lambda s: total_fragments(s, 16)
    greedy = [frag(greedy_plan(res.policy, m, 4).final_state) for m in held]
    rand = [np.mean([frag(rollout_plan(m, random_policy(m, 4, seed=t)).final_state) for t in range(20)])
            for m in held]
    exact = [solve_exact(MipInstance(m, 4)).objective for m in held]
    start = [frag(m) for m in held]
    print(json.dumps({
        "halted": res.halted,
        "greedy_beats_random": int(np.sum(np.array(greedy) <= np.array(rand))),
        "greedy_reduction": float(np.mean(np.subtract(start, greedy))),
        "exact_reduction": float(np.mean(np.subtract(start, exact))),
    }, indent=1))


if __name__ == "__main__":
    main()
