"""Greedy single-trajectory latency on a 280-PM cluster against the 5-second budget."""
import argparse

from vmresched.bench import AlgoSpec, run_bench
from vmresched.datasets import GeneratorConfig, generate_cluster, toy_config
from vmresched.features import NormStats
from vmresched.policy import TwoStagePolicy, load_checkpoint


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--checkpoint", help="defaults to an untrained policy of default size")
    p.add_argument("--mnl", type=int, default=50)
    p.add_argument("--out", default="runs/latency")
    a = p.parse_args()
    big = generate_cluster(GeneratorConfig(pm_count=280, workload_level=0.85, seed=1,
                                           pm_profiles=[(88, 256), (128, 364)]))
    if a.checkpoint:
        policy = load_checkpoint(a.checkpoint)
    else:
        policy = TwoStagePolicy(norm=NormStats.fit([generate_cluster(toy_config(s)) for s in range(20)]))
    rep = run_bench([big], [AlgoSpec("policy", {"checkpoint": policy})], [a.mnl], out=a.out, serial=True)
    row = rep.rows[0]
    print(f"{big.n_pms} PMs, {big.n_vms} VMs: {row['plan_length']} moves in {row['wall_clock']:.2f}s "
          f"(budget met: {row['budget_met']})")


if __name__ == "__main__":
    main()
