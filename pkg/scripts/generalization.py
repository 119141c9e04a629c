"""Benchmark a checkpoint against the baselines across workload levels and MNLs.

    python3 scripts/generalization.py runs/toy/policy.pt --out runs/toy/generalization.csv
"""
import argparse

from vmresched.bench import AlgoSpec, generalization_grid
from vmresched.datasets import toy_config


def main():
    p = argparse.ArgumentParser()
    p.add_argument("checkpoint")
    p.add_argument("--levels", type=float, nargs="+", default=[0.5, 0.6, 0.7, 0.8])
    p.add_argument("--mnls", type=int, nargs="+", default=[2, 4, 8])
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--out", default="generalization.csv")
    a = p.parse_args()
    algos = [AlgoSpec("policy", {"checkpoint": a.checkpoint}), AlgoSpec("ha"), AlgoSpec("vbpp"),
             AlgoSpec("random")]
    rows = generalization_grid(algos, toy_config(5000), a.levels, a.mnls, a.count, out=a.out)
    for level in a.levels:
        for mnl in a.mnls:
            cell = [r for r in rows if r["workload_level"] == level and r["mnl"] == mnl]
            means = {}
            for r in cell:
                means.setdefault(r["algorithm"].split("(")[0], []).append(r["final_objective"])
            print(level, mnl, {k: round(sum(v) / len(v), 4) for k, v in means.items()})


if __name__ == "__main__":
    main()
