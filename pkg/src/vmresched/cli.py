"""Command-line entry point.

Exit codes: 0 success, 1 validation failure, 2 infeasible, 3 strict budget violation.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import fields
from pathlib import Path

from .bench import DEFAULT_BUDGET, AlgoSpec, BudgetExceeded, emit_timeline, format_timeline, run_bench, timeline_rows
from .cluster import InfeasibleMigration, InvalidParameter, ValidationError
from .datasets import (GeneratorConfig, MappingParseError, describe, generate_dataset, load_dataset,
                       load_mapping, load_plan, save_dataset, save_plan, split_dataset)
from .objectives import parse_objective
from .simulator import PlanError, rollout_plan

EXIT_OK, EXIT_INVALID, EXIT_INFEASIBLE, EXIT_BUDGET = 0, 1, 2, 3


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(0))
    p.add_argument("--mnl", type=int, default=d(50), help="migration number limit")
    p.add_argument("--objective", default=d("fr16"),
                   help="fr<X>, mem<GB>, mix:<lam>:<a>:<b> or goal:<target>:<base>")
    p.add_argument("--budget-secs", type=float, default=d(DEFAULT_BUDGET))


def _algo_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--algo", default="ha", help="ha, vbpp, mcts, random, exact, pop or policy")
    p.add_argument("--alpha", type=int, default=10)
    p.add_argument("--budget", type=int, default=1000, help="MCTS simulations per step")
    p.add_argument("--partitions", type=int, default=16)
    p.add_argument("--time-limit", type=float, default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--vm-q", type=float, default=0.0)
    p.add_argument("--pm-q", type=float, default=0.0)


def _algo_spec(name: str, a) -> AlgoSpec:
    if name == "vbpp":
        return AlgoSpec(name, {"alpha": a.alpha})
    if name == "mcts":
        return AlgoSpec(name, {"budget": a.budget})
    if name == "exact":
        return AlgoSpec(name, {"time_limit": a.time_limit or 60.0})
    if name == "pop":
        return AlgoSpec(name, {"partitions": a.partitions, "time_limit": a.time_limit or a.budget_secs})
    if name == "policy":
        if not a.checkpoint:
            raise InvalidParameter("--algo policy needs --checkpoint")
        return AlgoSpec(name, {"checkpoint": a.checkpoint, "k": a.k, "vm_q": a.vm_q, "pm_q": a.pm_q})
    return AlgoSpec(name)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vmresched", description="VM rescheduling workbench")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="generate synthetic mappings")
    g.add_argument("--config", help="JSON file of generator fields")
    g.add_argument("--pms", type=int)
    g.add_argument("--vms", type=int, help="fixed VM count instead of a workload target")
    g.add_argument("--workload", type=float)
    g.add_argument("--affinity", type=float)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--split", action="store_true", help="write train/val/test subdirectories")
    g.add_argument("--out", required=True)

    v = sub.add_parser("validate", parents=[common], help="check mappings (and optionally a plan)")
    v.add_argument("mappings", nargs="+")
    v.add_argument("--plan")

    s = sub.add_parser("solve", parents=[common], help="reschedule one mapping")
    s.add_argument("mapping")
    _algo_flags(s)
    s.add_argument("--out", help="plan file to write")
    s.add_argument("--timeline", help="timeline output prefix")
    s.add_argument("--strict", action="store_true", help="exit 3 when the budget is exceeded")

    t = sub.add_parser("train", parents=[common], help="PPO training")
    t.add_argument("--train", nargs="+", required=True, help="training mapping files or directories")
    t.add_argument("--weights", type=float, nargs="+", help="sampling weight per --train path")
    t.add_argument("--val", required=True)
    t.add_argument("--config", help="JSON file of training fields")
    t.add_argument("--updates", type=int)
    t.add_argument("--time-budget", type=float, help="wall-clock seconds for training")
    t.add_argument("--out", required=True)

    e = sub.add_parser("evaluate", parents=[common], help="risk-seeking evaluation of a checkpoint")
    e.add_argument("mappings")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--k", type=int, default=16)
    e.add_argument("--vm-q", type=float, default=0.0)
    e.add_argument("--pm-q", type=float, default=0.0)
    e.add_argument("--tune", help="validation mappings; grid-search the quantiles first")
    e.add_argument("--out", help="JSON results file")

    b = sub.add_parser("bench", parents=[common], help="benchmark algorithms")
    b.add_argument("mappings")
    b.add_argument("--algos", nargs="+", default=["ha"])
    b.add_argument("--mnls", type=int, nargs="+")
    _algo_flags(b)
    b.add_argument("--serial", action="store_true")
    b.add_argument("--strict", action="store_true")
    b.add_argument("--out", required=True)

    tl = sub.add_parser("timeline", parents=[common], help="per-step migration timeline")
    tl.add_argument("mapping")
    tl.add_argument("plan")
    tl.add_argument("--out", help="output prefix; prints the aligned table when omitted")
    return parser


def _cmd_generate(a) -> int:
    d = {}
    if a.config:
        d.update(json.loads(Path(a.config).read_text()))
    for key, val in (("pm_count", a.pms), ("vm_count", a.vms), ("workload_level", a.workload),
                     ("affinity_ratio", a.affinity)):
        if val is not None:
            d[key] = val
    d.setdefault("seed", a.seed)
    known = {f.name for f in fields(GeneratorConfig)}
    unknown = set(d) - known
    if unknown:
        raise InvalidParameter(f"unknown generator fields: {sorted(unknown)}")
    cfg = GeneratorConfig(**d)
    maps = generate_dataset(cfg, a.count)
    out = Path(a.out)
    if a.split:
        for name, part in zip(("train", "val", "test"), split_dataset(maps, seed=a.seed)):
            save_dataset(part, out / name)
    else:
        save_dataset(maps, out)
    (out / "_generator.json").write_text(json.dumps(cfg.to_dict(), indent=1) + "\n")
    print(f"wrote {len(maps)} mappings to {out}")
    return EXIT_OK


def _cmd_validate(a) -> int:
    spec = parse_objective(a.objective)
    bad = 0
    for path in a.mappings:
        try:
            for m in load_dataset(path):
                print(f"{path}: ok {json.dumps(describe(m))}")
                if a.plan:
                    res = rollout_plan(m, load_plan(a.plan), spec, mnl=max(a.mnl, 0) or None)
                    print(f"{a.plan}: ok, final objective {res.objective:.6f}")
        except (MappingParseError, ValidationError, InvalidParameter, PlanError) as e:
            print(f"{path}: {e}")
            bad += 1
    return EXIT_INVALID if bad else EXIT_OK


def _cmd_solve(a) -> int:
    from .bench import _run_algo
    spec = parse_objective(a.objective)
    m = load_mapping(a.mapping)
    algo = _algo_spec(a.algo, a)
    ordered = True
    t0 = time.perf_counter()
    if a.algo == "exact":
        from .exact import MipInstance, solve_exact
        r = solve_exact(MipInstance.from_state(m, a.mnl, spec), a.time_limit or 60.0)
        plan, ordered = r.plan, r.ordering_feasible
    else:
        plan = _run_algo(algo, m, a.mnl, spec, a.seed)
    wall = time.perf_counter() - t0
    res = rollout_plan(m, plan, spec, mnl=max(a.mnl, len(plan)))
    print(json.dumps({"algorithm": algo.label, "moves": len(plan),
                      "initial_objective": rollout_plan(m, [], spec).objective,
                      "final_objective": res.objective, "wall_clock": round(wall, 4),
                      "budget_met": wall <= a.budget_secs}))
    if a.out:
        save_plan(plan, a.out)
    if a.timeline:
        emit_timeline(m, plan, a.timeline, spec)
    if not ordered:
        print("no feasible migration order reaches the optimal assignment", file=sys.stderr)
        return EXIT_INFEASIBLE
    if a.strict and wall > a.budget_secs:
        return EXIT_BUDGET
    return EXIT_OK


def _load_train_config(a):
    from .policy import PolicyConfig
    from .ppo import PPOConfig, TrainConfig
    d = json.loads(Path(a.config).read_text()) if a.config else {}
    ppo = PPOConfig(**d.pop("ppo", {}))
    pol = PolicyConfig(**d.pop("policy", {}))
    cfg = TrainConfig(ppo=ppo, policy=pol, **d)
    cfg.seed, cfg.mnl, cfg.objective = a.seed, a.mnl, a.objective
    if a.updates is not None:
        cfg.updates = a.updates
    if a.time_budget is not None:
        cfg.time_budget = a.time_budget
    if a.weights:
        cfg.dataset_weights = list(a.weights)
    return cfg


def _cmd_train(a) -> int:
    from .ppo import train
    cfg = _load_train_config(a)
    sets = [load_dataset(p) for p in a.train]
    if cfg.dataset_weights and len(cfg.dataset_weights) != len(sets):
        raise InvalidParameter("--weights needs one value per --train path")
    val = load_dataset(a.val)
    res = train(sets, val, cfg, out_dir=a.out,
                log=lambda r: print(json.dumps(r), flush=True) if r["update"] % cfg.eval_every == 0 else None)
    print(json.dumps({"best_val_objective": res.best_val, "updates": len(res.history),
                      "halted": res.halted, "checkpoint": str(Path(a.out) / "policy.pt")}))
    return EXIT_OK


def _cmd_evaluate(a) -> int:
    import numpy as np
    from .policy import load_checkpoint
    from .risk import best_of_k, tune_quantiles
    spec = parse_objective(a.objective)
    policy = load_checkpoint(a.checkpoint)
    quantiles = (a.vm_q, a.pm_q)
    out = {}
    if a.tune:
        quantiles, scores = tune_quantiles(policy, load_dataset(a.tune), k=a.k, seed=a.seed,
                                           mnl=a.mnl, objective=spec)
        out["tuning"] = {f"{p[0]},{p[1]}": v for p, v in scores.items()}
    maps = load_dataset(a.mappings)
    objs = [best_of_k(m, policy, a.k, quantiles, a.seed + i, a.mnl, spec).objective
            for i, m in enumerate(maps)]
    out.update({"k": a.k, "quantiles": list(quantiles), "mean_objective": float(np.mean(objs)),
                "objectives": objs})
    print(json.dumps({k: v for k, v in out.items() if k != "objectives"}))
    if a.out:
        Path(a.out).write_text(json.dumps(out, indent=1) + "\n")
    return EXIT_OK


def _cmd_bench(a) -> int:
    spec = parse_objective(a.objective)
    maps = load_dataset(a.mappings)
    algos = [_algo_spec(n, a) for n in a.algos]
    mnls = a.mnls or [a.mnl]
    try:
        rep = run_bench(maps, algos, mnls, spec, a.budget_secs, out=a.out, serial=a.serial,
                        strict=a.strict, seed=a.seed)
    except BudgetExceeded as e:
        print(f"budget exceeded: {e}")
        return EXIT_BUDGET
    for g in rep.summary["groups"]:
        print(json.dumps(g))
    return EXIT_OK


def _cmd_timeline(a) -> int:
    spec = parse_objective(a.objective)
    m = load_mapping(a.mapping)
    plan = load_plan(a.plan)
    if a.out:
        emit_timeline(m, plan, a.out, spec)
    else:
        sys.stdout.write(format_timeline(timeline_rows(m, plan, spec)))
    return EXIT_OK


COMMANDS = {"generate": _cmd_generate, "validate": _cmd_validate, "solve": _cmd_solve,
            "train": _cmd_train, "evaluate": _cmd_evaluate, "bench": _cmd_bench,
            "timeline": _cmd_timeline}


def main(argv=None) -> int:
    a = build_parser().parse_args(argv)
    try:
        return COMMANDS[a.command](a)
    except (MappingParseError, ValidationError, PlanError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE if isinstance(e, PlanError) and isinstance(e.cause, InfeasibleMigration) \
            else EXIT_INVALID
    except InfeasibleMigration as e:
        print(f"infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except InvalidParameter as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
