"""Command-line front end: solve, simulate, check, sweep, verify, scale-bench.

Exit codes: 0 success, 2 infeasible (or a failed check), 1 any other error.
Every document written is a deterministic function of (config, flags, seed).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .instances import random_system
from .optimizer import SolveOptions, Status, check_policy, feasibility_minmax, solve_m2
from .primitives import ConfigError, StaticPolicy, SystemSpec, read_policy, read_system
from .simulator import SimulationError, simulate
from .worst_case import verify

log = logging.getLogger(__name__)

EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors, which this tool reserves for infeasibility
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class ExperimentPlan:
    config: Path
    deltas: list
    epsilons: list
    replications: int = 1
    horizon: float | None = None
    warmup: float | None = None
    seed: int = 0
    out: Path = field(default_factory=lambda: Path("."))

    def __post_init__(self):
        if not self.deltas or not self.epsilons:
            raise ValueError("sweep needs at least one delta and one epsilon")
        if any(d <= 0 for d in self.deltas):
            raise ValueError("delta values must be positive")
        if any(not 0 < e < 1 for e in self.epsilons):
            raise ValueError("epsilon values must lie in (0, 1)")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")


def _dump(doc, path: Path | None):
    text = json.dumps(_plain(doc), indent=2, sort_keys=True, allow_nan=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, Status):
        return obj.value
    return obj


def _system(args) -> SystemSpec:
    if not args.config:
        raise UsageError("--config is required")
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    system = read_system(path)
    return system.with_sla(delta=args.delta, epsilon=args.epsilon)


def _uniform_epsilon(system: SystemSpec) -> float:
    return float(max(s.sla_epsilon for s in system.servers))


def _infeasible_message(system: SystemSpec, restarts: int, seed: int) -> str:
    eps = _uniform_epsilon(system)
    floor, _ = feasibility_minmax(system, eps, restarts=restarts, seed=seed)
    delta = min(s.sla_threshold for s in system.servers)
    verdict = "exceeds" if floor >= delta else "is below"
    return (f"no SLA-feasible static policy found. The min over routings of the largest "
            f"per-server bound floor 2*Gamma_a_bar at epsilon={eps:g} is {floor:.4f}, "
            f"which {verdict} delta={delta:g}.")


def cmd_solve(args) -> int:
    system = _system(args)
    opts = SolveOptions(restarts=args.restarts, seed=args.seed)
    res = solve_m2(system, opts)
    out = Path(args.out)
    doc = res.to_dict()
    if res.status is Status.INFEASIBLE:
        msg = _infeasible_message(system, min(args.restarts, 16), args.seed)
        doc["message"] = msg
        _dump(doc, out / "diagnostics.json")
        print(msg, file=sys.stderr)
        return EXIT_INFEASIBLE
    _dump(res.policy.to_dict(), out / "policy.json")
    _dump(doc, out / "diagnostics.json")
    print(f"{res.status.value}: total power {res.objective:.2f}; policy written to {out / 'policy.json'}")
    return EXIT_OK


def _load_policy(args) -> StaticPolicy:
    if not args.policy:
        raise UsageError("--policy is required")
    return read_policy(args.policy)


def cmd_simulate(args) -> int:
    system = _system(args)
    policy = _load_policy(args)
    rep = simulate(system, policy, horizon=args.horizon, warmup=args.warmup,
                   replications=args.replications, seed=args.seed)
    _dump(rep.to_dict(), Path(args.out) if args.out else None)
    return EXIT_OK


def cmd_check(args) -> int:
    system = _system(args)
    policy = _load_policy(args)
    report = check_policy(system, policy)
    _dump(report.to_dict(), Path(args.out) if args.out else None)
    return EXIT_OK if report.ok else EXIT_INFEASIBLE


def run_sweep(plan: ExperimentPlan, restarts: int = 32) -> dict:
    """Solve and simulate every (delta, epsilon) cell; infeasible cells are recorded, not fatal."""
    base = read_system(plan.config)
    cells = []
    for eps in plan.epsilons:
        for delta in plan.deltas:
            system = base.with_sla(delta=delta, epsilon=eps)
            res = solve_m2(system, SolveOptions(restarts=restarts, seed=plan.seed))
            cell = {"delta": delta, "epsilon": eps, "status": res.status.value,
                    "objective": res.objective, "total_power": None, "total_power_se": None,
                    "violation_prob": None, "violation_upper": None}
            if res.policy is not None:
                rep = simulate(system, res.policy, horizon=plan.horizon, warmup=plan.warmup,
                               replications=plan.replications, seed=plan.seed)
                cell.update(total_power=rep.total_power, total_power_se=rep.total_power_se,
                            violation_prob=[s.violation_prob for s in rep.servers],
                            violation_upper=[s.violation_upper for s in rep.servers],
                            speeds=res.policy.speeds.tolist())
            cells.append(cell)
    return {"config": str(plan.config), "seed": plan.seed, "replications": plan.replications,
            "server_ids": [s.id for s in base.servers], "cells": cells}


def sweep_columns(doc: dict) -> str:
    """Flat tab-separated rows, one per (cell, server), for plotting."""
    lines = ["delta\tepsilon\tstatus\ttotal_power\tserver\tviolation_prob"]
    for c in doc["cells"]:
        probs = c["violation_prob"] or [math.nan] * len(doc["server_ids"])
        tp = "nan" if c["total_power"] is None else f"{c['total_power']:.6f}"
        for sid, pv in zip(doc["server_ids"], probs):
            lines.append(f"{c['delta']:g}\t{c['epsilon']:g}\t{c['status']}\t{tp}\t{sid}\t{pv:.8g}")
    return "\n".join(lines) + "\n"


def cmd_sweep(args) -> int:
    plan = ExperimentPlan(Path(args.config) if args.config else None, args.delta_values, args.epsilon_values,
                          args.replications, args.horizon, args.warmup, args.seed, Path(args.out))
    if plan.config is None or not plan.config.is_file():
        raise UsageError("--config must name an existing file")
    doc = run_sweep(plan, restarts=args.restarts)
    _dump(doc, plan.out / "sweep.json")
    (plan.out / "sweep.tsv").write_text(sweep_columns(doc))
    for c in doc["cells"]:
        tp = "-" if c["total_power"] is None else f"{c['total_power']:.2f}"
        print(f"delta={c['delta']:g} epsilon={c['epsilon']:g} {c['status']} power={tp}")
    return EXIT_OK


def cmd_verify(args) -> int:
    rows = verify(draws=args.draws, seed=args.seed, quadratic_sign=-1.0 if args.flip_quadratic_sign else 1.0)
    width = max(len(r.name) for r in rows)
    for r in rows:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.detail}")
    return EXIT_OK if all(r.passed for r in rows) else EXIT_ERROR


def scale_bench(sizes, ratio: int = 10, seed: int = 0, restarts: int = 4, repeats: int = 1):
    rows = []
    for n in sizes:
        system = random_system(n, ratio=ratio, seed=seed)
        times, res = [], None
        for _ in range(repeats):
            t0 = time.perf_counter()
            res = solve_m2(system, SolveOptions(restarts=restarts, seed=seed, max_iterations=100_000))
            times.append(time.perf_counter() - t0)
        rows.append({"servers": n, "applications": system.n_apps, "status": res.status.value,
                     "objective": res.objective, "seconds": statistics.median(times)})
    return rows


def cmd_scale_bench(args) -> int:
    rows = scale_bench(args.sizes, args.ratio, args.seed, args.restarts, args.repeats)
    lines = ["servers\tapplications\tstatus\tobjective\tseconds"]
    lines += [f"{r['servers']}\t{r['applications']}\t{r['status']}\t{r['objective']:.2f}\t{r['seconds']:.3f}"
              for r in rows]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="robustpower", description="Robust static routing and speed planning for PS server farms.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, sla=True):
        sp.add_argument("--config", help="system config (JSON or YAML)")
        if sla:
            sp.add_argument("--delta", type=float, help="override every server's SLA threshold")
            sp.add_argument("--epsilon", type=float, help="override every server's violation budget")
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("solve", help="plan a static policy")
    common(sp)
    sp.add_argument("--restarts", type=int, default=32)
    sp.add_argument("--out", default=".", help="output directory for policy.json and diagnostics.json")
    sp.set_defaults(func=cmd_solve)

    for name, func, hlp in (("simulate", cmd_simulate, "simulate a policy"),
                            ("check", cmd_check, "evaluate a policy against the SLA bound")):
        sp = sub.add_parser(name, help=hlp)
        common(sp)
        sp.add_argument("--policy")
        sp.add_argument("--out", help="output file (default: stdout)")
        if name == "simulate":
            sp.add_argument("--horizon", type=float)
            sp.add_argument("--warmup", type=float)
            sp.add_argument("--replications", type=int, default=1)
        sp.set_defaults(func=func)

    sp = sub.add_parser("sweep", help="solve and simulate over a grid of delta and epsilon")
    common(sp, sla=False)
    sp.add_argument("--delta", dest="delta_values", type=float, nargs="+", default=[5.0, 8.0, 11.0])
    sp.add_argument("--epsilon", dest="epsilon_values", type=float, nargs="+", default=[0.01])
    sp.add_argument("--horizon", type=float)
    sp.add_argument("--warmup", type=float)
    sp.add_argument("--replications", type=int, default=1)
    sp.add_argument("--restarts", type=int, default=32)
    sp.add_argument("--out", default=".", help="output directory for sweep.json and sweep.tsv")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("verify", help="run the worst-case oracle suite")
    sp.add_argument("--draws", type=int, default=200)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--flip-quadratic-sign", action="store_true", help="negative control")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("scale-bench", help="time the planner on random instances")
    sp.add_argument("--sizes", type=int, nargs="+", default=[50, 100, 200])
    sp.add_argument("--ratio", type=int, default=10)
    sp.add_argument("--restarts", type=int, default=4)
    sp.add_argument("--repeats", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_scale_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ConfigError, SimulationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
