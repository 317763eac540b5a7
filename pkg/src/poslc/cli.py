"""Command line entry point: ``poslc {simulate,sweep,analyze,solve-params}``."""

from __future__ import annotations

import argparse
import csv
import math
import sys

import numpy as np

from . import analysis
from .analysis import BoundParams, DomainError
from .batch import json_line, run_scenario
from .config import Scenario, load
from .lottery import ConfigError, sample_counts

PREDICATES = ("maxdl", "short-prefixes", "few-long-chains", "freq-pivots")


def _scenario(args) -> Scenario:
    if args.config is None:
        return Scenario()
    return load(args.config)


def cmd_simulate(args, require_grid: bool = False) -> int:
    sc = _scenario(args)
    if require_grid and not sc.sweep:
        raise ConfigError("sweep needs a [sweep] section with at least one axis")
    rows = run_scenario(sc, out_dir=args.out, seed=args.seed, jobs=args.jobs)
    print(f"{len(rows)} runs written to {args.out or sc.out_dir}", file=sys.stderr)
    return 0


def _trace_maxdl(path: str) -> tuple[bool, int, int]:
    """(witness held at every unique slot, unique slots, slots with witness)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "maxdl" not in reader.fieldnames:
            raise ConfigError(f"{path}: no maxdl column")
        vals = [row["maxdl"] for row in reader if row["maxdl"] != ""]
    held = sum(v == "1" for v in vals)
    return held == len(vals), len(vals), held


def _sampled_rows(args, predicates: list[str]) -> list[dict]:
    sc = _scenario(args)
    params = sc.params
    seed = params.seed if args.seed is None else args.seed
    k = params.budget_k if args.k is None else args.k
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    execs = [sample_counts(params, rng) for _ in range(args.samples)]
    eps1 = analysis.epsilon1_for(params.rho, params.beta)
    if not 0 < eps1 < 1:
        raise DomainError(f"rho={params.rho}, beta={params.beta} leave no slack (epsilon1={eps1:.4g})")
    rows = []
    for pred in predicates:
        row = {"predicate": pred}
        if pred == "short-prefixes":
            window = analysis.short_prefixes_window(params, k, args.epsilon2)
            bp = BoundParams(epsilon1=eps1, epsilon2=args.epsilon2, t_window=window)
            held = [analysis.check_short_prefixes(ex, k) for ex in execs]
            bound = analysis.bound_short_prefixes(params, bp)
            row["k"] = k
        elif pred == "few-long-chains":
            window = analysis.few_long_chains_window(params, k, args.epsilon2, args.epsilon3)
            bp = BoundParams(epsilon1=eps1, epsilon2=args.epsilon2, epsilon3=args.epsilon3, t_window=window)
            held = [analysis.check_few_long_chains(ex, k) for ex in execs]
            bound = analysis.bound_few_long_chains(params, bp, args.reading)
            row["k"] = k
        elif pred == "freq-pivots":
            bp = BoundParams(epsilon1=eps1, kappa=args.kappa, gamma=args.gamma)
            piv = analysis.bound_freq_pivots(params, bp)
            gamma = args.gamma if args.gamma is not None else piv.gamma
            if not math.isfinite(gamma):
                held = [True] * len(execs)  # no horizon can contain a gap this wide
            else:
                held = [analysis.check_freq_pivots(ex, int(gamma)) for ex in execs]
            bound = piv.bound
            row["gamma"] = gamma
        else:
            raise ConfigError(f"predicate {pred!r} needs --trace")
        fails = len(held) - sum(held)
        row.update(value=fails == 0, bound=bound, empirical=fails / len(held), n=len(held), seed=seed)
        rows.append(row)
    return rows


def cmd_analyze(args) -> int:
    predicates = args.predicate or []
    for pred in predicates:
        if pred not in PREDICATES:
            raise ConfigError(f"unknown predicate {pred!r}; choose from {', '.join(PREDICATES)}")
    if not predicates:
        return 0
    rows = []
    if args.trace:
        for pred in predicates:
            if pred != "maxdl":
                raise ConfigError(f"predicate {pred!r} works on sampled executions, not traces")
        for path in args.trace:
            ok, n, held = _trace_maxdl(path)
            rows.append({"predicate": "maxdl", "input": path, "value": ok, "bound": None,
                         "empirical": held / n if n else 1.0, "n": n, "seed": args.seed})
    else:
        rows = _sampled_rows(args, predicates)
    for row in rows:
        print(json_line(row))
    return 0


def cmd_solve_params(args) -> int:
    rho = analysis.solve_rho(args.beta, args.epsilon1)
    if rho is None:
        print(f"error: no positive rho satisfies the security condition for beta={args.beta}, "
              f"epsilon1={args.epsilon1}; it needs epsilon1 < 1 - 2*beta = {1 - 2 * args.beta:.6g}",
              file=sys.stderr)
        return 3
    out = analysis.solve_params(args.beta, args.epsilon1, args.k, args.t_h, args.kappa)
    if args.calibrate:
        prof = analysis.desk_profile(rho, args.beta, args.t_h, samples=args.calibrate, seed=args.seed or 0)
        out.update({
            "desk_samples": prof.samples,
            "desk_gap_max": prof.gap_max,
            "desk_gamma": prof.gamma,
            "desk_t_conf": prof.t_conf,
            "desk_t_live": prof.t_live,
            "desk_k_freshest": prof.k_freshest,
            "desk_k_equivocation": prof.k_equivocation,
        })
    print(json_line(out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="poslc")
    sub = ap.add_subparsers(dest="command", required=True)

    for name in ("simulate", "sweep"):
        p = sub.add_parser(name, help="run a scenario" if name == "simulate" else "run a scenario grid")
        p.add_argument("--config", help="scenario file")
        p.add_argument("--seed", type=int, help="base seed (replication r uses seed + r)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("analyze", help="evaluate predicates on traces or sampled executions")
    p.add_argument("--predicate", action="append", help=f"one of {', '.join(PREDICATES)}; repeatable")
    p.add_argument("--trace", action="append", help="trace CSV (maxdl only); repeatable")
    p.add_argument("--config", help="scenario file supplying the protocol parameters")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int, help="budget K (default: budget_k from the config)")
    p.add_argument("--gamma", type=int, help="pivot gap for freq-pivots (default: the closed-form gamma)")
    p.add_argument("--kappa", type=float, default=0.0)
    p.add_argument("--epsilon2", type=float, default=1.0)
    p.add_argument("--epsilon3", type=float, default=0.5)
    p.add_argument("--reading", choices=("max", "min"), default="max")

    p = sub.add_parser("solve-params", help="recommend rho, gamma and confirmation depths")
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--epsilon1", type=float, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--t-h", type=int, required=True)
    p.add_argument("--kappa", type=float, default=0.0)
    p.add_argument("--calibrate", type=int, default=0, metavar="SAMPLES",
                   help="also size gamma and K from this many sampled executions")
    p.add_argument("--seed", type=int)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "sweep":
            return cmd_simulate(args, require_grid=True)
        if args.command == "analyze":
            return cmd_analyze(args)
        return cmd_solve_params(args)
    except (ConfigError, DomainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
