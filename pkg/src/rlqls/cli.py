"""Command-line interface: gen, gse, solve, train, eval.

Exit codes: 0 on success, 2 for usage/configuration problems, 3 for
runtime/capacity failures. Every stochastic run writes its fully resolved
configuration next to its outputs so it can be reproduced bit-exactly
(single-actor mode for training).
"""

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from . import __version__
from .bench import evaluate, random_selection, summarize, trained_selection
from .env import EnvConfig, encode, run_episode, write_episode_trace
from .errors import (
    CapacityError,
    ConfigurationError,
    ContractViolation,
    TrainingError,
)
from .ising import (
    annotate_instance_set,
    load_instance_set,
    make_instance_set,
    save_instance_set,
)
from .policy import forward, greedy_action, load_checkpoint, sample_action
from .seeding import substream
from .trainer import learner_loop, load_train_config, write_train_log

log = logging.getLogger("rlqls")


def _resolved_sidecar_path(out_path: str) -> str:
    root, _ = os.path.splitext(out_path)
    return root + ".resolved_config.json"


def _write_resolved(path_or_dir: str, payload: dict, as_dir: bool = True) -> None:
    payload = {"rlqls_version": __version__, **payload}
    path = (
        os.path.join(path_or_dir, "resolved_config.json")
        if as_dir
        else _resolved_sidecar_path(path_or_dir)
    )
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _default_run_dir(prefix: str, payload: dict) -> str:
    digest = hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode("utf-8")
    ).hexdigest()[:8]
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return os.path.join("runs", f"{prefix}_{stamp}_{digest}")


def cmd_gen(args) -> int:
    if args.n < 2:
        raise ConfigurationError(f"--n must be >= 2, got {args.n}")
    if args.count < 1:
        raise ConfigurationError(f"--count must be >= 1, got {args.count}")
    iset = make_instance_set(args.n, args.count, args.seed, args.kind)
    save_instance_set(args.out, iset)
    _write_resolved(
        args.out,
        {
            "command": "gen",
            "n": args.n,
            "count": args.count,
            "seed": args.seed,
            "kind": args.kind,
            "out": args.out,
        },
        as_dir=False,
    )
    log.info("wrote %d instances to %s", args.count, args.out)
    return 0


def cmd_gse(args) -> int:
    iset = load_instance_set(args.in_path)
    annotated = annotate_instance_set(iset, method=args.method, seed=args.seed)
    out = args.out or args.in_path
    save_instance_set(out, annotated)
    _write_resolved(
        out,
        {
            "command": "gse",
            "in": args.in_path,
            "method": args.method,
            "seed": args.seed,
            "out": out,
        },
        as_dir=False,
    )
    log.info("annotated %d instances -> %s", len(annotated.problems), out)
    return 0


def _solve_policy(args):
    """Resolve --policy into (name, m, policy-factory(rng))."""
    if args.policy == "random":
        if args.m is None:
            raise ConfigurationError("--m is required with --policy random")
        m = args.m

        def factory(rng):
            from .env import random_policy

            return lambda state: random_policy(state, m, rng)

        return "random", m, factory

    params, meta = load_checkpoint(args.policy)
    m = args.m if args.m is not None else meta["m"]

    def factory(rng):
        def policy(state):
            output = forward(params, encode(state))
            if args.greedy:
                return greedy_action(output, m)
            return sample_action(output, m, rng)

        return policy

    return "checkpoint", m, factory


def cmd_solve(args) -> int:
    if args.steps < 1:
        raise ConfigurationError(f"--steps must be >= 1, got {args.steps}")
    if args.repeats < 1:
        raise ConfigurationError(f"--repeats must be >= 1, got {args.repeats}")
    iset = load_instance_set(args.instances)
    missing = [p.id for p in iset.problems if p.gse_ref is None]
    if missing:
        raise ConfigurationError(
            f"{len(missing)} instances lack gse_ref (e.g. {missing[0]!r}); "
            "run `rlqls gse` on the set first"
        )
    name, m, factory = _solve_policy(args)
    os.makedirs(args.out_dir, exist_ok=True)
    _write_resolved(
        args.out_dir,
        {
            "command": "solve",
            "instances": args.instances,
            "policy": args.policy,
            "m": m,
            "steps": args.steps,
            "repeats": args.repeats,
            "seed": args.seed,
            "greedy": bool(args.greedy),
        },
    )
    cfg = EnvConfig(m=m, episode_len=args.steps)
    rows = []
    curves = []
    for problem in iset.problems:
        for rep in range(args.repeats):
            init_rng = substream(args.seed, "init", problem.id, rep)
            accept_rng = substream(args.seed, "accept", problem.id, rep)
            policy = factory(substream(args.seed, "policy", problem.id, rep))
            episode = run_episode(problem, cfg, policy, accept_rng, init_rng=init_rng)
            trace = os.path.join(args.out_dir, f"trace_{problem.id}_r{rep}.csv")
            write_episode_trace(trace, episode.records)
            energies = np.array([rec.energy for rec in episode.records])
            best_series = np.minimum.accumulate(
                np.minimum(energies, episode.initial_energy)
            )
            curves.append(best_series / problem.gse_ref)
            rows.append(
                {
                    "problem_id": problem.id,
                    "repeat": rep,
                    "final_energy": float(energies[-1]),
                    "best_energy": float(best_series[-1]),
                    "final_ratio": float(energies[-1] / problem.gse_ref),
                    "best_ratio": float(best_series[-1] / problem.gse_ref),
                }
            )
    summary_path = os.path.join(args.out_dir, "solve_summary.csv")
    with open(summary_path, "w", newline="", encoding="utf-8") as fh:
        import csv as _csv

        writer = _csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    best_ratios = [r["best_ratio"] for r in rows]
    final_line = (
        f"policy {name}: mean best ratio {np.mean(best_ratios):.6f}, "
        f"solved-to-reference fraction "
        f"{np.mean([abs(r - 1.0) < 1e-9 for r in best_ratios]):.3f}"
    )
    with open(os.path.join(args.out_dir, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(final_line + "\n")
    if not args.no_figures:
        from .plots import save_solve_figure

        save_solve_figure(curves, args.steps, args.out_dir)
    print(final_line)
    return 0


def cmd_train(args) -> int:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.actors is not None:
        overrides["actors"] = args.actors
    cfg = load_train_config(args.config, overrides)

    out_dir = args.out_dir or _default_run_dir("train", asdict(cfg))
    os.makedirs(out_dir, exist_ok=True)
    _write_resolved(out_dir, {"command": "train", "config_path": args.config, **asdict(cfg)})

    from .trainer import build_training_pool

    pool = build_training_pool(cfg)
    from .ising import InstanceSet

    save_instance_set(
        os.path.join(out_dir, "train_set.json"),
        InstanceSet(problems=pool, seed=cfg.train_seed, kind="train"),
    )
    params, rows = learner_loop(cfg, problems=pool, out_dir=out_dir)
    write_train_log(os.path.join(out_dir, "train_log.csv"), rows)
    if rows and not args.no_figures:
        from .plots import save_training_figure

        save_training_figure(rows, out_dir)
    print(f"trained {cfg.iterations} iterations -> {out_dir}")
    return 0


def cmd_eval(args) -> int:
    if args.steps < 1:
        raise ConfigurationError(f"--steps must be >= 1, got {args.steps}")
    iset = load_instance_set(args.instances)
    params, meta = load_checkpoint(args.checkpoint)
    sizes = {p.n for p in iset.problems}
    if sizes != {meta["n"]}:
        raise ConfigurationError(
            f"checkpoint is for n={meta['n']} but instances have n in {sorted(sizes)}"
        )
    m = args.m if args.m is not None else meta["m"]
    policies = {
        "random": random_selection(m),
        "trained": trained_selection(params, m, greedy=args.greedy_eval),
    }
    out_dir = args.out_dir or _default_run_dir(
        "eval", {"instances": args.instances, "seed": args.seed}
    )
    os.makedirs(out_dir, exist_ok=True)
    _write_resolved(
        out_dir,
        {
            "command": "eval",
            "instances": args.instances,
            "checkpoint": args.checkpoint,
            "m": m,
            "steps": args.steps,
            "repeats": args.repeats,
            "seed": args.seed,
            "greedy_eval": bool(args.greedy_eval),
        },
    )
    report = evaluate(
        iset.problems,
        policies,
        m=m,
        steps=args.steps,
        repeats=args.repeats,
        seed=args.seed,
        workers=args.workers,
    )
    summarize(report, out_dir, figures=not args.no_figures)
    ps = report.paired[("trained", "random")]
    print(
        f"trained vs random: mean final-ratio diff {ps.mean_diff:+.6f} "
        f"(one-sided p = {ps.p_value:.4g}) -> {out_dir}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rlqls",
        description="Decomposed local search on fully-connected Ising problems "
        "with learned or random sub-problem selection.",
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate an instance set")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kind", choices=["train", "test"], default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("gse", help="annotate a set with reference ground-state energies")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--method", choices=["auto", "exhaustive", "tabu"], default="auto")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="default: overwrite the input file")
    p.set_defaults(func=cmd_gse)

    p = sub.add_parser("solve", help="run local search on annotated instances")
    p.add_argument("--instances", required=True)
    p.add_argument("--policy", required=True, help="'random' or a checkpoint path")
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("train", help="train the selection policy")
    p.add_argument("--config", required=True)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--actors", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="trained-vs-random comparison on a test set")
    p.add_argument("--instances", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--greedy-eval", action="store_true")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (ConfigurationError, ContractViolation) as exc:
        print(f"rlqls: error: {exc}", file=sys.stderr)
        return 2
    except (CapacityError, TrainingError) as exc:
        print(f"rlqls: failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"rlqls: I/O failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
