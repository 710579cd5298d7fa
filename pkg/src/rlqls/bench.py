"""Head-to-head evaluation of selection policies on held-out instance sets.

Every policy runs on the same problems, the same step budget, and the same
initial configurations (the per-(problem, repeat) init stream is shared), so
final scores can be compared pairwise. Curves track the best-so-far
solution's approximation ratio; the current-configuration ratio is emitted
alongside since either reading of a published comparison curve is defensible.
"""

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .env import EnvConfig, encode, random_policy, run_episode
from .errors import ConfigurationError, ContractViolation
from .policy import NetParams, forward, greedy_action, sample_action
from .seeding import substream
from .util import thread_cap


def random_selection(m: int):
    """Policy factory: uniform ordered index choice without replacement."""

    def factory(rng):
        def policy(state):
            return random_policy(state, m, rng)

        return policy

    return factory


def trained_selection(params: NetParams, m: int, greedy: bool = False):
    """Policy factory: sample from (or argmax over) the trained network."""

    def factory(rng):
        def policy(state):
            output = forward(params, encode(state))
            if greedy:
                return greedy_action(output, m)
            return sample_action(output, m, rng)

        return policy

    return factory


@dataclass
class PairedStats:
    mean_diff: float
    stderr: float
    p_value: float  # one-sided, H1: first policy's finals exceed the second's


@dataclass
class EvalReport:
    policy_names: list
    problem_ids: list
    gse_refs: list
    steps: int
    repeats: int
    seed: int
    m: int
    best_ratio: dict  # name -> (P, R, T)
    current_ratio: dict  # name -> (P, R, T)
    mean_best_curve: dict  # name -> (T,)
    mean_current_curve: dict  # name -> (T,)
    final_best: dict  # name -> (P,) mean over repeats of last-step best ratio
    paired: dict  # (a, b) -> PairedStats
    config_echo: dict


def _episode_series(problem, cfg, policy, accept_rng, init_rng, steps):
    episode = run_episode(problem, cfg, policy, accept_rng, init_rng=init_rng)
    energies = np.array([rec.energy for rec in episode.records])
    best_so_far = np.minimum.accumulate(
        np.minimum(energies, episode.initial_energy)
    )
    gse = problem.gse_ref
    return best_so_far / gse, energies / gse


def evaluate(
    problems: list,
    policies: dict,
    m: int,
    steps: int,
    repeats: int,
    seed: int,
    workers: int | None = None,
) -> EvalReport:
    """Run every (problem, policy, repeat) episode and aggregate the series.

    `policies` maps a name to a factory `factory(rng) -> policy(state)`.
    Streams are derived from (seed, problem id, repeat) only, so two entries
    with identical behaviour produce identical series.
    """
    if not policies:
        raise ContractViolation("nothing to compare: the policy set is empty")
    if steps < 1 or repeats < 1:
        raise ContractViolation("steps and repeats must be >= 1")
    missing = [p.id for p in problems if p.gse_ref is None]
    if missing:
        raise ConfigurationError(
            f"{len(missing)} problems lack gse_ref (e.g. {missing[0]!r}); "
            "run the gse command first"
        )

    names = list(policies)
    n_problems = len(problems)
    best = {name: np.zeros((n_problems, repeats, steps)) for name in names}
    current = {name: np.zeros((n_problems, repeats, steps)) for name in names}
    cfg = EnvConfig(m=m, episode_len=steps)

    def run_task(task):
        p_idx, name, rep = task
        problem = problems[p_idx]
        init_rng = substream(seed, "init", problem.id, rep)
        accept_rng = substream(seed, "accept", problem.id, rep)
        policy_rng = substream(seed, "policy", problem.id, rep)
        policy = policies[name](policy_rng)
        b, c = _episode_series(problem, cfg, policy, accept_rng, init_rng, steps)
        best[name][p_idx, rep] = b
        current[name][p_idx, rep] = c

    tasks = [
        (p_idx, name, rep)
        for p_idx in range(n_problems)
        for name in names
        for rep in range(repeats)
    ]
    max_workers = thread_cap(workers if workers is not None else (os.cpu_count() or 1))
    if max_workers == 1:
        for task in tasks:
            run_task(task)
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            list(pool.map(run_task, tasks))

    mean_best = {name: best[name].mean(axis=(0, 1)) for name in names}
    mean_current = {name: current[name].mean(axis=(0, 1)) for name in names}
    final_best = {name: best[name][:, :, -1].mean(axis=1) for name in names}

    paired = {}
    for a in names:
        for b in names:
            if a == b:
                continue
            diff = final_best[a] - final_best[b]
            mean_diff = float(diff.mean())
            stderr = float(diff.std(ddof=1) / np.sqrt(diff.size)) if diff.size > 1 else 0.0
            result = stats.ttest_rel(final_best[a], final_best[b], alternative="greater")
            p_value = float(result.pvalue)
            if not np.isfinite(p_value):  # zero-variance differences
                p_value = 0.0 if mean_diff > 0 else 1.0
            paired[(a, b)] = PairedStats(mean_diff=mean_diff, stderr=stderr, p_value=p_value)

    return EvalReport(
        policy_names=names,
        problem_ids=[p.id for p in problems],
        gse_refs=[float(p.gse_ref) for p in problems],
        steps=steps,
        repeats=repeats,
        seed=seed,
        m=m,
        best_ratio=best,
        current_ratio=current,
        mean_best_curve=mean_best,
        mean_current_curve=mean_current,
        final_best=final_best,
        paired=paired,
        config_echo={"steps": steps, "repeats": repeats, "seed": seed, "m": m},
    )


def _write_curve_csv(path, names, curves, steps):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step"] + names)
        for t in range(steps):
            writer.writerow([t + 1] + [repr(float(curves[name][t])) for name in names])


def summarize(report: EvalReport, out_dir, figures: bool = True) -> dict:
    """Write curves.csv / curves_current.csv / finals.csv / summary.txt
    (and figures unless disabled); returns the paths."""
    if not report.policy_names:
        raise ContractViolation("nothing to compare: the report has no policies")
    os.makedirs(out_dir, exist_ok=True)
    names = report.policy_names

    curves_path = os.path.join(out_dir, "curves.csv")
    _write_curve_csv(curves_path, names, report.mean_best_curve, report.steps)
    current_path = os.path.join(out_dir, "curves_current.csv")
    _write_curve_csv(current_path, names, report.mean_current_curve, report.steps)

    finals_path = os.path.join(out_dir, "finals.csv")
    with open(finals_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["problem_id", "gse_ref"] + names)
        for i, pid in enumerate(report.problem_ids):
            writer.writerow(
                [pid, repr(report.gse_refs[i])]
                + [repr(float(report.final_best[name][i])) for name in names]
            )

    summary_path = os.path.join(out_dir, "summary.txt")
    lines = [
        f"problems: {len(report.problem_ids)}, steps: {report.steps}, "
        f"repeats: {report.repeats}, m: {report.m}, seed: {report.seed}",
        "",
    ]
    for name in names:
        finals = report.final_best[name]
        lines.append(
            f"policy {name}: final mean best-so-far ratio = {finals.mean():.6f} "
            f"(std {finals.std(ddof=1) if finals.size > 1 else 0.0:.6f})"
        )
    lines.append("")
    for (a, b), ps in report.paired.items():
        verdict = (
            f"{a} beats {b} at the 0.05 level"
            if ps.p_value < 0.05 and ps.mean_diff > 0
            else "no significant improvement"
        )
        lines.append(
            f"paired {a} vs {b}: mean diff = {ps.mean_diff:+.6f}, "
            f"stderr = {ps.stderr:.6f}, one-sided p = {ps.p_value:.6g} -> {verdict}"
        )
    with open(summary_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

    paths = {
        "curves": curves_path,
        "curves_current": current_path,
        "finals": finals_path,
        "summary": summary_path,
    }
    if figures:
        from .plots import save_eval_figures

        paths.update(save_eval_figures(report, out_dir))
    return paths
