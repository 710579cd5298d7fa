"""Figure rendering for training logs and evaluation reports.

Figures are written next to the delimited outputs; the CSVs remain the
machine-readable contract. Uses the Agg backend so headless runs work.
"""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_COLORS = {"random": "tab:red", "trained": "tab:blue"}


def _color_for(name, k):
    return _COLORS.get(name, f"C{k}")


def save_eval_figures(report, out_dir) -> dict:
    """Mean approximation-ratio curves (faded per-problem lines behind) and a
    per-problem paired scatter of final scores."""
    fig, ax = plt.subplots(figsize=(6.5, 4.2))
    steps = range(1, report.steps + 1)
    for k, name in enumerate(report.policy_names):
        color = _color_for(name, k)
        per_problem = report.best_ratio[name].mean(axis=1)  # (P, T)
        for row in per_problem:
            ax.plot(steps, row, color=color, alpha=0.08, linewidth=0.6)
        ax.plot(steps, report.mean_best_curve[name], color=color, linewidth=2.0,
                label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("best-so-far approximation ratio")
    ax.legend(loc="lower right")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    curves_png = os.path.join(out_dir, "curves.png")
    fig.savefig(curves_png, dpi=150)
    plt.close(fig)

    paths = {"curves_png": curves_png}
    if len(report.policy_names) == 2:
        a, b = report.policy_names
        fig, ax = plt.subplots(figsize=(4.6, 4.4))
        fa, fb = report.final_best[a], report.final_best[b]
        lo = min(fa.min(), fb.min())
        hi = max(fa.max(), fb.max())
        pad = 0.02 * (hi - lo + 1e-9)
        ax.plot([lo - pad, hi + pad], [lo - pad, hi + pad], "k--", linewidth=0.8)
        ax.scatter(fb, fa, s=18, alpha=0.7)
        ax.set_xlabel(f"{b} final ratio")
        ax.set_ylabel(f"{a} final ratio")
        ax.set_title("per-problem final best-so-far ratio")
        ax.grid(alpha=0.3)
        fig.tight_layout()
        finals_png = os.path.join(out_dir, "finals.png")
        fig.savefig(finals_png, dpi=150)
        plt.close(fig)
        paths["finals_png"] = finals_png
    return paths


def save_solve_figure(curves, steps, out_dir) -> dict:
    """Best-so-far ratio trace for every episode of a solve run."""
    fig, ax = plt.subplots(figsize=(6.5, 4.2))
    for series in curves:
        ax.plot(range(1, steps + 1), series, alpha=0.25, linewidth=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("best-so-far approximation ratio")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = os.path.join(out_dir, "solve.png")
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return {"solve_png": path}


def save_training_figure(rows, out_dir) -> dict:
    """Episode mean return and loss components over training iterations."""
    iterations = [r.iteration for r in rows]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6.5, 6.0), sharex=True)
    ax1.plot(iterations, [r.mean_return for r in rows], color="tab:blue",
             label="mean episode return")
    ax1.set_ylabel("mean episode return")
    ax1.grid(alpha=0.3)
    ax1b = ax1.twinx()
    ax1b.plot(iterations, [r.mean_approx_ratio for r in rows], color="tab:green",
              alpha=0.7, label="mean final ratio")
    ax1b.set_ylabel("mean final approximation ratio")

    ax2.plot(iterations, [r.policy_loss for r in rows], label="policy loss")
    ax2.plot(iterations, [r.value_loss for r in rows], label="value loss")
    ax2.plot(iterations, [r.entropy for r in rows], label="entropy")
    ax2.set_xlabel("iteration")
    ax2.grid(alpha=0.3)
    ax2.legend(loc="best", fontsize=8)
    fig.tight_layout()
    path = os.path.join(out_dir, "training.png")
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return {"training_png": path}
