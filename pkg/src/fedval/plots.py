"""Figure rendering for experiment reports.

Every preset writes delimited data first; these helpers render the matching
matplotlib figure next to it. All functions save to a file and return the
path; nothing is shown interactively.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

__all__ = [
    "save_cdf_figure",
    "save_metric_bars",
    "save_participation_curves",
    "save_timing_figure",
    "save_rank_curve",
    "save_singular_values",
    "save_epsilon_rank_curve",
]


def _finish(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_cdf_figure(grid, curves: dict[str, list[float]], path, xlabel="relative difference"):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, values in curves.items():
        ax.step(grid, values, where="post", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("empirical CDF")
    ax.set_ylim(0, 1.05)
    ax.legend()
    return _finish(fig, path)


def save_metric_bars(rows: dict[str, float], path, ylabel: str):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    labels = list(rows)
    ax.bar(labels, [rows[k] for k in labels])
    ax.set_ylabel(ylabel)
    ax.set_ylim(-1.05, 1.05)
    return _finish(fig, path)


def save_participation_curves(percents, curves: dict[str, list[float]], path, ylabel: str):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, values in curves.items():
        ax.plot(percents, values, marker="o", label=label)
    ax.set_xlabel("participation (%)")
    ax.set_ylabel(ylabel)
    ax.legend()
    return _finish(fig, path)


def save_timing_figure(client_counts, seconds: dict[str, list[float]], ratios, path):
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for label, values in seconds.items():
        ax.plot(client_counts, values, marker="o", label=label)
    ax.set_xlabel("clients")
    ax.set_ylabel("seconds")
    ax.legend(loc="upper left")
    twin = ax.twinx()
    twin.plot(client_counts, ratios, marker="s", color="tab:green", label="call ratio")
    twin.set_ylabel("utility-call ratio")
    twin.legend(loc="lower right")
    return _finish(fig, path)


def save_rank_curve(ranks, errors, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ranks, errors, marker="o")
    ax.set_xlabel("rank")
    ax.set_ylabel("relative difference")
    return _finish(fig, path)


def save_singular_values(values, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(range(1, len(values) + 1), values, marker="o", linestyle="")
    ax.set_xlabel("index")
    ax.set_ylabel("singular value")
    return _finish(fig, path)


def save_epsilon_rank_curve(epsilons, bounds, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.loglog(epsilons, [max(b, 1e-2) for b in bounds], marker="o")
    ax.set_xlabel("tolerance")
    ax.set_ylabel("rank upper bound")
    return _finish(fig, path)
