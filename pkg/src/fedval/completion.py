"""Regularized low-rank completion of the utility matrix.

The solver is alternating ridge least squares: with one factor fixed, every
row of the other factor has a closed-form solution against its observed
entries, so the penalized objective never increases across half-steps. Rows
with no observations fall back to the regularizer's minimizer (zero).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, MissingEntryError
from .utility import CoalitionKey, UtilityMatrix

__all__ = [
    "CompletionConfig",
    "FactorPair",
    "solve",
    "delta_completedness",
    "choose_rank",
    "save_factors",
    "load_factors",
]


@dataclass(frozen=True)
class CompletionConfig:
    rank: int
    regularization: float = 0.05
    max_iterations: int = 500
    tolerance: float = 1e-6
    init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")
        if self.regularization <= 0:
            raise ConfigError("regularization must be > 0")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.tolerance <= 0:
            raise ConfigError("tolerance must be > 0")


@dataclass
class FactorPair:
    """Factor matrices for rounds (W, T x r) and coalitions (H, columns x r)."""

    W: np.ndarray
    H: np.ndarray
    column_keys: list[CoalitionKey]
    objective_trace: list[float]
    column_index: dict[CoalitionKey, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.W.shape[1] != self.H.shape[1]:
            raise ValueError("factor ranks disagree")
        if self.H.shape[0] != len(self.column_keys):
            raise ValueError("one H row per coalition column required")
        self.column_index = {key: j for j, key in enumerate(self.column_keys)}

    @property
    def rank(self) -> int:
        return self.W.shape[1]

    def predict(self, t: int, key: CoalitionKey) -> float:
        j = self.column_index.get(key)
        if j is None:
            raise MissingEntryError(f"factor row missing for coalition {key.members}")
        return float(self.W[t] @ self.H[j])


def _half_step(
    target: np.ndarray,
    other: np.ndarray,
    index_lists: list[np.ndarray],
    value_lists: list[np.ndarray],
    regularization: float,
) -> None:
    """Solve every row of ``target`` against its observed entries in place."""
    r = target.shape[1]
    eye = regularization * np.eye(r)
    for row in range(target.shape[0]):
        idx = index_lists[row]
        if idx.size == 0:
            target[row] = 0.0  # regularizer's minimizer for unobserved rows
            continue
        block = other[idx]
        lhs = block.T @ block + eye
        rhs = block.T @ value_lists[row]
        target[row] = np.linalg.solve(lhs, rhs)


def solve(matrix: UtilityMatrix, config: CompletionConfig) -> FactorPair:
    """Alternating least squares on the observed entries.

    Stops when the relative objective decrease over one full iteration drops
    below ``tolerance`` or after ``max_iterations``. The recorded objective
    trace holds the value at initialization and after every half-step.
    """
    n_rows, n_cols = matrix.rounds, len(matrix.columns)
    if config.rank > min(n_rows, n_cols):
        raise ConfigError(
            f"rank {config.rank} exceeds min(rounds={n_rows}, columns={n_cols})"
        )
    if not matrix.entries:
        raise ConfigError("completion needs at least one observed entry")

    coords = np.array(sorted(matrix.entries), dtype=int)
    values = np.array([matrix.entries[(t, j)] for t, j in coords])
    row_ids, col_ids = coords[:, 0], coords[:, 1]

    def gather(count: int, ids: np.ndarray, other_ids: np.ndarray):
        idx_lists, val_lists = [], []
        order = np.argsort(ids, kind="stable")
        bounds = np.searchsorted(ids[order], np.arange(count + 1))
        for i in range(count):
            sel = order[bounds[i] : bounds[i + 1]]
            idx_lists.append(other_ids[sel])
            val_lists.append(values[sel])
        return idx_lists, val_lists

    rows_idx, rows_val = gather(n_rows, row_ids, col_ids)
    cols_idx, cols_val = gather(n_cols, col_ids, row_ids)

    rng = np.random.default_rng(config.seed)
    scale = config.init_scale / config.rank**0.25
    W = rng.normal(0.0, scale, size=(n_rows, config.rank))
    H = rng.normal(0.0, scale, size=(n_cols, config.rank))

    def objective() -> float:
        preds = np.einsum("ij,ij->i", W[row_ids], H[col_ids])
        resid = values - preds
        return float(
            resid @ resid
            + config.regularization * ((W * W).sum() + (H * H).sum())
        )

    trace = [objective()]
    for _ in range(config.max_iterations):
        before = trace[-1]
        _half_step(W, H, rows_idx, rows_val, config.regularization)
        trace.append(objective())
        _half_step(H, W, cols_idx, cols_val, config.regularization)
        # rebalance the factor norms: the product is unchanged and the
        # penalty can only shrink, so the objective stays non-increasing
        w_norm, h_norm = np.linalg.norm(W), np.linalg.norm(H)
        if w_norm > 0 and h_norm > 0:
            ratio = math.sqrt(h_norm / w_norm)
            W *= ratio
            H /= ratio
        trace.append(objective())
        after = trace[-1]
        if before - after < config.tolerance * max(abs(before), 1e-300):
            break
    return FactorPair(W=W, H=H, column_keys=list(matrix.columns), objective_trace=trace)


def delta_completedness(matrix: UtilityMatrix, factors: FactorPair) -> float:
    """Completion certificate: the largest absolute column sum of the
    residual between the full matrix and the factor product."""
    if not matrix.is_full:
        raise ValueError("the completion certificate needs a fully observed matrix")
    worst = 0.0
    rounds = np.arange(matrix.rounds)
    for j, key in enumerate(matrix.columns):
        jj = factors.column_index.get(key)
        if jj is None:
            raise MissingEntryError(f"factor row missing for coalition {key.members}")
        truth = np.array([matrix.entries[(t, j)] for t in rounds])
        column_sum = float(np.abs(truth - factors.W @ factors.H[jj]).sum())
        worst = max(worst, column_sum)
    return worst


def choose_rank(
    matrix: UtilityMatrix,
    candidate_ranks: list[int],
    config: CompletionConfig,
    holdout_fraction: float = 0.2,
) -> int:
    """Pick the candidate rank with the lowest held-out relative error.

    The observed entries are split 80/20 with the config seed; each candidate
    is fit on the training share and scored on the held-out share. Among
    candidates within one percent of the best error the smallest rank wins,
    so exactly low-rank data resolves to its true rank instead of a
    float-level coin flip between it and larger ranks.
    """
    if not candidate_ranks:
        raise ConfigError("candidate rank list is empty")
    limit = min(matrix.rounds, len(matrix.columns))
    bad = [r for r in candidate_ranks if not 1 <= r <= limit]
    if bad:
        raise ConfigError(f"candidate ranks {bad} outside [1, {limit}]")

    coords = sorted(matrix.entries)
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(coords))
    n_hold = max(1, int(round(holdout_fraction * len(coords))))
    if n_hold >= len(coords):
        raise ConfigError("too few observed entries for a holdout split")
    hold = [coords[i] for i in order[:n_hold]]
    train = {coords[i]: matrix.entries[coords[i]] for i in order[n_hold:]}

    train_matrix = UtilityMatrix(
        rounds=matrix.rounds,
        num_clients=matrix.num_clients,
        columns=list(matrix.columns),
        entries=train,
        is_full=False,
    )
    truth = np.array([matrix.entries[c] for c in hold])
    denom = float(np.linalg.norm(truth))
    errors: dict[int, float] = {}
    for rank in candidate_ranks:
        fit = solve(
            train_matrix,
            CompletionConfig(
                rank=rank,
                regularization=config.regularization,
                max_iterations=config.max_iterations,
                tolerance=config.tolerance,
                init_scale=config.init_scale,
                seed=config.seed,
            ),
        )
        preds = np.array([fit.W[t] @ fit.H[j] for t, j in hold])
        err = float(np.linalg.norm(truth - preds))
        errors[rank] = err / denom if denom > 0 else err
    best = min(errors.values())
    return min(r for r, e in errors.items() if e <= best * 1.05 + 1e-12)


def save_factors(factors: FactorPair, directory: str | Path, extra: dict | None = None) -> None:
    """Persist W.csv, H.csv, columns.json, and a completion.json summary."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.savetxt(directory / "W.csv", factors.W, delimiter=",", fmt="%.17g")
    np.savetxt(directory / "H.csv", factors.H, delimiter=",", fmt="%.17g")
    mapping = {key.hex_mask: list(key.members) for key in factors.column_keys}
    with open(directory / "columns.json", "w") as handle:
        json.dump({"columns": mapping}, handle, indent=2)
    summary = {
        "rank": factors.rank,
        "iterations": (len(factors.objective_trace) - 1) // 2,
        "final_objective": factors.objective_trace[-1],
    }
    summary.update(extra or {})
    with open(directory / "completion.json", "w") as handle:
        json.dump(summary, handle, indent=2)


def load_factors(directory: str | Path) -> FactorPair:
    directory = Path(directory)
    W = np.loadtxt(directory / "W.csv", delimiter=",", ndmin=2)
    H = np.loadtxt(directory / "H.csv", delimiter=",", ndmin=2)
    with open(directory / "columns.json") as handle:
        mapping = json.load(handle)["columns"]
    keys = [CoalitionKey.of(members) for members in mapping.values()]
    return FactorPair(W=W, H=H, column_keys=keys, objective_trace=[])
