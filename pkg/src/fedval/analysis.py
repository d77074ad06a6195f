"""Diagnostic mathematics: approximate-rank bounds, the selection-unfairness
probability, fairness gap checks, and ranking/overlap metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .fedsim import InverseDecaySchedule, TrainingTrace

__all__ = [
    "SmoothnessParams",
    "FairnessVerdict",
    "jacobi_svd",
    "singular_values",
    "epsilon_rank_upper",
    "trajectory_rank_numerator",
    "trajectory_rank_bound",
    "schedule_rank_bound",
    "unfairness_probability",
    "relative_difference",
    "spearman",
    "jaccard",
    "fairness_check",
    "estimate_smoothness",
]


@dataclass(frozen=True)
class SmoothnessParams:
    """Loss regularity constants used by the rank-bound calculators.

    ``lipschitz`` bounds loss differences and gradient norms, ``smoothness``
    bounds gradient differences, ``strong_convexity`` is the modulus of the
    quadratic lower model. Empirically estimated values are only valid for
    plausibility checks on the trace they were measured on.
    """

    lipschitz: float
    smoothness: float
    strong_convexity: float = 0.0
    source: str = "user_supplied"

    def __post_init__(self):
        if self.lipschitz <= 0 or self.smoothness <= 0:
            raise ValueError("lipschitz and smoothness must be > 0")
        if not 0 <= self.strong_convexity <= self.smoothness:
            raise ValueError("need 0 <= strong_convexity <= smoothness")
        if self.source not in ("user_supplied", "empirically_estimated"):
            raise ValueError(f"unknown source {self.source!r}")


def jacobi_svd(matrix: np.ndarray, tol: float = 1e-10, max_sweeps: int = 60):
    """Singular value decomposition by one-sided Jacobi rotations.

    Columns of the side with fewer of them are orthogonalized pairwise until
    every inner product is below ``tol`` relative to the column norms.
    Returns (U, s, Vt) with singular values sorted descending.
    """
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2:
        raise ValueError("need a 2-d matrix")
    transposed = a.shape[1] > a.shape[0]
    work = (a.T if transposed else a).copy()
    m, n = work.shape
    v = np.eye(n)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                col_p, col_q = work[:, p], work[:, q]
                app = col_p @ col_p
                aqq = col_q @ col_q
                apq = col_p @ col_q
                if abs(apq) <= tol * math.sqrt(app * aqq) or apq == 0.0:
                    continue
                rotated = True
                tau = (aqq - app) / (2.0 * apq)
                t = math.copysign(1.0, tau) / (abs(tau) + math.hypot(1.0, tau))
                c = 1.0 / math.hypot(1.0, t)
                s = c * t
                rot = np.array([[c, s], [-s, c]])
                work[:, [p, q]] = work[:, [p, q]] @ rot
                v[:, [p, q]] = v[:, [p, q]] @ rot
        if not rotated:
            break
    norms = np.linalg.norm(work, axis=0)
    order = np.argsort(norms)[::-1]
    norms = norms[order]
    v = v[:, order]
    u = np.zeros((m, n))
    nonzero = norms > 0
    u[:, nonzero] = work[:, order][:, nonzero] / norms[nonzero]
    if transposed:
        return v, norms, u.T
    return u, norms, v.T


def singular_values(matrix: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    return jacobi_svd(matrix, tol=tol)[1]


def epsilon_rank_upper(matrix: np.ndarray, epsilon: float) -> int:
    """Certified upper bound on the smallest rank approximating ``matrix``
    within ``epsilon`` in the entrywise max norm.

    Two constructions are tried and the smaller wins: truncated singular
    value reconstructions, and grouping consecutive rows while the running
    sum of row-to-row max differences stays within ``epsilon`` (each group
    is replaced by its first row). The exact quantity is intractable; both
    constructions certify feasible approximants.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    x = np.asarray(matrix, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NumericError("matrix has non-finite entries")
    if x.size == 0 or np.abs(x).max() <= epsilon:
        return 0

    u, s, vt = jacobi_svd(x)
    svd_bound = min(x.shape)
    approx = np.zeros_like(x)
    for k in range(len(s)):
        approx += s[k] * np.outer(u[:, k], vt[k])
        if np.abs(x - approx).max() <= epsilon:
            svd_bound = k + 1
            break

    diffs = np.abs(np.diff(x, axis=0)).max(axis=1) if x.shape[0] > 1 else np.array([])
    groups = 1
    running = 0.0
    for d in diffs:
        running += d
        if running > epsilon:
            groups += 1
            running = 0.0
    return min(svd_bound, groups)


def _schedule_is_nonincreasing(rates: list[float]) -> bool:
    return all(a >= b - 1e-15 for a, b in zip(rates, rates[1:]))


def trajectory_rank_numerator(trace: TrainingTrace, params: SmoothnessParams) -> float:
    """Numerator of the trajectory-based rank bound: path length of the
    first-to-penultimate global models scaled by the loss constants, plus
    the learning-rate range term."""
    if len(trace.global_models) < 2:
        raise ValueError("trace needs at least two global models")
    if not _schedule_is_nonincreasing(trace.learning_rates):
        raise ValueError("rank bound requires a non-increasing learning-rate schedule")
    eta_first = trace.learning_rates[0]
    eta_last = trace.learning_rates[-1]
    starts = trace.global_models[: trace.rounds]  # round-start models
    path = sum(
        float(np.linalg.norm(a - b)) for a, b in zip(starts, starts[1:])
    )
    return (
        (2.0 + eta_first * params.smoothness) * params.lipschitz * path
        + (eta_first - eta_last) * params.lipschitz**2
    )


def trajectory_rank_bound(trace: TrainingTrace, params: SmoothnessParams, epsilon: float) -> int:
    """Approximate-rank upper bound for the utility matrix of a trace whose
    losses satisfy the given regularity constants."""
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    return math.ceil(trajectory_rank_numerator(trace, params) / epsilon)


def schedule_rank_bound(
    rounds: float,
    params: SmoothnessParams,
    schedule: InverseDecaySchedule,
    epsilon: float,
) -> int:
    """Closed-form approximate-rank bound under the inverse-decay schedule;
    grows like log(rounds) / epsilon and is independent of the client count."""
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    if params.strong_convexity <= 0:
        raise ValueError("the closed-form bound requires strong convexity > 0")
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    eta_first = schedule.rate(1)
    eta_last = schedule.rate(rounds)
    mu = params.strong_convexity
    value = (
        2.0 * (2.0 + eta_first * params.smoothness) * params.lipschitz * math.log(rounds)
        / (mu * epsilon)
        + (eta_first - eta_last) * params.lipschitz**2 / epsilon
    )
    return math.ceil(value)


def _multinomial(total: int, parts: tuple[int, int, int]) -> float:
    """total! / (a! b! c!), exact integers up to 64 rounds, log-space beyond."""
    if total <= 64:
        out = math.factorial(total)
        for p in parts:
            out //= math.factorial(p)
        return float(out)
    log_value = math.lgamma(total + 1) - sum(math.lgamma(p + 1) for p in parts)
    return math.exp(log_value)


def unfairness_probability(rounds: int, num_clients: int, selected_per_round: int, threshold_steps: int) -> float:
    """Probability that two identical clients' per-round value gap, driven
    only by random selection, reaches ``threshold_steps`` units.

    Each round, exactly one of the pair is selected with probability p each
    way (p = m(N-m)/(N(N-1))) and the gap moves one unit up or down; with
    probability 1-2p it stays. The returned tail probability of the
    resulting trinomial walk lower-bounds the chance that the final values
    differ by at least ``threshold_steps`` gap units.
    """
    t, n, m, s = rounds, num_clients, selected_per_round, threshold_steps
    if t < 1:
        raise ValueError("rounds must be >= 1")
    if not 1 <= m < n:
        raise ValueError("need 1 <= selected_per_round < num_clients")
    if s < 0:
        raise ValueError("threshold_steps must be >= 0")
    p = m * (n - m) / (n * (n - 1))
    stay = 1.0 - 2.0 * p
    total = 0.0
    for a in range(s, t + 1):
        for b in range((t - a) // 2 + 1):
            coeff = _multinomial(t, (b, t - a - 2 * b, b + a))
            total += coeff * p ** (2 * b + a) * stay ** (t - a - 2 * b)
    return total


def relative_difference(values: dict[int, float], i: int, j: int) -> float:
    """|v_i - v_j| scaled by the larger of the two values."""
    a, b = values[i], values[j]
    top = max(a, b)
    if a == 0.0 and b == 0.0:
        return 0.0
    if top < 0:
        raise NumericError(
            f"relative difference undefined for negative maximum ({a}, {b})"
        )
    if top == 0.0:
        raise NumericError(f"relative difference undefined for maximum 0 ({a}, {b})")
    return abs(a - b) / top


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(a, b) -> float:
    """Rank correlation with average ranks under ties."""
    x = np.asarray(a, dtype=float)
    y = np.asarray(b, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be equal-length 1-d sequences")
    if len(x) < 2:
        raise ValueError("need at least two entries")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0.0:
        raise NumericError("rank correlation undefined for constant input")
    return float(rx @ ry) / denom


def jaccard(a, b) -> float:
    """|A n B| / |A u B|; two empty sets count as identical."""
    sa, sb = set(a), set(b)
    union = sa | sb
    if not union:
        return 1.0
    return len(sa & sb) / len(union)


@dataclass(frozen=True)
class FairnessVerdict:
    """Measured fairness gaps against a tolerance.

    ``symmetry_gap``: largest value difference over planted identical pairs.
    ``zero_gap``: largest (signed) value of planted no-contribution clients.
    ``additivity_gap``: largest deviation of a value from the sum of its
    split-part values. A ``None`` gap means the construct was not planted;
    such clauses are listed in ``not_tested`` rather than silently passed.
    """

    epsilon: float
    symmetry_gap: float | None
    zero_gap: float | None
    additivity_gap: float | None

    @property
    def not_tested(self) -> tuple[str, ...]:
        out = []
        if self.symmetry_gap is None:
            out.append("symmetry")
        if self.zero_gap is None:
            out.append("zero_element")
        if self.additivity_gap is None:
            out.append("additivity")
        return tuple(out)

    @property
    def passes(self) -> bool:
        gaps = [
            g
            for g in (self.symmetry_gap, self.zero_gap, self.additivity_gap)
            if g is not None
        ]
        return bool(gaps) and all(g <= self.epsilon for g in gaps)

    def to_json(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "symmetry_gap": self.symmetry_gap,
            "zero_gap": self.zero_gap,
            "additivity_gap": self.additivity_gap,
            "not_tested": list(self.not_tested),
            "passes": self.passes,
        }


def fairness_check(
    values: dict[int, float],
    epsilon: float,
    identical_pairs: list[tuple[int, int]] = (),
    null_clients: list[int] = (),
    split_values: tuple[dict[int, float], dict[int, float]] | None = None,
) -> FairnessVerdict:
    """Measure the three fairness gaps for planted constructs.

    ``identical_pairs`` lists clients with byte-identical data,
    ``null_clients`` lists clients whose updates never move the model, and
    ``split_values`` holds valuations recomputed on an additive split of the
    utility (for example even and odd rounds).
    """
    symmetry = None
    if identical_pairs:
        symmetry = max(abs(values[i] - values[j]) for i, j in identical_pairs)
    zero = None
    if null_clients:
        zero = max(values[i] for i in null_clients)
    additivity = None
    if split_values is not None:
        first, second = split_values
        additivity = max(
            abs(values[i] - (first[i] + second[i])) for i in values
        )
    return FairnessVerdict(
        epsilon=epsilon,
        symmetry_gap=symmetry,
        zero_gap=zero,
        additivity_gap=additivity,
    )


def estimate_smoothness(
    trace: TrainingTrace,
    objective,
    datasets,
    test_set,
) -> SmoothnessParams:
    """Estimate the loss regularity constants along the training path.

    Maxima are taken over every dataset (clients and the test set) of loss
    and gradient difference ratios between consecutive global models, and of
    gradient norms at every global model. Estimates cover the realized path
    only; they are flagged as empirical and unsuitable as proofs.
    """
    all_sets = list(datasets) + [test_set]
    lipschitz = 0.0
    smoothness = 0.0
    models = trace.global_models
    for ds in all_sets:
        grads = [objective.gradient(w, ds) for w in models]
        losses = [objective.loss(w, ds) for w in models]
        for g in grads:
            lipschitz = max(lipschitz, float(np.linalg.norm(g)))
        for idx in range(len(models) - 1):
            step = float(np.linalg.norm(models[idx] - models[idx + 1]))
            if step == 0.0:
                continue
            lipschitz = max(lipschitz, abs(losses[idx] - losses[idx + 1]) / step)
            smoothness = max(
                smoothness, float(np.linalg.norm(grads[idx] - grads[idx + 1])) / step
            )
    mu = getattr(objective, "regularization_mu", 0.0)
    lipschitz = max(lipschitz, 1e-12)
    smoothness = max(smoothness, mu, 1e-12)
    return SmoothnessParams(
        lipschitz=lipschitz,
        smoothness=smoothness,
        strong_convexity=mu,
        source="empirically_estimated",
    )
