"""Shapley-style client valuations.

Four routes are provided: the classic permutation-average Shapley value of
an arbitrary coalition game, the per-round federated value summed over
rounds (unselected clients score zero in a round), the exact completed
value computed from factor matrices, and its Monte-Carlo permutation
estimator. Ground truth applies the completed-value formula directly to a
fully observed utility matrix.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .errors import MissingEntryError
from .utility import EMPTY_COALITION, CoalitionKey, UtilityEvaluator, UtilityMatrix

__all__ = [
    "PermutationSample",
    "ValuationReport",
    "shapley_weights",
    "classic_shapley",
    "fedsv",
    "fedsv_mc",
    "sample_permutations",
    "comfedsv_exact",
    "comfedsv_mc",
    "ground_truth",
    "save_report",
]


def shapley_weights(num_clients: int) -> np.ndarray:
    """Permutation weights by coalition size: w[s] = s!(n-1-s)!/n!.

    Computed with exact integer binomials, so no overflow up to n = 20.
    """
    n = num_clients
    return np.array([1.0 / (n * math.comb(n - 1, s)) for s in range(n)])


def _shapley_from_mask_values(values: np.ndarray, num_clients: int, scale: float) -> dict[int, float]:
    """Shapley values of a game given as a dense mask-indexed value vector."""
    n = num_clients
    weights = shapley_weights(n)
    sizes = np.zeros(1 << n, dtype=int)
    for mask in range(1, 1 << n):
        sizes[mask] = sizes[mask >> 1] + (mask & 1)
    out = {}
    masks = np.arange(1 << n)
    for i in range(n):
        bit = 1 << i
        without = masks[(masks & bit) == 0]
        marginals = values[without | bit] - values[without]
        out[i] = scale * float(np.dot(weights[sizes[without]], marginals))
    return out


def classic_shapley(
    utility: Callable[[CoalitionKey], float] | Mapping[CoalitionKey, float],
    num_clients: int,
    scale: float = 1.0,
) -> dict[int, float]:
    """Exact Shapley value of a coalition game by direct summation.

    ``scale=1`` gives the standard permutation-average value (additive games
    pay each client its own contribution); ``scale`` multiplies it.
    """
    if num_clients > 20:
        raise ValueError(
            "exact Shapley enumeration limited to 20 clients; use the "
            "Monte-Carlo permutation estimator instead"
        )
    if callable(utility):
        evaluate = utility
    else:
        evaluate = utility.__getitem__
    values = np.array(
        [evaluate(CoalitionKey.from_mask(mask)) for mask in range(1 << num_clients)]
    )
    return _shapley_from_mask_values(values, num_clients, scale)


@dataclass
class ValuationReport:
    """Per-client values with the diagnostics needed to reproduce them."""

    method: str
    values: dict[int, float]
    diagnostics: dict = field(default_factory=dict)
    per_round_values: dict[int, dict[int, float]] | None = None

    def ranking(self) -> list[int]:
        """Client ids ordered from most to least valuable."""
        return sorted(self.values, key=lambda i: (-self.values[i], i))

    def to_json(self) -> dict:
        out = {
            "method": self.method,
            "values": [
                {"client": i, "value": self.values[i]} for i in sorted(self.values)
            ],
            "diagnostics": self.diagnostics,
        }
        if self.per_round_values is not None:
            out["per_round_values"] = {
                str(t): {str(i): v for i, v in vals.items()}
                for t, vals in self.per_round_values.items()
            }
        return out


def save_report(report: ValuationReport, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"valuation_{report.method}.json"
    with open(path, "w") as handle:
        json.dump(report.to_json(), handle, indent=2)
    return path


def fedsv(matrix: UtilityMatrix, selections: list[tuple[int, ...]]) -> ValuationReport:
    """Per-round Shapley value over each round's selected clients, summed.

    Clients outside the round's selection contribute zero for that round.
    Every subset of every selection must be observed in the matrix.
    """
    totals = {i: 0.0 for i in range(matrix.num_clients)}
    per_round: dict[int, dict[int, float]] = {}
    for t, selected in enumerate(selections):
        members = list(selected)
        k = len(members)
        if k > 20:
            raise ValueError("per-round enumeration limited to 20 selected clients")
        values = np.empty(1 << k)
        for mask in range(1 << k):
            key = CoalitionKey.of(m for b, m in enumerate(members) if mask >> b & 1)
            try:
                values[mask] = matrix.value(t, key)
            except MissingEntryError:
                raise MissingEntryError(
                    f"round {t}: subset {key.members} of selection {members} not observed"
                ) from None
        round_values = _shapley_from_mask_values(values, k, 1.0)
        per_round[t] = {members[b]: round_values[b] for b in range(k)}
        for b in range(k):
            totals[members[b]] += round_values[b]
    return ValuationReport(
        method="fedsv",
        values=totals,
        diagnostics={"rounds": matrix.rounds, "prefactor": "per_round_permutation_average"},
        per_round_values=per_round,
    )


def fedsv_mc(
    evaluator: UtilityEvaluator,
    seed: int = 0,
    permutations_per_round: int | None = None,
) -> ValuationReport:
    """Monte-Carlo variant of the per-round value for timing studies.

    Each round samples permutations of the selected clients and averages the
    marginal utility of each insertion; the default budget is
    ceil(k * ln k) permutations for k selected clients.
    """
    trace = evaluator.trace
    rng = np.random.default_rng(seed)
    totals = {i: 0.0 for i in range(trace.num_clients)}
    for t, selected in enumerate(trace.selections):
        members = list(selected)
        k = len(members)
        budget = permutations_per_round
        if budget is None:
            budget = max(1, math.ceil(k * math.log(max(k, 2))))
        sums = {i: 0.0 for i in members}
        for _ in range(budget):
            order = [members[j] for j in rng.permutation(k)]
            previous = 0.0  # empty coalition leaves the model unchanged
            key = EMPTY_COALITION
            for client in order:
                key = key.with_member(client)
                current = evaluator.value(t, key)
                sums[client] += current - previous
                previous = current
        for client in members:
            totals[client] += sums[client] / budget
    return ValuationReport(
        method="fedsv_mc",
        values=totals,
        diagnostics={"rounds": trace.rounds, "utility_calls": evaluator.calls},
    )


@dataclass(frozen=True)
class PermutationSample:
    """Uniformly sampled client orderings with their cumulative prefixes.

    ``prefix_keys[m][p]`` is the canonical coalition of the first ``p``
    elements of ordering ``m``; equal prefixes from different orderings share
    one key.
    """

    num_clients: int
    permutations: tuple[tuple[int, ...], ...]
    prefix_keys: tuple[tuple[CoalitionKey, ...], ...]

    @property
    def size(self) -> int:
        return len(self.permutations)

    def unique_keys(self) -> list[CoalitionKey]:
        seen: dict[CoalitionKey, None] = {}
        for chain in self.prefix_keys:
            for key in chain:
                seen.setdefault(key, None)
        return sorted(seen)

    def steps(self, m: int):
        """Yield (client, coalition before, coalition after) along ordering m."""
        chain = self.prefix_keys[m]
        for p, client in enumerate(self.permutations[m]):
            yield client, chain[p], chain[p + 1]


def sample_permutations(num_clients: int, count: int, seed: int = 0) -> PermutationSample:
    if count < 1:
        raise ValueError("need at least one permutation")
    rng = np.random.default_rng(seed)
    registry: dict[tuple[int, ...], CoalitionKey] = {(): EMPTY_COALITION}
    perms = []
    chains = []
    for _ in range(count):
        order = tuple(int(i) for i in rng.permutation(num_clients))
        chain = [EMPTY_COALITION]
        running: list[int] = []
        for client in order:
            running.append(client)
            members = tuple(sorted(running))
            key = registry.get(members)
            if key is None:
                key = CoalitionKey(members)
                registry[members] = key
            chain.append(key)
        perms.append(order)
        chains.append(tuple(chain))
    return PermutationSample(
        num_clients=num_clients,
        permutations=tuple(perms),
        prefix_keys=tuple(chains),
    )


def exhaustive_permutations(num_clients: int) -> PermutationSample:
    """All n! orderings; turns the Monte-Carlo estimator into the exact sum."""
    from itertools import permutations as iter_permutations

    registry: dict[tuple[int, ...], CoalitionKey] = {(): EMPTY_COALITION}
    perms = []
    chains = []
    for order in iter_permutations(range(num_clients)):
        chain = [EMPTY_COALITION]
        running: list[int] = []
        for client in order:
            running.append(client)
            members = tuple(sorted(running))
            key = registry.setdefault(members, CoalitionKey(members))
            chain.append(key)
        perms.append(order)
        chains.append(tuple(chain))
    return PermutationSample(
        num_clients=num_clients,
        permutations=tuple(perms),
        prefix_keys=tuple(chains),
    )


def _column_dots(factors) -> dict[CoalitionKey, float]:
    """Sum over rounds of the factor inner products, one scalar per column."""
    round_sum = factors.W.sum(axis=0)
    dots = factors.H @ round_sum
    return {key: float(dots[j]) for j, key in enumerate(factors.column_keys)}


def comfedsv_exact(factors, num_clients: int) -> ValuationReport:
    """Completed value by direct summation over all coalitions.

    Requires a factor row for every one of the 2**N coalitions.
    """
    if num_clients > 15:
        raise ValueError("exact completed value limited to 15 clients")
    dots = _column_dots(factors)
    values = np.empty(1 << num_clients)
    for mask in range(1 << num_clients):
        key = CoalitionKey.from_mask(mask)
        if key not in dots:
            raise MissingEntryError(f"factor row missing for coalition {key.members}")
        values[mask] = dots[key]
    result = _shapley_from_mask_values(values, num_clients, 1.0)
    return ValuationReport(
        method="comfedsv_exact",
        values=result,
        diagnostics={"rank": factors.W.shape[1], "num_clients": num_clients},
    )


def comfedsv_mc(factors, sample: PermutationSample) -> ValuationReport:
    """Monte-Carlo completed value averaged over sampled orderings.

    Averaging marginals over all n! orderings reproduces the exact completed
    value, so the estimator is unbiased for it. Per-client standard errors
    are estimated from the per-ordering contributions.
    """
    dots = _column_dots(factors)
    n = sample.num_clients
    contribs = np.zeros((sample.size, n))
    for m in range(sample.size):
        for client, before, after in sample.steps(m):
            try:
                contribs[m, client] = dots[after] - dots[before]
            except KeyError:
                missing = after if after not in dots else before
                raise MissingEntryError(
                    f"factor row missing for coalition {missing.members}"
                ) from None
    means = contribs.mean(axis=0)
    if sample.size > 1:
        stderr = contribs.std(axis=0, ddof=1) / math.sqrt(sample.size)
    else:
        stderr = np.full(n, np.nan)
    return ValuationReport(
        method="comfedsv_mc",
        values={i: float(means[i]) for i in range(n)},
        diagnostics={
            "samples": sample.size,
            "rank": factors.W.shape[1],
            "standard_errors": {i: float(stderr[i]) for i in range(n)},
            "convention": "permutation_expectation",
        },
    )


def ground_truth(matrix: UtilityMatrix) -> ValuationReport:
    """Completed-value formula applied directly to a full utility matrix."""
    if not matrix.is_full:
        raise ValueError("ground truth needs a fully observed utility matrix")
    n = matrix.num_clients
    totals = np.zeros(1 << n)
    for (t, j), v in matrix.entries.items():
        totals[matrix.columns[j].mask] += v
    values = _shapley_from_mask_values(totals, n, 1.0)
    return ValuationReport(
        method="ground_truth",
        values=values,
        diagnostics={"rounds": matrix.rounds, "num_clients": n},
    )
