"""Coalition utilities and the sparse per-round utility matrix.

The utility of coalition S in round t is the test-loss decrease achieved by
averaging the round-t local models of S's members. Entries are stored as
coordinate triples keyed by (round, canonical coalition).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, MissingEntryError
from .fedsim import ClientDataset, TrainingTrace

__all__ = [
    "CoalitionKey",
    "EMPTY_COALITION",
    "UtilityEvaluator",
    "UtilityMatrix",
    "round_utility",
    "observe_matrix",
    "full_matrix",
    "save_matrix",
    "load_matrix",
    "split_even_odd",
]


@dataclass(frozen=True, order=True)
class CoalitionKey:
    """Canonical coalition identifier: a sorted tuple of client ids.

    Keys built from any ordering of the same members compare equal, so
    permutation prefixes that reach the same set collapse to one column.
    """

    members: tuple[int, ...]

    def __post_init__(self):
        if any(m < 0 for m in self.members):
            raise ValueError("client ids must be non-negative")
        ordered = tuple(sorted(set(self.members)))
        if ordered != self.members:
            object.__setattr__(self, "members", ordered)

    @classmethod
    def of(cls, members) -> "CoalitionKey":
        return cls(tuple(members))

    @classmethod
    def from_mask(cls, mask: int) -> "CoalitionKey":
        return cls(tuple(i for i in range(mask.bit_length()) if mask >> i & 1))

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def mask(self) -> int:
        if self.members and self.members[-1] >= 62:
            raise ValueError("bitmask encoding supports client ids < 62")
        out = 0
        for m in self.members:
            out |= 1 << m
        return out

    @property
    def hex_mask(self) -> str:
        return format(self.mask, "x")

    def with_member(self, client_id: int) -> "CoalitionKey":
        return CoalitionKey(self.members + (client_id,))

    def issubset(self, ids) -> bool:
        return set(self.members) <= set(ids)


EMPTY_COALITION = CoalitionKey(())


class UtilityEvaluator:
    """Evaluates round-coalition utilities from a trace.

    Coalition means are accumulated in a content-canonical member order
    (clients ranked by the byte digest of their round model), so coalitions
    that differ only by swapping byte-identical models produce bit-identical
    utilities. ``calls`` counts actual loss evaluations; memoized hits are
    free.
    """

    def __init__(self, trace: TrainingTrace, objective, test_set: ClientDataset, memoize: bool = True):
        self.trace = trace
        self.objective = objective
        self.test_set = test_set
        self.memoize = memoize
        self.calls = 0
        self._memo: dict[tuple[int, CoalitionKey], float] = {}
        self._digest_rank: dict[int, dict[int, int]] = {}

    def _rank(self, t: int) -> dict[int, int]:
        ranks = self._digest_rank.get(t)
        if ranks is None:
            models = self.trace.local_models[t]
            ordered = sorted(models, key=lambda i: models[i].tobytes())
            ranks = {i: r for r, i in enumerate(ordered)}
            self._digest_rank[t] = ranks
        return ranks

    def _coalition_mean(self, t: int, key: CoalitionKey) -> np.ndarray:
        models = self.trace.local_models[t]
        for i in key.members:
            if i not in models:
                raise MissingEntryError(f"no local model for round {t}, client {i}")
        ranks = self._rank(t)
        ordered = sorted(key.members, key=ranks.__getitem__)
        stacked = np.stack([models[i] for i in ordered])
        return np.add.reduce(stacked, axis=0) / key.size

    def value(self, t: int, key: CoalitionKey) -> float:
        return float(self.values(t, [key])[0])

    def values(self, t: int, keys: list[CoalitionKey]) -> np.ndarray:
        """Utilities for several coalitions of one round, batched."""
        if not 0 <= t < self.trace.rounds:
            raise ValueError(f"round {t} outside trace of {self.trace.rounds} rounds")
        out = np.zeros(len(keys))
        todo: list[tuple[int, CoalitionKey]] = []
        for pos, key in enumerate(keys):
            if key.size == 0:
                continue  # empty coalition leaves the model unchanged
            if self.memoize and (t, key) in self._memo:
                out[pos] = self._memo[(t, key)]
            else:
                todo.append((pos, key))
        if todo:
            means = np.stack([self._coalition_mean(t, key) for _, key in todo])
            losses = self.objective.loss_batch(means, self.test_set)
            base = self.trace.test_losses[t]
            self.calls += len(todo)
            for (pos, key), loss in zip(todo, losses):
                val = float(base - loss)
                out[pos] = val
                if self.memoize:
                    self._memo[(t, key)] = val
        return out


def round_utility(
    trace: TrainingTrace, objective, test_set: ClientDataset, t: int, coalition: CoalitionKey
) -> float:
    """Test-loss decrease when coalition members' round-t models are averaged."""
    return UtilityEvaluator(trace, objective, test_set).value(t, coalition)


@dataclass
class UtilityMatrix:
    """Sparse rounds x coalitions utility matrix in coordinate form."""

    rounds: int
    num_clients: int
    columns: list[CoalitionKey]
    entries: dict[tuple[int, int], float]
    is_full: bool = False
    column_index: dict[CoalitionKey, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.column_index = {key: j for j, key in enumerate(self.columns)}
        if len(self.column_index) != len(self.columns):
            raise ValueError("duplicate coalition columns")

    @property
    def num_observed(self) -> int:
        return len(self.entries)

    def observed(self, t: int, key: CoalitionKey) -> bool:
        j = self.column_index.get(key)
        return j is not None and (t, j) in self.entries

    def value(self, t: int, key: CoalitionKey) -> float:
        j = self.column_index.get(key)
        if j is None or (t, j) not in self.entries:
            raise MissingEntryError(f"entry (round {t}, coalition {key.members}) not observed")
        return self.entries[(t, j)]

    def observed_pairs(self) -> list[tuple[int, CoalitionKey]]:
        return [(t, self.columns[j]) for (t, j) in sorted(self.entries)]

    def to_dense(self) -> np.ndarray:
        """Dense array with NaN in unobserved cells. Guarded against
        combinatorial blow-up."""
        if len(self.columns) > 1 << 20:
            raise ValueError("dense conversion limited to 2**20 columns")
        dense = np.full((self.rounds, len(self.columns)), np.nan)
        for (t, j), v in self.entries.items():
            dense[t, j] = v
        return dense


def observe_matrix(
    evaluator: UtilityEvaluator,
    mode: str = "all_subsets",
    prefixes: list[CoalitionKey] | None = None,
) -> UtilityMatrix:
    """Fill the observable utility entries of a trace.

    ``all_subsets`` observes every subset of each round's selected set
    (guarded to 20 selected clients); ``prefixes`` observes the requested
    coalitions wherever they are contained in the round's selection.
    """
    trace = evaluator.trace
    if mode == "all_subsets":
        if max(len(s) for s in trace.selections) > 20:
            raise ConfigError("all_subsets observation limited to 20 selected clients per round")
        column_set: dict[CoalitionKey, None] = {}
        per_round: list[list[CoalitionKey]] = []
        for selected in trace.selections:
            members = list(selected)
            keys = [
                CoalitionKey.of(m for b, m in enumerate(members) if mask >> b & 1)
                for mask in range(1 << len(members))
            ]
            per_round.append(keys)
            for key in keys:
                column_set.setdefault(key, None)
        columns = sorted(column_set)
    elif mode == "prefixes":
        if not prefixes:
            raise ConfigError("prefix observation needs a list of coalitions")
        columns = sorted(set(prefixes))
        per_round = [
            [key for key in columns if key.issubset(selected)]
            for selected in trace.selections
        ]
    else:
        raise ConfigError(f"unknown observation mode {mode!r}")

    matrix = UtilityMatrix(
        rounds=trace.rounds,
        num_clients=trace.num_clients,
        columns=columns,
        entries={},
    )
    for t, keys in enumerate(per_round):
        vals = evaluator.values(t, keys)
        for key, v in zip(keys, vals):
            matrix.entries[(t, matrix.column_index[key])] = float(v)
    return matrix


def full_matrix(evaluator: UtilityEvaluator) -> UtilityMatrix:
    """Dense ground-truth matrix over all 2**N coalitions (oracle traces)."""
    trace = evaluator.trace
    if not trace.oracle_mode:
        raise ConfigError("full utility matrix requires an oracle-mode trace")
    n = trace.num_clients
    if n > 20:
        raise ConfigError("full matrix limited to 20 clients")
    columns = [CoalitionKey.from_mask(mask) for mask in range(1 << n)]
    matrix = UtilityMatrix(
        rounds=trace.rounds,
        num_clients=n,
        columns=columns,
        entries={},
        is_full=True,
    )
    for t in range(trace.rounds):
        vals = evaluator.values(t, columns)
        for j, v in enumerate(vals):
            matrix.entries[(t, j)] = float(v)
    return matrix


def split_even_odd(matrix: UtilityMatrix) -> tuple[UtilityMatrix, UtilityMatrix]:
    """Split rows by round parity; each part keeps its own round indexing and
    the original column layout."""
    parts = []
    for parity in (0, 1):
        rounds = [t for t in range(matrix.rounds) if t % 2 == parity]
        remap = {t: r for r, t in enumerate(rounds)}
        entries = {
            (remap[t], j): v for (t, j), v in matrix.entries.items() if t % 2 == parity
        }
        parts.append(
            UtilityMatrix(
                rounds=len(rounds),
                num_clients=matrix.num_clients,
                columns=list(matrix.columns),
                entries=entries,
                is_full=matrix.is_full,
            )
        )
    return parts[0], parts[1]


def save_matrix(matrix: UtilityMatrix, directory: str | Path) -> None:
    """Write utility.csv (round, hex coalition mask, value) and columns.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "utility.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["round", "coalition", "value"])
        for (t, j), v in sorted(matrix.entries.items()):
            writer.writerow([t, matrix.columns[j].hex_mask, repr(v)])
    mapping = {key.hex_mask: list(key.members) for key in matrix.columns}
    with open(directory / "columns.json", "w") as handle:
        json.dump(
            {
                "rounds": matrix.rounds,
                "num_clients": matrix.num_clients,
                "is_full": matrix.is_full,
                "columns": mapping,
            },
            handle,
            indent=2,
        )


def load_matrix(directory: str | Path) -> UtilityMatrix:
    directory = Path(directory)
    with open(directory / "columns.json") as handle:
        meta = json.load(handle)
    columns = [CoalitionKey.of(members) for members in meta["columns"].values()]
    matrix = UtilityMatrix(
        rounds=meta["rounds"],
        num_clients=meta["num_clients"],
        columns=sorted(columns),
        entries={},
        is_full=meta["is_full"],
    )
    with open(directory / "utility.csv", newline="") as handle:
        reader = csv.reader(handle)
        next(reader)
        for t, hex_mask, value in reader:
            key = CoalitionKey.from_mask(int(hex_mask, 16))
            matrix.entries[(int(t), matrix.column_index[key])] = float(value)
    return matrix
