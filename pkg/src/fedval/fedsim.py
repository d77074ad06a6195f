"""Client data generation, local objectives, and the federated averaging loop.

The simulator runs synchronous rounds: the server broadcasts the current
model, every participating client takes one deterministic full-gradient
step on its local objective, and the server averages the models of a
uniformly sampled subset of clients. Traces record everything needed to
evaluate coalition utilities after the fact.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, MissingEntryError, NumericError

__all__ = [
    "ClientDataset",
    "LogisticObjective",
    "RidgeObjective",
    "make_objective",
    "ConstantSchedule",
    "InverseDecaySchedule",
    "default_decay_offset",
    "FedConfig",
    "TrainingTrace",
    "generate_synthetic",
    "load_csv",
    "split_test_pool",
    "inject_feature_noise",
    "inject_label_noise",
    "duplicate_client",
    "local_update",
    "run_fedavg",
    "save_trace",
    "load_trace",
]


@dataclass(frozen=True)
class ClientDataset:
    """One client's local data plus provenance about injected noise.

    ``labels`` holds integer class indices for classification objectives or
    real targets for regression ones.
    """

    client_id: int
    features: np.ndarray
    labels: np.ndarray
    noise_fraction: float = 0.0
    duplicate_of: int | None = None

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d (samples x n_features) array")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"client {self.client_id}: {self.features.shape[0]} feature rows "
                f"vs {self.labels.shape[0]} labels"
            )
        if not 0.0 <= self.noise_fraction <= 1.0:
            raise ValueError(f"noise_fraction must be in [0, 1], got {self.noise_fraction}")

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]


class LogisticObjective:
    """Multinomial logistic regression loss with an optional quadratic term.

    The weight vector packs a (n_classes x n_features) matrix followed by a
    per-class intercept. With ``regularization_mu > 0`` the objective is
    strongly convex with that modulus.
    """

    kind = "logistic_regression"

    def __init__(self, n_features: int, n_classes: int, regularization_mu: float = 0.0):
        if n_features < 1 or n_classes < 2:
            raise ValueError("need n_features >= 1 and n_classes >= 2")
        if regularization_mu < 0:
            raise ValueError("regularization_mu must be >= 0")
        self.n_features = n_features
        self.n_classes = n_classes
        self.regularization_mu = regularization_mu

    @property
    def dim(self) -> int:
        return self.n_classes * (self.n_features + 1)

    def initial_weights(self) -> np.ndarray:
        return np.zeros(self.dim)

    def _unpack(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        c, f = self.n_classes, self.n_features
        return w[: c * f].reshape(c, f), w[c * f :]

    def loss(self, w: np.ndarray, dataset: ClientDataset) -> float:
        return float(self.loss_batch(w[None, :], dataset)[0])

    def loss_batch(self, weights: np.ndarray, dataset: ClientDataset) -> np.ndarray:
        """Losses for a batch of packed weight vectors, shape (B, dim)."""
        c, f = self.n_classes, self.n_features
        reg = 0.5 * self.regularization_mu * np.einsum("bk,bk->b", weights, weights)
        m = dataset.num_samples
        if m == 0:
            return reg
        x = dataset.features
        y = dataset.labels.astype(int)
        mats = weights[:, : c * f].reshape(-1, c, f)
        bias = weights[:, c * f :]
        out = np.empty(weights.shape[0])
        # chunked so a full 2^N coalition batch does not blow up memory
        chunk = max(1, int(4e6 // max(1, m * c)))
        for start in range(0, weights.shape[0], chunk):
            stop = min(start + chunk, weights.shape[0])
            logits = np.einsum("mf,bcf->bmc", x, mats[start:stop]) + bias[start:stop, None, :]
            zmax = logits.max(axis=2, keepdims=True)
            lse = zmax[:, :, 0] + np.log(np.exp(logits - zmax).sum(axis=2))
            picked = logits[:, np.arange(m), y]
            out[start:stop] = (lse - picked).mean(axis=1)
        return out + reg

    def gradient(self, w: np.ndarray, dataset: ClientDataset) -> np.ndarray:
        mat, bias = self._unpack(w)
        reg = self.regularization_mu * w
        m = dataset.num_samples
        if m == 0:
            return reg
        x = dataset.features
        y = dataset.labels.astype(int)
        logits = x @ mat.T + bias
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(m), y] -= 1.0
        grad_mat = p.T @ x / m
        grad_bias = p.mean(axis=0)
        return np.concatenate([grad_mat.ravel(), grad_bias]) + reg


class RidgeObjective:
    """Least-squares regression loss with an optional quadratic term.

    The weight vector packs the coefficients followed by the intercept.
    """

    kind = "ridge_regression"

    def __init__(self, n_features: int, regularization_mu: float = 0.0):
        if n_features < 1:
            raise ValueError("need n_features >= 1")
        if regularization_mu < 0:
            raise ValueError("regularization_mu must be >= 0")
        self.n_features = n_features
        self.regularization_mu = regularization_mu

    @property
    def dim(self) -> int:
        return self.n_features + 1

    def initial_weights(self) -> np.ndarray:
        return np.zeros(self.dim)

    def loss(self, w: np.ndarray, dataset: ClientDataset) -> float:
        return float(self.loss_batch(w[None, :], dataset)[0])

    def loss_batch(self, weights: np.ndarray, dataset: ClientDataset) -> np.ndarray:
        reg = 0.5 * self.regularization_mu * np.einsum("bk,bk->b", weights, weights)
        if dataset.num_samples == 0:
            return reg
        preds = dataset.features @ weights[:, :-1].T + weights[:, -1]
        resid = preds - dataset.labels.astype(float)[:, None]
        return 0.5 * np.einsum("mb,mb->b", resid, resid) / dataset.num_samples + reg

    def gradient(self, w: np.ndarray, dataset: ClientDataset) -> np.ndarray:
        reg = self.regularization_mu * w
        m = dataset.num_samples
        if m == 0:
            return reg
        resid = dataset.features @ w[:-1] + w[-1] - dataset.labels.astype(float)
        grad_coef = dataset.features.T @ resid / m
        grad_b = resid.mean()
        return np.concatenate([grad_coef, [grad_b]]) + reg

    def smoothness_constant(self, datasets: list[ClientDataset]) -> float:
        """Exact gradient-Lipschitz modulus over the given datasets."""
        worst = 0.0
        for ds in datasets:
            if ds.num_samples == 0:
                continue
            xb = np.hstack([ds.features, np.ones((ds.num_samples, 1))])
            top = float(np.linalg.eigvalsh(xb.T @ xb / ds.num_samples)[-1])
            worst = max(worst, top)
        return worst + self.regularization_mu


def make_objective(kind: str, n_features: int, n_classes: int = 2, regularization_mu: float = 0.0):
    if kind == "logistic_regression":
        return LogisticObjective(n_features, n_classes, regularization_mu)
    if kind == "ridge_regression":
        return RidgeObjective(n_features, regularization_mu)
    raise ConfigError(f"unknown objective kind {kind!r}")


@dataclass(frozen=True)
class ConstantSchedule:
    eta: float

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("constant learning rate must be > 0")

    def rate(self, round_number: int) -> float:
        """Learning rate for 1-based ``round_number``."""
        return self.eta


@dataclass(frozen=True)
class InverseDecaySchedule:
    """Rate 2 / (mu * (offset + t)) for 1-based round t; non-increasing."""

    mu: float
    offset: float

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("inverse decay needs mu > 0")
        if self.offset < 0:
            raise ValueError("offset must be >= 0")

    def rate(self, round_number: int) -> float:
        return 2.0 / (self.mu * (self.offset + round_number))


def default_decay_offset(mu: float, smoothness: float) -> float:
    """Default decay offset max(8*mu/smoothness, 1).

    Kept overridable: callers may pass any offset >= 1 to the schedule and
    the closed-form rank bound stays valid.
    """
    return max(8.0 * mu / smoothness, 1.0)


@dataclass(frozen=True)
class FedConfig:
    num_clients: int
    rounds: int
    clients_per_round: int
    schedule: ConstantSchedule | InverseDecaySchedule
    seed: int = 0
    oracle_mode: bool = False
    first_round_full: bool = True

    def __post_init__(self):
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise ConfigError(
                f"clients_per_round must be in [1, {self.num_clients}], "
                f"got {self.clients_per_round}"
            )
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


@dataclass
class TrainingTrace:
    """Record of one federated run.

    ``global_models[t]`` is the model at the start of round ``t`` (0-based);
    the final entry is the trained model. ``local_models[t]`` maps client id
    to the model produced in round ``t`` (all clients in oracle mode, the
    selected ones otherwise).
    """

    num_clients: int
    global_models: list[np.ndarray]
    local_models: list[dict[int, np.ndarray]]
    selections: list[tuple[int, ...]]
    learning_rates: list[float]
    test_losses: list[float]
    oracle_mode: bool

    @property
    def rounds(self) -> int:
        return len(self.selections)

    def local_model(self, round_index: int, client_id: int) -> np.ndarray:
        try:
            return self.local_models[round_index][client_id]
        except (IndexError, KeyError):
            raise MissingEntryError(
                f"no local model stored for round {round_index}, client {client_id}"
            ) from None


def generate_synthetic(
    alpha: float,
    beta: float,
    num_clients: int,
    samples_per_client: int,
    n_features: int = 60,
    n_classes: int = 10,
    seed: int = 0,
) -> list[ClientDataset]:
    """Generate heterogeneous multiclass client data.

    Every client's labelling model is a shared base matrix plus an
    entrywise mean shift drawn with spread ``alpha``; feature centres get an
    analogous shift with spread ``beta``. Both zero collapses every client
    onto one shared generative model (the IID setting). Feature coordinate
    j has variance j**-1.2; labels are the argmax class response.
    """
    if num_clients < 1 or samples_per_client < 1:
        raise ValueError("num_clients and samples_per_client must be >= 1")
    if n_features < 1 or n_classes < 2:
        raise ValueError("need n_features >= 1 and n_classes >= 2")
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be >= 0")
    rng = np.random.default_rng(seed)
    base_mat = rng.normal(size=(n_classes, n_features))
    base_bias = rng.normal(size=n_classes)
    base_mean = rng.normal(size=n_features)
    coord_std = np.arange(1, n_features + 1, dtype=float) ** -0.6
    datasets = []
    for i in range(num_clients):
        mat = base_mat + rng.normal(0.0, alpha, size=base_mat.shape) if alpha > 0 else base_mat
        bias = base_bias + rng.normal(0.0, alpha, size=n_classes) if alpha > 0 else base_bias
        center = base_mean + rng.normal(0.0, beta, size=n_features) if beta > 0 else base_mean
        x = center + rng.normal(size=(samples_per_client, n_features)) * coord_std
        labels = np.argmax(x @ mat.T + bias, axis=1)
        datasets.append(ClientDataset(client_id=i, features=x, labels=labels))
    return datasets


def load_csv(path: str | Path, partition: str, num_clients: int, seed: int = 0) -> list[ClientDataset]:
    """Load a numeric CSV (last column = label) and partition it to clients.

    ``partition`` is ``"iid"`` (seeded shuffle, even split) or ``"by_label"``
    (each client receives at most two distinct classes where the class count
    permits).
    """
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"no such file: {path}")
    rows: list[list[float]] = []
    width = None
    with open(path, newline="") as handle:
        for line_number, row in enumerate(csv.reader(handle), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            try:
                parsed = [float(cell) for cell in row]
            except ValueError:
                raise DataFormatError(
                    f"{path}: line {line_number} is not numeric", line_number
                ) from None
            if width is None:
                width = len(parsed)
                if width < 2:
                    raise DataFormatError(
                        f"{path}: line {line_number} needs features plus a label column",
                        line_number,
                    )
            elif len(parsed) != width:
                raise DataFormatError(
                    f"{path}: line {line_number} has {len(parsed)} columns, expected {width}",
                    line_number,
                )
            rows.append(parsed)
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    if num_clients < 1:
        raise ConfigError("num_clients must be >= 1")
    if num_clients > len(rows):
        raise ConfigError(f"cannot split {len(rows)} rows across {num_clients} clients")
    data = np.asarray(rows)
    features, raw_labels = data[:, :-1], data[:, -1]
    integral = np.allclose(raw_labels, np.round(raw_labels))
    labels = raw_labels.astype(int) if integral else raw_labels

    rng = np.random.default_rng(seed)
    if partition == "iid":
        order = rng.permutation(len(rows))
        splits = np.array_split(order, num_clients)
    elif partition == "by_label":
        if not integral:
            raise DataFormatError(f"{path}: by_label partitioning needs integer labels")
        splits = _label_slots(labels, num_clients, rng)
    else:
        raise ConfigError(f"unknown partition {partition!r}")
    return [
        ClientDataset(client_id=i, features=features[idx], labels=labels[idx])
        for i, idx in enumerate(splits)
    ]


def _label_slots(labels: np.ndarray, num_clients: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Assign class shards to 2 slots per client, covering every row."""
    classes = np.unique(labels)
    n_slots = 2 * num_clients
    slot_classes: list[list[int]] = [[] for _ in range(n_slots)]
    if len(classes) <= n_slots:
        for s in range(n_slots):
            slot_classes[s].append(int(classes[s % len(classes)]))
    else:
        for rank, cls in enumerate(classes):
            slot_classes[rank % n_slots].append(int(cls))
    # count how many slots ask for each class, then deal that class's rows out
    slots_of_class: dict[int, list[int]] = {}
    for s, wanted in enumerate(slot_classes):
        for cls in wanted:
            slots_of_class.setdefault(cls, []).append(s)
    slot_rows: list[list[np.ndarray]] = [[] for _ in range(n_slots)]
    for cls, slot_ids in slots_of_class.items():
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        for part, s in zip(np.array_split(idx, len(slot_ids)), slot_ids):
            slot_rows[s].append(part)
    out = []
    for i in range(num_clients):
        pieces = slot_rows[2 * i] + slot_rows[2 * i + 1]
        merged = np.concatenate(pieces) if pieces else np.array([], dtype=int)
        out.append(np.sort(merged))
    return out


def split_test_pool(
    datasets: list[ClientDataset], holdout_per_client: int
) -> tuple[list[ClientDataset], ClientDataset]:
    """Carve the last ``holdout_per_client`` rows of every client into one
    pooled server-side test set; the orchestrator keeps it, clients never
    see it."""
    if holdout_per_client < 1:
        raise ValueError("holdout_per_client must be >= 1")
    if any(ds.num_samples <= holdout_per_client for ds in datasets):
        raise ValueError("every client needs more samples than the holdout size")
    train, feats, labs = [], [], []
    for ds in datasets:
        cut = ds.num_samples - holdout_per_client
        train.append(replace(ds, features=ds.features[:cut], labels=ds.labels[:cut]))
        feats.append(ds.features[cut:])
        labs.append(ds.labels[cut:])
    pool = ClientDataset(
        client_id=-1, features=np.concatenate(feats), labels=np.concatenate(labs)
    )
    return train, pool


def inject_feature_noise(
    datasets: list[ClientDataset], fractions: list[float], sigma: float, seed: int = 0
) -> list[ClientDataset]:
    """Add zero-mean Gaussian noise with standard deviation ``sigma`` to
    round(fraction * samples) rows of each client's features."""
    if len(fractions) != len(datasets):
        raise ValueError("need one fraction per client")
    if any(not 0.0 <= f <= 1.0 for f in fractions):
        raise ValueError("fractions must lie in [0, 1]")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    rng = np.random.default_rng(seed)
    out = []
    for ds, frac in zip(datasets, fractions):
        count = int(round(frac * ds.num_samples))
        features = ds.features.copy()
        if count > 0:
            rows = rng.choice(ds.num_samples, size=count, replace=False)
            features[rows] += rng.normal(0.0, sigma, size=(count, ds.num_features))
        out.append(replace(ds, features=features, noise_fraction=float(frac)))
    return out


def inject_label_noise(
    datasets: list[ClientDataset],
    noisy_clients: set[int],
    flip_fraction: float,
    seed: int = 0,
) -> list[ClientDataset]:
    """Flip round(flip_fraction * samples) labels of the listed clients to a
    uniformly random different class."""
    if not 0.0 <= flip_fraction <= 1.0:
        raise ValueError("flip_fraction must lie in [0, 1]")
    known = {ds.client_id for ds in datasets}
    unknown = set(noisy_clients) - known
    if unknown:
        raise ValueError(f"unknown client ids: {sorted(unknown)}")
    classes = np.unique(np.concatenate([ds.labels for ds in datasets]))
    rng = np.random.default_rng(seed)
    out = []
    for ds in datasets:
        if ds.client_id not in noisy_clients:
            out.append(ds)
            continue
        count = int(round(flip_fraction * ds.num_samples))
        if count > 0 and len(classes) < 2:
            raise ValueError("label flipping needs at least two classes")
        labels = ds.labels.copy()
        rows = rng.choice(ds.num_samples, size=count, replace=False)
        for r in rows:
            others = classes[classes != labels[r]]
            labels[r] = rng.choice(others)
        out.append(replace(ds, labels=labels, noise_fraction=float(flip_fraction)))
    return out


def duplicate_client(
    datasets: list[ClientDataset], source: int, target: int
) -> list[ClientDataset]:
    """Replace client ``target``'s data with an exact copy of ``source``'s."""
    by_id = {ds.client_id: ds for ds in datasets}
    if source not in by_id or target not in by_id:
        raise ValueError("source and target must be existing client ids")
    src = by_id[source]
    out = []
    for ds in datasets:
        if ds.client_id == target:
            out.append(
                ClientDataset(
                    client_id=target,
                    features=src.features.copy(),
                    labels=src.labels.copy(),
                    noise_fraction=src.noise_fraction,
                    duplicate_of=source,
                )
            )
        else:
            out.append(ds)
    return out


def local_update(w: np.ndarray, objective, dataset: ClientDataset, eta: float) -> np.ndarray:
    """One deterministic full-gradient step."""
    if eta <= 0:
        raise ValueError("learning rate must be > 0")
    grad = objective.gradient(w, dataset)
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite gradient for client {dataset.client_id}")
    return w - eta * grad


def run_fedavg(
    config: FedConfig,
    datasets: list[ClientDataset],
    objective,
    test_set: ClientDataset,
    initial_weights: np.ndarray | None = None,
) -> TrainingTrace:
    """Run the federated averaging protocol and record a full trace.

    The first round selects every client when ``first_round_full`` is set, so
    each coalition column of the utility matrix is observable at least once.
    In oracle mode all clients' local updates are computed and stored every
    round while the global aggregate still averages only the selected ones,
    keeping the model sequence identical to the non-oracle run.
    """
    if len(datasets) != config.num_clients:
        raise ConfigError(f"expected {config.num_clients} datasets, got {len(datasets)}")
    for i, ds in enumerate(datasets):
        if ds.client_id != i:
            raise ConfigError("datasets must be ordered by client_id 0..N-1")
    if test_set.num_samples < 1:
        raise ConfigError("test set must be nonempty")

    rng = np.random.default_rng(config.seed)
    n = config.num_clients
    w = objective.initial_weights() if initial_weights is None else np.asarray(initial_weights, dtype=float).copy()
    globals_ = [w]
    locals_: list[dict[int, np.ndarray]] = []
    selections: list[tuple[int, ...]] = []
    rates: list[float] = []
    for t in range(config.rounds):
        eta = config.schedule.rate(t + 1)
        if t == 0 and config.first_round_full:
            selected = tuple(range(n))
        else:
            selected = tuple(sorted(rng.permutation(n)[: config.clients_per_round].tolist()))
        compute = range(n) if config.oracle_mode else selected
        round_models: dict[int, np.ndarray] = {}
        for i in compute:  # ascending client id keeps aggregation deterministic
            try:
                round_models[i] = local_update(w, objective, datasets[i], eta)
            except NumericError as exc:
                raise NumericError(f"round {t}: {exc}") from None
        w = np.mean([round_models[i] for i in selected], axis=0)
        if not math.isfinite(objective.loss(w, test_set)):
            raise NumericError(f"round {t}: objective diverged (non-finite test loss)")
        globals_.append(w)
        locals_.append(round_models)
        selections.append(selected)
        rates.append(eta)
    test_losses = [float(objective.loss(g, test_set)) for g in globals_]
    return TrainingTrace(
        num_clients=n,
        global_models=globals_,
        local_models=locals_,
        selections=selections,
        learning_rates=rates,
        test_losses=test_losses,
        oracle_mode=config.oracle_mode,
    )


def save_trace(trace: TrainingTrace, directory: str | Path, config_echo: dict | None = None) -> None:
    """Persist a trace: trace.json metadata plus one CSV weight file per
    (round, client) named w_{t}_{i}.csv and per-round globals."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "num_clients": trace.num_clients,
        "rounds": trace.rounds,
        "oracle_mode": trace.oracle_mode,
        "selections": [list(s) for s in trace.selections],
        "learning_rates": trace.learning_rates,
        "test_losses": trace.test_losses,
        "config": config_echo or {},
    }
    with open(directory / "trace.json", "w") as handle:
        json.dump(meta, handle, indent=2)
    for t, round_models in enumerate(trace.local_models):
        for i, vec in round_models.items():
            np.savetxt(directory / f"w_{t}_{i}.csv", vec, fmt="%.17g")
    for t, vec in enumerate(trace.global_models):
        np.savetxt(directory / f"w_global_{t}.csv", vec, fmt="%.17g")


def load_trace(directory: str | Path) -> TrainingTrace:
    directory = Path(directory)
    with open(directory / "trace.json") as handle:
        meta = json.load(handle)
    rounds = meta["rounds"]
    globals_ = [np.loadtxt(directory / f"w_global_{t}.csv") for t in range(rounds + 1)]
    locals_ = []
    for t in range(rounds):
        round_models = {}
        for path in sorted(directory.glob(f"w_{t}_*.csv")):
            client = int(path.stem.split("_")[-1])
            round_models[client] = np.loadtxt(path)
        locals_.append(round_models)
    return TrainingTrace(
        num_clients=meta["num_clients"],
        global_models=globals_,
        local_models=locals_,
        selections=[tuple(s) for s in meta["selections"]],
        learning_rates=meta["learning_rates"],
        test_losses=meta["test_losses"],
        oracle_mode=meta["oracle_mode"],
    )
