"""Shared builders for the test suite."""

import numpy as np
import pytest

from fedval.fedsim import (
    ClientDataset,
    ConstantSchedule,
    FedConfig,
    InverseDecaySchedule,
    LogisticObjective,
    RidgeObjective,
    generate_synthetic,
    run_fedavg,
    split_test_pool,
)


class QuadraticObjective:
    """Test-only objective 0.5 * ||w||^2; the dataset is ignored."""

    kind = "quadratic"
    regularization_mu = 1.0

    def __init__(self, dim: int = 1):
        self._dim = dim

    @property
    def dim(self) -> int:
        return self._dim

    def initial_weights(self) -> np.ndarray:
        return np.zeros(self._dim)

    def loss(self, w, dataset) -> float:
        return 0.5 * float(w @ w)

    def loss_batch(self, weights, dataset) -> np.ndarray:
        return 0.5 * np.einsum("bk,bk->b", weights, weights)

    def gradient(self, w, dataset) -> np.ndarray:
        return np.asarray(w, dtype=float).copy()


def dummy_dataset(client_id: int = 0, samples: int = 1, features: int = 1) -> ClientDataset:
    return ClientDataset(
        client_id=client_id,
        features=np.zeros((samples, features)),
        labels=np.zeros(samples),
    )


def ridge_problem(
    num_clients: int = 4,
    samples: int = 30,
    n_features: int = 5,
    mu: float = 0.5,
    seed: int = 0,
    scale: float = 0.3,
):
    """Small well-conditioned regression clients plus a pooled test set."""
    rng = np.random.default_rng(seed)
    truth = rng.normal(size=n_features) * scale
    datasets = []
    all_x, all_y = [], []
    for i in range(num_clients):
        x = rng.normal(size=(samples, n_features)) * scale
        y = x @ truth + 0.05 * rng.normal(size=samples)
        datasets.append(ClientDataset(client_id=i, features=x, labels=y))
        all_x.append(x[: samples // 3])
        all_y.append(y[: samples // 3])
    test = ClientDataset(client_id=-1, features=np.concatenate(all_x), labels=np.concatenate(all_y))
    objective = RidgeObjective(n_features, regularization_mu=mu)
    return datasets, test, objective


def logistic_problem(
    num_clients: int = 5,
    samples: int = 60,
    n_features: int = 8,
    n_classes: int = 3,
    mu: float = 0.01,
    alpha: float = 1.0,
    beta: float = 1.0,
    seed: int = 0,
    holdout: int = 15,
):
    datasets = generate_synthetic(
        alpha=alpha,
        beta=beta,
        num_clients=num_clients,
        samples_per_client=samples + holdout,
        n_features=n_features,
        n_classes=n_classes,
        seed=seed,
    )
    datasets, test = split_test_pool(datasets, holdout)
    objective = LogisticObjective(n_features, n_classes, regularization_mu=mu)
    return datasets, test, objective


def quick_trace(
    num_clients: int = 4,
    rounds: int = 5,
    clients_per_round: int = 2,
    oracle: bool = True,
    seed: int = 0,
    kind: str = "logistic",
    mu: float = 0.5,
    eta: float = 0.5,
    decay: bool = False,
):
    """One small trace plus its ingredients, for utility and valuation tests."""
    if kind == "logistic":
        datasets, test, objective = logistic_problem(num_clients=num_clients, seed=seed, mu=mu)
    else:
        datasets, test, objective = ridge_problem(num_clients=num_clients, seed=seed, mu=mu)
    schedule = InverseDecaySchedule(mu=mu, offset=4.0) if decay else ConstantSchedule(eta=eta)
    config = FedConfig(
        num_clients=num_clients,
        rounds=rounds,
        clients_per_round=clients_per_round,
        schedule=schedule,
        seed=seed,
        oracle_mode=oracle,
    )
    trace = run_fedavg(config, datasets, objective, test)
    return trace, datasets, test, objective


@pytest.fixture(scope="session")
def oracle_trace():
    """Session-wide small oracle trace reused by read-only tests."""
    return quick_trace(num_clients=4, rounds=5, clients_per_round=2, oracle=True, seed=7)
