"""Tests for data generation, objectives, and the federated loop."""

import numpy as np
import pytest

from conftest import QuadraticObjective, dummy_dataset, logistic_problem, ridge_problem

from fedval.errors import ConfigError, DataFormatError, NumericError
from fedval.fedsim import (
    ClientDataset,
    ConstantSchedule,
    FedConfig,
    InverseDecaySchedule,
    LogisticObjective,
    RidgeObjective,
    default_decay_offset,
    duplicate_client,
    generate_synthetic,
    inject_feature_noise,
    inject_label_noise,
    load_csv,
    load_trace,
    local_update,
    run_fedavg,
    save_trace,
    split_test_pool,
)


def label_histogram(dataset: ClientDataset, n_classes: int) -> np.ndarray:
    counts = np.bincount(dataset.labels.astype(int), minlength=n_classes)
    return counts / counts.sum()


class TestClientDataset:
    def test_row_count_must_match_labels(self):
        with pytest.raises(ValueError, match="labels"):
            ClientDataset(client_id=0, features=np.zeros((3, 2)), labels=np.zeros(2))

    def test_noise_fraction_range(self):
        with pytest.raises(ValueError, match="noise_fraction"):
            ClientDataset(
                client_id=0, features=np.zeros((2, 2)), labels=np.zeros(2), noise_fraction=1.5
            )


class TestGenerateSynthetic:
    def test_iid_setting_shares_one_generative_model(self):
        """With both spread parameters at zero, per-client label histograms
        differ only by sampling noise, far less than the heterogeneous case."""
        n, classes = 6, 5
        iid = generate_synthetic(0.0, 0.0, n, 400, n_features=10, n_classes=classes, seed=3)
        spread = generate_synthetic(1.0, 1.0, n, 400, n_features=10, n_classes=classes, seed=3)

        def max_pairwise_distance(datasets):
            hists = [label_histogram(ds, classes) for ds in datasets]
            return max(
                np.abs(hists[i] - hists[j]).sum()
                for i in range(n)
                for j in range(i + 1, n)
            )

        assert max_pairwise_distance(iid) < max_pairwise_distance(spread)

    def test_single_client(self):
        out = generate_synthetic(0.0, 0.0, 1, 17, n_features=4, n_classes=3, seed=0)
        assert len(out) == 1
        assert out[0].num_samples == 17

    def test_heterogeneous_labels_differ_between_clients(self):
        """Nonzero spread parameters give clients distinct label mixes."""
        for seed in (0, 99):
            datasets = generate_synthetic(1.0, 1.0, 4, 300, n_features=10, n_classes=5, seed=seed)
            hists = [label_histogram(ds, 5) for ds in datasets]
            distance = max(
                np.abs(hists[i] - hists[j]).sum() for i in range(4) for j in range(i + 1, 4)
            )
            assert distance > 0.0

    def test_rejects_bad_dimensions(self):
        with pytest.raises(ValueError):
            generate_synthetic(0.0, 0.0, 0, 10)
        with pytest.raises(ValueError):
            generate_synthetic(0.0, 0.0, 2, 0)

    def test_deterministic_given_seed(self):
        a = generate_synthetic(0.5, 0.5, 3, 20, n_features=6, n_classes=3, seed=11)
        b = generate_synthetic(0.5, 0.5, 3, 20, n_features=6, n_classes=3, seed=11)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.features, y.features)
            np.testing.assert_array_equal(x.labels, y.labels)


class TestLoadCsv:
    def write(self, tmp_path, rows):
        path = tmp_path / "data.csv"
        path.write_text("\n".join(",".join(str(v) for v in row) for row in rows) + "\n")
        return path

    def test_even_iid_split(self, tmp_path):
        rng = np.random.default_rng(0)
        rows = [[*rng.normal(size=3), i % 4] for i in range(100)]
        path = self.write(tmp_path, rows)
        datasets = load_csv(path, partition="iid", num_clients=10, seed=0)
        assert len(datasets) == 10
        assert all(ds.num_samples == 10 for ds in datasets)
        total = sum(ds.num_samples for ds in datasets)
        assert total == 100

    def test_by_label_two_classes_per_client(self, tmp_path):
        rng = np.random.default_rng(1)
        rows = [[*rng.normal(size=2), i % 10] for i in range(400)]
        path = self.write(tmp_path, rows)
        datasets = load_csv(path, partition="by_label", num_clients=10, seed=0)
        for ds in datasets:
            assert len(np.unique(ds.labels)) <= 2
        assert sum(ds.num_samples for ds in datasets) == 400

    def test_malformed_row_names_the_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1,2,0\n1,oops,1\n3,4,0\n")
        with pytest.raises(DataFormatError, match="line 2") as err:
            load_csv(path, partition="iid", num_clients=1)
        assert err.value.line_number == 2

    def test_more_clients_than_rows_rejected(self, tmp_path):
        path = self.write(tmp_path, [[1.0, 2.0, 0], [3.0, 4.0, 1]])
        with pytest.raises(ConfigError):
            load_csv(path, partition="iid", num_clients=5)


class TestInjectFeatureNoise:
    def test_linearly_increasing_fractions(self):
        datasets = generate_synthetic(0.0, 0.0, 10, 100, n_features=5, n_classes=3, seed=2)
        fractions = [0.05 * i for i in range(10)]
        noisy = inject_feature_noise(datasets, fractions, sigma=1.0, seed=5)
        changed = [
            int((~np.isclose(a.features, b.features)).any(axis=1).sum())
            for a, b in zip(datasets, noisy)
        ]
        assert changed[0] == 0
        assert changed[9] == 45
        assert noisy[9].noise_fraction == pytest.approx(0.45)

    def test_zero_fraction_is_bit_identical(self):
        datasets = generate_synthetic(0.0, 0.0, 2, 30, n_features=4, n_classes=2, seed=3)
        noisy = inject_feature_noise(datasets, [0.0, 0.0], sigma=2.0, seed=1)
        for a, b in zip(datasets, noisy):
            np.testing.assert_array_equal(a.features, b.features)

    def test_zero_sigma_changes_nothing(self):
        datasets = generate_synthetic(0.0, 0.0, 1, 30, n_features=4, n_classes=2, seed=3)
        noisy = inject_feature_noise(datasets, [1.0], sigma=0.0, seed=1)
        np.testing.assert_array_equal(datasets[0].features, noisy[0].features)
        assert noisy[0].noise_fraction == 1.0

    def test_fraction_out_of_range(self):
        datasets = generate_synthetic(0.0, 0.0, 1, 5, n_features=2, n_classes=2, seed=0)
        with pytest.raises(ValueError):
            inject_feature_noise(datasets, [1.2], sigma=1.0)


class TestInjectLabelNoise:
    def test_exact_flip_counts(self):
        datasets = generate_synthetic(0.0, 0.0, 5, 100, n_features=4, n_classes=4, seed=4)
        noisy_ids = {1, 3}
        flipped = inject_label_noise(datasets, noisy_ids, flip_fraction=0.3, seed=9)
        for before, after in zip(datasets, flipped):
            diff = int((before.labels != after.labels).sum())
            if before.client_id in noisy_ids:
                assert diff == 30
            else:
                assert diff == 0

    def test_zero_fraction_is_identity(self):
        datasets = generate_synthetic(0.0, 0.0, 2, 40, n_features=4, n_classes=3, seed=4)
        flipped = inject_label_noise(datasets, {0, 1}, flip_fraction=0.0, seed=9)
        for before, after in zip(datasets, flipped):
            np.testing.assert_array_equal(before.labels, after.labels)

    def test_binary_full_flip_is_complement(self):
        labels = np.array([0, 1, 1, 0, 1])
        ds = ClientDataset(client_id=0, features=np.zeros((5, 2)), labels=labels)
        flipped = inject_label_noise([ds], {0}, flip_fraction=1.0, seed=0)
        np.testing.assert_array_equal(flipped[0].labels, 1 - labels)

    def test_unknown_client_rejected(self):
        ds = dummy_dataset()
        with pytest.raises(ValueError, match="unknown"):
            inject_label_noise([ds], {5}, flip_fraction=0.1)


class TestObjectives:
    """Analytic gradients must match central finite differences."""

    @pytest.mark.parametrize("mu", [0.0, 0.3])
    def test_logistic_gradient_matches_finite_differences(self, mu):
        rng = np.random.default_rng(0)
        obj = LogisticObjective(n_features=4, n_classes=3, regularization_mu=mu)
        x = rng.normal(size=(25, 4))
        y = rng.integers(0, 3, size=25)
        ds = ClientDataset(client_id=0, features=x, labels=y)
        self._check_gradient(obj, ds, rng, probes=60)

    @pytest.mark.parametrize("mu", [0.0, 0.3])
    def test_ridge_gradient_matches_finite_differences(self, mu):
        rng = np.random.default_rng(1)
        obj = RidgeObjective(n_features=5, regularization_mu=mu)
        x = rng.normal(size=(20, 5))
        y = rng.normal(size=20)
        ds = ClientDataset(client_id=0, features=x, labels=y)
        self._check_gradient(obj, ds, rng, probes=60)

    @staticmethod
    def _check_gradient(obj, ds, rng, probes):
        h = 1e-6
        for _ in range(probes):
            w = rng.normal(size=obj.dim)
            grad = obj.gradient(w, ds)
            for k in rng.choice(obj.dim, size=min(3, obj.dim), replace=False):
                e = np.zeros(obj.dim)
                e[k] = h
                numeric = (obj.loss(w + e, ds) - obj.loss(w - e, ds)) / (2 * h)
                denom = max(abs(numeric), 1.0)
                assert abs(grad[k] - numeric) / denom <= 1e-5

    def test_strong_convexity_lower_bound(self):
        """With mu > 0 the loss dominates its quadratic minorant."""
        rng = np.random.default_rng(2)
        mu = 0.4
        obj = LogisticObjective(n_features=3, n_classes=3, regularization_mu=mu)
        ds = ClientDataset(
            client_id=0,
            features=rng.normal(size=(30, 3)),
            labels=rng.integers(0, 3, size=30),
        )
        for _ in range(100):
            x = rng.normal(size=obj.dim)
            y = rng.normal(size=obj.dim)
            lower = (
                obj.loss(x, ds)
                + obj.gradient(x, ds) @ (y - x)
                + 0.5 * mu * float((y - x) @ (y - x))
            )
            assert obj.loss(y, ds) >= lower - 1e-9

    def test_batch_loss_matches_single(self):
        rng = np.random.default_rng(3)
        obj = LogisticObjective(n_features=4, n_classes=3, regularization_mu=0.1)
        ds = ClientDataset(
            client_id=0,
            features=rng.normal(size=(15, 4)),
            labels=rng.integers(0, 3, size=15),
        )
        batch = rng.normal(size=(7, obj.dim))
        losses = obj.loss_batch(batch, ds)
        for row, expected in zip(batch, losses):
            assert obj.loss(row, ds) == pytest.approx(expected, rel=1e-12)


class TestSchedules:
    def test_constant_is_flat(self):
        s = ConstantSchedule(eta=0.2)
        assert [s.rate(t) for t in (1, 5, 100)] == [0.2, 0.2, 0.2]

    def test_inverse_decay_values_and_monotonicity(self):
        s = InverseDecaySchedule(mu=1.0, offset=1.0)
        assert s.rate(1) == pytest.approx(1.0)
        rates = [s.rate(t) for t in range(1, 50)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))

    def test_inverse_decay_needs_positive_mu(self):
        with pytest.raises(ValueError):
            InverseDecaySchedule(mu=0.0, offset=1.0)

    def test_default_offset_floor(self):
        assert default_decay_offset(mu=0.1, smoothness=10.0) == 1.0
        assert default_decay_offset(mu=2.0, smoothness=1.0) == 16.0


class TestLocalUpdate:
    def test_quadratic_step(self):
        obj = QuadraticObjective()
        out = local_update(np.array([1.0]), obj, dummy_dataset(), eta=0.1)
        assert out[0] == pytest.approx(0.9)

    def test_zero_learning_rate_rejected(self):
        with pytest.raises(ValueError):
            local_update(np.array([1.0]), QuadraticObjective(), dummy_dataset(), eta=0.0)

    def test_stationary_point_unchanged(self):
        obj = QuadraticObjective()
        out = local_update(np.zeros(1), obj, dummy_dataset(), eta=0.5)
        np.testing.assert_array_equal(out, np.zeros(1))

    def test_nonfinite_gradient_raises(self):
        class Exploding(QuadraticObjective):
            def gradient(self, w, dataset):
                return np.array([np.inf])

        with pytest.raises(NumericError):
            local_update(np.zeros(1), Exploding(), dummy_dataset(), eta=0.1)


class TestRunFedavg:
    def test_degenerate_single_client_is_gradient_descent(self):
        config = FedConfig(
            num_clients=1,
            rounds=1,
            clients_per_round=1,
            schedule=ConstantSchedule(eta=0.1),
            seed=0,
        )
        trace = run_fedavg(
            config,
            [dummy_dataset()],
            QuadraticObjective(),
            dummy_dataset(),
            initial_weights=np.array([1.0]),
        )
        assert trace.global_models[1][0] == pytest.approx(0.9)

    def test_identical_datasets_stay_symmetric(self):
        datasets, test, objective = ridge_problem(num_clients=2, seed=5)
        datasets = duplicate_client(datasets, 0, 1)
        config = FedConfig(
            num_clients=2,
            rounds=4,
            clients_per_round=2,
            schedule=ConstantSchedule(eta=0.3),
            seed=1,
        )
        trace = run_fedavg(config, datasets, objective, test)
        for t in range(trace.rounds):
            np.testing.assert_array_equal(
                trace.local_models[t][0], trace.local_models[t][1]
            )
            np.testing.assert_array_equal(trace.local_models[t][0], trace.global_models[t + 1])

    def test_full_participation_reaches_centralized_optimum(self):
        """With every client selected each round, the iterates approach the
        minimizer of the average objective; a long plain gradient-descent
        run on that average is the oracle."""
        mu = 0.5
        datasets, test, objective = ridge_problem(num_clients=3, samples=25, mu=mu, seed=8)
        config = FedConfig(
            num_clients=3,
            rounds=200,
            clients_per_round=3,
            schedule=InverseDecaySchedule(mu=mu, offset=4.0),
            seed=0,
        )
        trace = run_fedavg(config, datasets, objective, test)

        def average_loss(w):
            return float(np.mean([objective.loss(w, ds) for ds in datasets]))

        def average_grad(w):
            return np.mean([objective.gradient(w, ds) for ds in datasets], axis=0)

        w = objective.initial_weights()
        for _ in range(4000):
            w = w - 0.2 * average_grad(w)
        assert average_loss(trace.global_models[-1]) - average_loss(w) <= 1e-3

    def test_aggregation_matches_selected_mean(self):
        datasets, test, objective = logistic_problem(num_clients=5, seed=2)
        config = FedConfig(
            num_clients=5,
            rounds=6,
            clients_per_round=2,
            schedule=ConstantSchedule(eta=0.4),
            seed=3,
            oracle_mode=True,
        )
        trace = run_fedavg(config, datasets, objective, test)
        assert len(trace.selections[0]) == 5  # full first round
        for t, selected in enumerate(trace.selections):
            if t > 0:
                assert len(selected) == 2
            mean = np.mean([trace.local_models[t][i] for i in selected], axis=0)
            assert np.abs(trace.global_models[t + 1] - mean).max() <= 1e-10

    def test_oracle_mode_stores_all_clients_but_same_globals(self):
        datasets, test, objective = logistic_problem(num_clients=4, seed=9)
        base = dict(
            num_clients=4,
            rounds=5,
            clients_per_round=2,
            schedule=ConstantSchedule(eta=0.4),
            seed=11,
        )
        plain = run_fedavg(FedConfig(**base), datasets, objective, test)
        oracle = run_fedavg(FedConfig(**base, oracle_mode=True), datasets, objective, test)
        for t in range(5):
            assert set(oracle.local_models[t]) == {0, 1, 2, 3}
            assert set(plain.local_models[t]) == set(plain.selections[t])
            np.testing.assert_array_equal(plain.global_models[t + 1], oracle.global_models[t + 1])

    def test_bitwise_determinism(self):
        datasets, test, objective = logistic_problem(num_clients=4, seed=1)
        config = FedConfig(
            num_clients=4,
            rounds=4,
            clients_per_round=2,
            schedule=ConstantSchedule(eta=0.4),
            seed=5,
        )
        a = run_fedavg(config, datasets, objective, test)
        b = run_fedavg(config, datasets, objective, test)
        assert a.selections == b.selections
        for t in range(4):
            np.testing.assert_array_equal(a.global_models[t + 1], b.global_models[t + 1])

    def test_divergence_reports_round(self):
        datasets, test, objective = ridge_problem(num_clients=2, seed=0, scale=3.0)
        config = FedConfig(
            num_clients=2,
            rounds=50,
            clients_per_round=2,
            schedule=ConstantSchedule(eta=1e6),
            seed=0,
        )
        with pytest.raises(NumericError, match="round"):
            run_fedavg(config, datasets, objective, test)

    def test_config_guards(self):
        with pytest.raises(ConfigError):
            FedConfig(num_clients=2, rounds=1, clients_per_round=3, schedule=ConstantSchedule(0.1))
        with pytest.raises(ConfigError):
            FedConfig(num_clients=2, rounds=0, clients_per_round=1, schedule=ConstantSchedule(0.1))


class TestTracePersistence:
    def test_roundtrip(self, tmp_path):
        datasets, test, objective = logistic_problem(num_clients=3, seed=4)
        config = FedConfig(
            num_clients=3,
            rounds=3,
            clients_per_round=2,
            schedule=ConstantSchedule(eta=0.4),
            seed=2,
            oracle_mode=True,
        )
        trace = run_fedavg(config, datasets, objective, test)
        save_trace(trace, tmp_path / "trace", config_echo={"seed": 2})
        loaded = load_trace(tmp_path / "trace")
        assert loaded.selections == trace.selections
        assert loaded.learning_rates == trace.learning_rates
        assert loaded.test_losses == trace.test_losses
        for t in range(3):
            for i, vec in trace.local_models[t].items():
                np.testing.assert_allclose(loaded.local_models[t][i], vec, rtol=0, atol=0)


class TestSplitTestPool:
    def test_holdout_sizes(self):
        datasets = generate_synthetic(0.0, 0.0, 3, 50, n_features=4, n_classes=2, seed=0)
        train, pool = split_test_pool(datasets, 10)
        assert all(ds.num_samples == 40 for ds in train)
        assert pool.num_samples == 30
