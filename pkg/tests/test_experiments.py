"""Tests for experiment orchestration and artifact layout."""

import json

import numpy as np
import pytest

from fedval.errors import ConfigError
from fedval.experiments import (
    ExperimentConfig,
    default_sample_count,
    run_analysis,
    run_fairness_preset,
    run_noise_presets,
    run_pipeline,
    run_rank_study,
    run_timing,
    write_generated_data,
)


def tiny_config(**overrides) -> ExperimentConfig:
    base = dict(
        experiment="pipeline",
        num_clients=4,
        rounds=4,
        clients_per_round=2,
        seed=5,
        data={
            "kind": "synthetic",
            "alpha": 1.0,
            "beta": 1.0,
            "samples_per_client": 40,
            "n_features": 6,
            "n_classes": 3,
            "test_samples_per_client": 10,
        },
        objective={"kind": "logistic_regression", "regularization_mu": 0.05},
        learning_rate={"kind": "constant", "eta": 0.5},
    )
    base.update(overrides)
    return ExperimentConfig(**base)


class TestConfig:
    def test_json_roundtrip(self, tmp_path):
        config = tiny_config(trials=3)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(config.to_dict()))
        loaded = ExperimentConfig.from_json(path)
        assert loaded.to_dict() == config.to_dict()

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            ExperimentConfig.from_dict({"experiment": "pipeline", "bogus": 1})

    def test_unknown_experiment_rejected(self):
        with pytest.raises(ConfigError):
            tiny_config(experiment="nope")

    def test_missing_csv_path_rejected(self):
        with pytest.raises(ConfigError):
            tiny_config(data={"kind": "csv", "path": "/does/not/exist.csv"})

    def test_default_sample_count_grows_superlinearly(self):
        assert default_sample_count(10) == 24
        assert default_sample_count(2) >= 2


class TestPipeline:
    def test_exhaustive_two_client_run_matches_ground_truth(self, tmp_path):
        """Fully observed single round, exhaustive orderings, near-exact
        completion: the estimate coincides with the full-matrix value."""
        config = tiny_config(
            num_clients=2,
            rounds=1,
            clients_per_round=2,
            oracle_mode=True,
            monte_carlo_samples=2,
            completion={
                "regularization": 1e-8,
                "rank": 1,
                "tolerance": 1e-14,
                "max_iterations": 3000,
            },
            seed=3,
        )
        report = run_pipeline(config, tmp_path)
        truth = json.loads((tmp_path / "valuation_ground_truth.json").read_text())
        truth_values = {int(row["client"]): row["value"] for row in truth["values"]}
        for i in range(2):
            assert report.values[i] == pytest.approx(truth_values[i], abs=1e-8)

    def test_artifact_completeness(self, tmp_path):
        config = tiny_config(duplicate_pair=[0, 3])
        report = run_pipeline(config, tmp_path)
        for name in ("config.json", "utility.csv", "columns.json", "analysis.json", "run_log.json"):
            assert (tmp_path / name).exists(), name
        assert (tmp_path / "trace" / "trace.json").exists()
        assert (tmp_path / "factors" / "W.csv").exists()
        assert (tmp_path / "factors" / "H.csv").exists()
        assert (tmp_path / "valuation_comfedsv_mc.json").exists()
        assert "duplicate_pair_relative_difference" in report.diagnostics
        echoed = json.loads((tmp_path / "config.json").read_text())
        assert echoed["resolved"]["rank"] >= 1
        assert echoed["resolved"]["monte_carlo_samples"] == default_sample_count(4)

    def test_deterministic_artifacts(self, tmp_path):
        config = tiny_config()
        run_pipeline(config, tmp_path / "a")
        run_pipeline(config, tmp_path / "b")
        assert (tmp_path / "a" / "utility.csv").read_bytes() == (
            tmp_path / "b" / "utility.csv"
        ).read_bytes()
        va = (tmp_path / "a" / "valuation_comfedsv_mc.json").read_bytes()
        vb = (tmp_path / "b" / "valuation_comfedsv_mc.json").read_bytes()
        assert va == vb

    def test_default_sample_budget_used_when_unset(self, tmp_path):
        config = tiny_config(num_clients=5, clients_per_round=2)
        run_pipeline(config, tmp_path)
        echoed = json.loads((tmp_path / "config.json").read_text())
        assert echoed["resolved"]["monte_carlo_samples"] == default_sample_count(5)


class TestFairnessPreset:
    def test_trials_and_cdf_emitted(self, tmp_path):
        config = tiny_config(experiment="fairness", trials=3, duplicate_pair=[0, 3])
        summary = run_fairness_preset(config, tmp_path)
        lines = (tmp_path / "fairness_trials.csv").read_text().splitlines()
        assert len(lines) == 4  # header + one row per trial
        cdf = (tmp_path / "fairness_cdf.csv").read_text().splitlines()
        assert len(cdf) == 22
        assert (tmp_path / "fairness_cdf.png").exists()
        for curve in (summary["cdf_fedsv"], summary["cdf_comfedsv"]):
            assert all(0.0 <= v <= 1.0 for v in curve)
            assert all(a <= b for a, b in zip(curve, curve[1:]))

    def test_single_trial_cdf_is_step(self, tmp_path):
        config = tiny_config(experiment="fairness", trials=1, duplicate_pair=[0, 3])
        with pytest.warns(UserWarning, match="trials"):
            summary = run_fairness_preset(config, tmp_path)
        assert set(summary["cdf_comfedsv"]) <= {0.0, 1.0}


class TestNoisePresets:
    def test_noisy_data_requires_increasing_fractions(self, tmp_path):
        config = tiny_config(experiment="noisy_data", noise_fractions=[0.0] * 4)
        with pytest.raises(ConfigError, match="increasing"):
            run_noise_presets(config, tmp_path)

    def test_noisy_data_emits_metrics(self, tmp_path):
        config = tiny_config(
            experiment="noisy_data",
            trials=2,
            data={
                "kind": "synthetic",
                "alpha": 0.0,
                "beta": 0.0,
                "samples_per_client": 40,
                "n_features": 6,
                "n_classes": 3,
                "test_samples_per_client": 10,
            },
            oracle_mode=True,
        )
        result = run_noise_presets(config, tmp_path)
        assert len(result["rows"]) == 2
        for row in result["rows"]:
            assert all(-1.0 <= v <= 1.0 for v in row[1:])
        assert (tmp_path / "noisy_data.csv").exists()
        assert (tmp_path / "noisy_data.png").exists()

    def test_noisy_label_reports_overlap_per_participation(self, tmp_path):
        config = tiny_config(
            experiment="noisy_label",
            num_clients=8,
            rounds=3,
            clients_per_round=2,
            participation_percents=[25, 50],
            label_noise={"noisy_clients": 2, "flip_fraction": 0.5},
        )
        result = run_noise_presets(config, tmp_path)
        assert [row[0] for row in result["rows"]] == [25, 50]
        for row in result["rows"]:
            assert 0.0 <= row[1] <= 1.0
            assert 0.0 <= row[2] <= 1.0
        assert (tmp_path / "noisy_label.csv").exists()
        assert (tmp_path / "noisy_label.png").exists()

    def test_noisy_label_geometry_guard(self, tmp_path):
        config = tiny_config(
            experiment="noisy_label",
            label_noise={"noisy_clients": 10},  # exceeds the client count
        )
        with pytest.raises(ConfigError):
            run_noise_presets(config, tmp_path)


class TestRankStudy:
    def test_curve_and_choice(self, tmp_path):
        config = tiny_config(
            experiment="rank_study",
            oracle_mode=True,
            candidate_ranks=[1, 2, 3],
            rounds=5,
        )
        result = run_rank_study(config, tmp_path)
        assert [row[0] for row in result["rows"]] == [1, 2, 3]
        assert result["chosen_rank"] in (1, 2, 3)
        assert (tmp_path / "rank_study.csv").exists()
        assert (tmp_path / "rank_study.png").exists()


class TestTiming:
    def test_two_point_grid(self, tmp_path):
        config = tiny_config(
            experiment="timing",
            client_grid=[4, 6],
            rounds=3,
            data={
                "kind": "synthetic",
                "alpha": 0.0,
                "beta": 0.0,
                "samples_per_client": 20,
                "n_features": 4,
                "n_classes": 2,
            },
        )
        result = run_timing(config, tmp_path)
        assert len(result["rows"]) == 2
        for row in result["rows"]:
            assert row[2] > 0 and row[3] > 0
        assert (tmp_path / "timing.csv").exists()
        assert (tmp_path / "timing.png").exists()

    def test_counts_deterministic_across_runs(self, tmp_path):
        config = tiny_config(experiment="timing", client_grid=[5], rounds=3)
        first = run_timing(config, tmp_path / "a")["rows"]
        second = run_timing(config, tmp_path / "b")["rows"]
        assert first[0][2:5] == second[0][2:5]

    def test_unsorted_grid_rejected(self, tmp_path):
        config = tiny_config(experiment="timing", client_grid=[6, 4])
        with pytest.raises(ConfigError):
            run_timing(config, tmp_path)


class TestAnalysisRunner:
    def test_analysis_artifacts(self, tmp_path):
        config = tiny_config(duplicate_pair=[0, 3], rounds=4)
        result = run_analysis(config, tmp_path)
        assert (tmp_path / "analysis.json").exists()
        assert (tmp_path / "singular_values.png").exists()
        assert (tmp_path / "valuation_ground_truth.json").exists()
        assert result["fairness_verdict"]["symmetry_gap"] is not None
        assert result["fairness_verdict"]["additivity_gap"] == pytest.approx(0.0, abs=1e-9)
        curve = result["epsilon_rank_curve"]
        assert all(curve[i][1] >= curve[i + 1][1] for i in range(len(curve) - 1))


class TestGenData:
    def test_writes_client_and_test_csvs(self, tmp_path):
        config = tiny_config()
        out = write_generated_data(config, tmp_path)
        for i in range(4):
            assert (out / f"client_{i}.csv").exists()
        table = np.loadtxt(out / "client_0.csv", delimiter=",")
        assert table.shape == (40, 7)  # features plus label column
        assert (out / "test.csv").exists()
