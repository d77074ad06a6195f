"""End-to-end experiment orchestration and artifact persistence.

The pipeline follows one run of the estimator: sample permutations, train
with a full first round, record every prefix utility observable under the
per-round selections, complete the matrix, and average factor marginals over
the sampled orderings. Presets wrap the pipeline for the fairness,
data-quality, rank, and timing studies; each writes delimited output plus a
rendered figure into its run directory.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import plots
from .analysis import (
    SmoothnessParams,
    epsilon_rank_upper,
    estimate_smoothness,
    fairness_check,
    jaccard,
    relative_difference,
    schedule_rank_bound,
    singular_values,
    spearman,
    trajectory_rank_bound,
    unfairness_probability,
)
from .completion import (
    CompletionConfig,
    FactorPair,
    choose_rank,
    delta_completedness,
    save_factors,
    solve,
)
from .errors import ConfigError, FedValError, NumericError
from .fedsim import (
    ClientDataset,
    ConstantSchedule,
    FedConfig,
    InverseDecaySchedule,
    duplicate_client,
    generate_synthetic,
    inject_feature_noise,
    inject_label_noise,
    load_csv,
    make_objective,
    run_fedavg,
    save_trace,
    split_test_pool,
)
from .utility import (
    UtilityEvaluator,
    UtilityMatrix,
    full_matrix,
    observe_matrix,
    save_matrix,
)
from .valuation import (
    PermutationSample,
    ValuationReport,
    comfedsv_exact,
    comfedsv_mc,
    fedsv,
    fedsv_mc,
    ground_truth,
    sample_permutations,
    save_report,
)

__all__ = [
    "ExperimentConfig",
    "default_sample_count",
    "run_pipeline",
    "run_fairness_preset",
    "run_noise_presets",
    "run_rank_study",
    "run_timing",
    "run_experiment",
]

PRESETS = ("pipeline", "fairness", "noisy_data", "noisy_label", "rank_study", "timing")


def default_sample_count(num_clients: int) -> int:
    """Default Monte-Carlo budget: ceil(N ln N) orderings."""
    return max(2, math.ceil(num_clients * math.log(max(num_clients, 2))))


@dataclass
class ExperimentConfig:
    """One experiment run, loadable from a single JSON document.

    Every default that gets resolved at run time (sample count, rank,
    solver settings) is echoed back into the run directory so results are
    self-describing.
    """

    experiment: str = "pipeline"
    output_dir: str = "runs/out"
    seed: int = 0
    trials: int = 1
    num_clients: int = 10
    rounds: int = 10
    clients_per_round: int = 3
    oracle_mode: bool = False
    first_round_full: bool = True
    learning_rate: dict = field(default_factory=lambda: {"kind": "constant", "eta": 0.5})
    objective: dict = field(
        default_factory=lambda: {"kind": "logistic_regression", "regularization_mu": 0.01}
    )
    data: dict = field(
        default_factory=lambda: {
            "kind": "synthetic",
            "alpha": 1.0,
            "beta": 1.0,
            "samples_per_client": 100,
            "n_features": 20,
            "n_classes": 5,
            "test_samples_per_client": 25,
        }
    )
    completion: dict = field(default_factory=dict)
    monte_carlo_samples: int | None = None
    duplicate_pair: list[int] | None = None
    null_client: int | None = None
    noise_sigma: float = 1.0
    noise_fractions: list[float] | None = None
    label_noise: dict = field(default_factory=dict)
    participation_percents: list[int] = field(default_factory=lambda: [10, 20, 30, 40, 50])
    client_grid: list[int] = field(default_factory=lambda: [10, 20, 30])
    participation_rate: float = 0.3
    candidate_ranks: list[int] | None = None

    def __post_init__(self):
        if self.experiment not in PRESETS:
            raise ConfigError(f"experiment must be one of {PRESETS}, got {self.experiment!r}")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.monte_carlo_samples is not None and self.monte_carlo_samples < 1:
            raise ConfigError("monte_carlo_samples must be >= 1")
        if self.data.get("kind") == "csv" and not Path(self.data.get("path", "")).exists():
            raise ConfigError(f"csv data path does not exist: {self.data.get('path')}")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        try:
            with open(path) as handle:
                raw = json.load(handle)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}

    # -- derived pieces -------------------------------------------------

    def schedule(self):
        kind = self.learning_rate.get("kind", "constant")
        if kind == "constant":
            return ConstantSchedule(eta=float(self.learning_rate.get("eta", 0.5)))
        if kind == "inverse_decay":
            try:
                return InverseDecaySchedule(
                    mu=float(self.learning_rate["mu"]),
                    offset=float(self.learning_rate.get("offset", 1.0)),
                )
            except KeyError:
                raise ConfigError("inverse_decay learning rate needs 'mu'") from None
        raise ConfigError(f"unknown learning rate kind {kind!r}")

    def fed_config(self, seed: int, *, oracle: bool | None = None, full_first: bool | None = None) -> FedConfig:
        return FedConfig(
            num_clients=self.num_clients,
            rounds=self.rounds,
            clients_per_round=self.clients_per_round,
            schedule=self.schedule(),
            seed=seed,
            oracle_mode=self.oracle_mode if oracle is None else oracle,
            first_round_full=self.first_round_full if full_first is None else full_first,
        )

    def build_objective(self, n_features: int):
        return make_objective(
            self.objective.get("kind", "logistic_regression"),
            n_features=n_features,
            n_classes=int(self.data.get("n_classes", 2)),
            regularization_mu=float(self.objective.get("regularization_mu", 0.0)),
        )

    def build_data(self, seed: int) -> tuple[list[ClientDataset], ClientDataset]:
        """Client datasets plus the pooled server-side test set.

        A configured duplicate pair is planted before the holdout split, so
        the test pool represents the population actually being trained.
        """
        kind = self.data.get("kind", "synthetic")
        if kind == "synthetic":
            holdout = int(self.data.get("test_samples_per_client", 25))
            datasets = generate_synthetic(
                alpha=float(self.data.get("alpha", 0.0)),
                beta=float(self.data.get("beta", 0.0)),
                num_clients=self.num_clients,
                samples_per_client=int(self.data.get("samples_per_client", 100)) + holdout,
                n_features=int(self.data.get("n_features", 20)),
                n_classes=int(self.data.get("n_classes", 5)),
                seed=seed,
            )
        elif kind == "csv":
            datasets = load_csv(
                self.data["path"],
                partition=self.data.get("partition", "iid"),
                num_clients=self.num_clients,
                seed=seed,
            )
            holdout = max(1, int(self.data.get("test_fraction", 0.2) * min(ds.num_samples for ds in datasets)))
        else:
            raise ConfigError(f"unknown data kind {kind!r}")
        if self.duplicate_pair:
            src, dst = self.duplicate_pair
            datasets = duplicate_client(datasets, src, dst)
        return split_test_pool(datasets, holdout)

    def completion_config(self, rank: int, seed: int) -> CompletionConfig:
        return CompletionConfig(
            rank=rank,
            regularization=float(self.completion.get("regularization", 0.05)),
            max_iterations=int(self.completion.get("max_iterations", 500)),
            tolerance=float(self.completion.get("tolerance", 1e-6)),
            init_scale=float(self.completion.get("init_scale", 0.1)),
            seed=seed,
        )


@contextmanager
def _stage(name: str):
    """Abort with the failing stage's name; earlier artifacts stay on disk."""
    try:
        yield
    except FedValError as exc:
        raise type(exc)(f"stage '{name}': {exc}") from exc
    except Exception as exc:
        raise NumericError(f"stage '{name}': {exc}") from exc


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=2)


def _resolve_rank(
    config: ExperimentConfig,
    matrix: UtilityMatrix,
    full: UtilityMatrix | None,
    params: SmoothnessParams | None,
    seed: int,
) -> int:
    """Rank default: the smallest of the holdout pick (oracle runs), the
    closed-form schedule bound (strongly convex runs), and 8; clipped to the
    solvable range."""
    limit = min(matrix.rounds, len(matrix.columns))
    explicit = config.completion.get("rank")
    if explicit is not None:
        return min(int(explicit), limit)
    candidates = [8]
    if full is not None:
        trial_ranks = list(range(1, min(10, min(full.rounds, len(full.columns))) + 1))
        candidates.append(
            choose_rank(full, trial_ranks, config.completion_config(rank=1, seed=seed))
        )
    schedule = config.schedule()
    if params is not None and isinstance(schedule, InverseDecaySchedule) and params.strong_convexity > 0:
        values = np.array(list(matrix.entries.values()))
        scale = float(np.abs(values).max()) if values.size else 1.0
        if scale > 0:
            candidates.append(
                schedule_rank_bound(matrix.rounds, params, schedule, epsilon=0.1 * scale)
            )
    return max(1, min(min(candidates), limit))


def run_pipeline(config: ExperimentConfig, output_dir: str | Path | None = None) -> ValuationReport:
    """One full estimator run; writes all artifacts and returns the
    Monte-Carlo completed-value report."""
    out = Path(output_dir if output_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()

    with _stage("data"):
        datasets, test_set = _planted_datasets(config, config.seed)
        objective = config.build_objective(datasets[0].num_features)

    with _stage("train"):
        fed = config.fed_config(config.seed)
        trace = run_fedavg(fed, datasets, objective, test_set)
        save_trace(trace, out / "trace", config_echo={"fed_seed": fed.seed})

    with _stage("sample_permutations"):
        m_count = config.monte_carlo_samples or default_sample_count(config.num_clients)
        sample = sample_permutations(config.num_clients, m_count, seed=config.seed + 1)

    with _stage("observe"):
        evaluator = UtilityEvaluator(trace, objective, test_set)
        matrix = observe_matrix(evaluator, mode="prefixes", prefixes=sample.unique_keys())
        save_matrix(matrix, out)
        full = full_matrix(evaluator) if trace.oracle_mode and config.num_clients <= 20 else None

    with _stage("smoothness"):
        params = estimate_smoothness(trace, objective, datasets, test_set)

    with _stage("complete"):
        rank = _resolve_rank(config, matrix, full, params, config.seed + 2)
        comp = config.completion_config(rank=rank, seed=config.seed + 2)
        factors = solve(matrix, comp)

    with _stage("value"):
        report = comfedsv_mc(factors, sample)
        report.diagnostics.update(
            {
                "rank": rank,
                "regularization": comp.regularization,
                "samples": sample.size,
                "seed": config.seed,
            }
        )
        extra_reports = []
        delta = None
        if full is not None:
            truth = ground_truth(full)
            extra_reports.append(truth)
            # the reduced factor set rarely covers all 2^N coalitions, so the
            # completion certificate is reported only when it does
            if not set(full.columns) - set(factors.column_keys):
                delta = delta_completedness(full, factors)
                report.diagnostics["delta_completedness"] = delta
        if config.duplicate_pair:
            i, j = config.duplicate_pair
            try:
                report.diagnostics["duplicate_pair_relative_difference"] = relative_difference(
                    report.values, i, j
                )
            except NumericError:
                report.diagnostics["duplicate_pair_relative_difference"] = 1.0
        save_report(report, out)
        for extra in extra_reports:
            save_report(extra, out)

    with _stage("factors"):
        save_factors(factors, out / "factors", extra={"regularization": comp.regularization})

    with _stage("analysis"):
        analysis: dict = {
            "utility_calls": evaluator.calls,
            "observed_entries": matrix.num_observed,
            "columns": len(matrix.columns),
            "smoothness": {
                "lipschitz": params.lipschitz,
                "smoothness": params.smoothness,
                "strong_convexity": params.strong_convexity,
                "source": params.source,
            },
            "trajectory_rank_bound_at_scale": None,
            "unfairness_table": _unfairness_table(config),
        }
        if full is not None:
            dense = full.to_dense()
            scale = float(np.abs(dense).max())
            grid = [scale * g for g in (0.01, 0.03, 0.1, 0.3, 1.0)] if scale > 0 else []
            analysis["epsilon_rank_curve"] = [
                [eps, epsilon_rank_upper(dense, eps)] for eps in grid
            ]
            analysis["singular_values"] = [float(s) for s in singular_values(dense)[:20]]
            if delta is not None:
                analysis["delta_completedness"] = delta
        try:
            scale = max(abs(v) for v in matrix.entries.values())
            if scale > 0:
                analysis["trajectory_rank_bound_at_scale"] = trajectory_rank_bound(
                    trace, params, epsilon=0.1 * scale
                )
        except ValueError:
            pass
        _write_json(out / "analysis.json", analysis)

    _write_json(out / "config.json", _echo(config, {"rank": rank, "samples": sample.size}))
    _write_json(out / "run_log.json", {"started": started, "finished": time.time()})
    return report


def _echo(config: ExperimentConfig, resolved: dict) -> dict:
    payload = config.to_dict()
    payload["resolved"] = {
        "monte_carlo_samples": resolved.get("samples"),
        "rank": resolved.get("rank"),
        "completion_defaults": {
            "regularization": float(config.completion.get("regularization", 0.05)),
            "max_iterations": int(config.completion.get("max_iterations", 500)),
            "tolerance": float(config.completion.get("tolerance", 1e-6)),
            "init_scale": float(config.completion.get("init_scale", 0.1)),
        },
    }
    return payload


def _unfairness_table(config: ExperimentConfig) -> list[list[float]]:
    n, m, t = config.num_clients, config.clients_per_round, config.rounds
    if not 1 <= m < n or t > 40:
        return []
    return [
        [s, unfairness_probability(t, n, m, s)] for s in range(0, t + 1, max(1, t // 10))
    ]


# ----------------------------------------------------------------------
# presets
# ----------------------------------------------------------------------


def _trial_valuations(config: ExperimentConfig, trial_seed: int) -> tuple[ValuationReport, ValuationReport]:
    """Shared fairness-trial body: exact per-round values and completed
    values on one trace.

    Up to 15 clients the completed value is summed exactly from a
    full-column solve (every coalition column exists thanks to the full
    first round); beyond that the permutation estimator takes over.
    """
    datasets, test_set = _planted_datasets(config, trial_seed)
    objective = config.build_objective(datasets[0].num_features)
    trace = run_fedavg(config.fed_config(trial_seed), datasets, objective, test_set)
    evaluator = UtilityEvaluator(trace, objective, test_set)

    observed = observe_matrix(evaluator, mode="all_subsets")
    per_round_report = fedsv(observed, trace.selections)

    if config.num_clients <= 15 and len(observed.columns) == 1 << config.num_clients:
        rank = _resolve_rank(config, observed, None, None, trial_seed + 2)
        factors = solve(observed, config.completion_config(rank=rank, seed=trial_seed + 2))
        completed_report = comfedsv_exact(factors, config.num_clients)
    else:
        m_count = config.monte_carlo_samples or default_sample_count(config.num_clients)
        sample = sample_permutations(config.num_clients, m_count, seed=trial_seed + 1)
        matrix = observe_matrix(evaluator, mode="prefixes", prefixes=sample.unique_keys())
        rank = _resolve_rank(config, matrix, None, None, trial_seed + 2)
        factors = solve(matrix, config.completion_config(rank=rank, seed=trial_seed + 2))
        completed_report = comfedsv_mc(factors, sample)
    return per_round_report, completed_report


def _safe_relative_difference(values: dict[int, float], i: int, j: int) -> float:
    """Preset-facing wrapper: degenerate value pairs count as maximally
    dissimilar instead of aborting a whole study."""
    try:
        return relative_difference(values, i, j)
    except NumericError:
        return 1.0


def run_fairness_preset(config: ExperimentConfig, output_dir: str | Path | None = None) -> dict:
    """Repeated-trial comparison of the value gap between a duplicated pair.

    Each trial reruns data generation and training with seed + trial index
    and records the relative difference of the pair under both valuations;
    the summary holds both empirical CDFs on a 21-point grid.
    """
    if not config.duplicate_pair:
        config.duplicate_pair = [0, config.num_clients - 1]
    if config.trials < 10:
        import warnings

        warnings.warn("fewer than 10 trials makes the empirical CDF very coarse")
    out = Path(output_dir if output_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    i, j = config.duplicate_pair

    rows = []
    for trial in range(config.trials):
        trial_seed = config.seed + trial
        per_round, completed = _trial_valuations(config, trial_seed)
        rows.append(
            [
                trial,
                _safe_relative_difference(per_round.values, i, j),
                _safe_relative_difference(completed.values, i, j),
                per_round.values[i],
                per_round.values[j],
                completed.values[i],
                completed.values[j],
            ]
        )
    _write_csv(
        out / "fairness_trials.csv",
        ["trial", "d_fedsv", "d_comfedsv", "fedsv_first", "fedsv_second", "comfedsv_first", "comfedsv_second"],
        rows,
    )

    grid = [round(0.05 * g, 2) for g in range(21)]
    d_fed = [r[1] for r in rows]
    d_com = [r[2] for r in rows]
    cdf_fed = [sum(d <= t for d in d_fed) / len(d_fed) for t in grid]
    cdf_com = [sum(d <= t for d in d_com) / len(d_com) for t in grid]
    _write_csv(
        out / "fairness_cdf.csv",
        ["t", "cdf_fedsv", "cdf_comfedsv"],
        [[t, a, b] for t, a, b in zip(grid, cdf_fed, cdf_com)],
    )
    plots.save_cdf_figure(
        grid, {"fedsv": cdf_fed, "comfedsv": cdf_com}, out / "fairness_cdf.png"
    )
    _write_json(out / "config.json", _echo(config, {}))
    summary = {
        "grid": grid,
        "cdf_fedsv": cdf_fed,
        "cdf_comfedsv": cdf_com,
        "d_fedsv": d_fed,
        "d_comfedsv": d_com,
        "median_fedsv": float(np.median(d_fed)),
        "median_comfedsv": float(np.median(d_com)),
    }
    _write_json(out / "fairness_summary.json", summary)
    return summary


def _quality_ranking_scores(fractions: list[float]) -> list[float]:
    """Quality score per client: the negated noise fraction (cleaner data
    deserves higher value)."""
    return [-f for f in fractions]


def run_noise_presets(config: ExperimentConfig, output_dir: str | Path | None = None) -> dict:
    """Data-quality detection studies.

    ``noisy_data``: per seed, add increasing feature noise across clients and
    compare the value rankings of the three valuations against the planted
    quality order (rank correlation). ``noisy_label``: flip labels for a
    subset of clients and report the overlap between the lowest-valued
    clients and the planted noisy set across participation rates.
    """
    out = Path(output_dir if output_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if config.experiment == "noisy_data":
        result = _run_noisy_data(config, out)
    elif config.experiment == "noisy_label":
        result = _run_noisy_label(config, out)
    else:
        raise ConfigError(f"not a noise preset: {config.experiment}")
    _write_json(out / "config.json", _echo(config, {}))
    return result


def _run_noisy_data(config: ExperimentConfig, out: Path) -> dict:
    n = config.num_clients
    fractions = config.noise_fractions or [0.05 * i for i in range(n)]
    if len(fractions) != n:
        raise ConfigError("need one noise fraction per client")
    if any(b <= a for a, b in zip(fractions, fractions[1:])):
        raise ConfigError(
            "noisy_data preset needs strictly increasing noise fractions; "
            "the planted quality ranking is undefined otherwise"
        )
    quality = _quality_ranking_scores(fractions)

    rows = []
    for trial in range(config.trials):
        trial_seed = config.seed + trial
        datasets, test_set = config.build_data(trial_seed)
        datasets = inject_feature_noise(datasets, fractions, config.noise_sigma, seed=trial_seed + 3)
        objective = config.build_objective(datasets[0].num_features)
        trace = run_fedavg(config.fed_config(trial_seed, oracle=True), datasets, objective, test_set)
        evaluator = UtilityEvaluator(trace, objective, test_set)

        full = full_matrix(evaluator)
        truth = ground_truth(full)
        observed = observe_matrix(evaluator, mode="all_subsets")
        per_round = fedsv(observed, trace.selections)

        if n <= 15 and len(observed.columns) == 1 << n:
            rank = _resolve_rank(config, observed, None, None, trial_seed + 2)
            factors = solve(observed, config.completion_config(rank=rank, seed=trial_seed + 2))
            completed = comfedsv_exact(factors, n)
        else:
            m_count = config.monte_carlo_samples or default_sample_count(n)
            sample = sample_permutations(n, m_count, seed=trial_seed + 1)
            matrix = observe_matrix(evaluator, mode="prefixes", prefixes=sample.unique_keys())
            rank = _resolve_rank(config, matrix, None, None, trial_seed + 2)
            factors = solve(matrix, config.completion_config(rank=rank, seed=trial_seed + 2))
            completed = comfedsv_mc(factors, sample)

        ordered = list(range(n))
        rows.append(
            [
                trial,
                spearman([truth.values[c] for c in ordered], quality),
                spearman([per_round.values[c] for c in ordered], quality),
                spearman([completed.values[c] for c in ordered], quality),
            ]
        )
    _write_csv(
        out / "noisy_data.csv",
        ["trial", "spearman_ground_truth", "spearman_fedsv", "spearman_comfedsv"],
        rows,
    )
    means = {
        "ground_truth": float(np.mean([r[1] for r in rows])),
        "fedsv": float(np.mean([r[2] for r in rows])),
        "comfedsv": float(np.mean([r[3] for r in rows])),
    }
    plots.save_metric_bars(means, out / "noisy_data.png", ylabel="rank correlation")
    return {"rows": rows, "means": means}


def _run_noisy_label(config: ExperimentConfig, out: Path) -> dict:
    n = config.num_clients
    noisy_count = int(config.label_noise.get("noisy_clients", max(1, n // 10)))
    flip = float(config.label_noise.get("flip_fraction", 0.3))
    if not 1 <= noisy_count < n:
        raise ConfigError("noisy client count must be in [1, num_clients)")
    percents = config.participation_percents
    if not percents or any(not 1 <= p <= 100 for p in percents):
        raise ConfigError("participation_percents must be percentages in [1, 100]")

    rng = np.random.default_rng(config.seed + 17)
    noisy = set(int(c) for c in rng.choice(n, size=noisy_count, replace=False))

    datasets, test_set = config.build_data(config.seed)
    datasets = inject_label_noise(datasets, noisy, flip, seed=config.seed + 3)
    objective = config.build_objective(datasets[0].num_features)

    rows = []
    for pct in percents:
        k = max(1, round(pct / 100 * n))
        fed = FedConfig(
            num_clients=n,
            rounds=config.rounds,
            clients_per_round=k,
            schedule=config.schedule(),
            seed=config.seed + pct,
            oracle_mode=False,
            first_round_full=True,
        )
        trace = run_fedavg(fed, datasets, objective, test_set)
        evaluator = UtilityEvaluator(trace, objective, test_set)

        per_round = fedsv_mc(evaluator, seed=config.seed + pct + 1)
        m_count = config.monte_carlo_samples or default_sample_count(n)
        sample = sample_permutations(n, m_count, seed=config.seed + pct + 2)
        matrix = observe_matrix(evaluator, mode="prefixes", prefixes=sample.unique_keys())
        rank = _resolve_rank(config, matrix, None, None, config.seed + pct + 3)
        factors = solve(matrix, config.completion_config(rank=rank, seed=config.seed + pct + 3))
        completed = comfedsv_mc(factors, sample)

        def bottom(report: ValuationReport) -> set[int]:
            return set(sorted(report.values, key=report.values.__getitem__)[:noisy_count])

        rows.append(
            [pct, jaccard(bottom(per_round), noisy), jaccard(bottom(completed), noisy)]
        )
    _write_csv(
        out / "noisy_label.csv",
        ["participation_percent", "jaccard_fedsv", "jaccard_comfedsv"],
        rows,
    )
    plots.save_participation_curves(
        [r[0] for r in rows],
        {"fedsv": [r[1] for r in rows], "comfedsv": [r[2] for r in rows]},
        out / "noisy_label.png",
        ylabel="overlap with planted noisy set",
    )
    return {"rows": rows, "noisy_clients": sorted(noisy)}


def run_rank_study(config: ExperimentConfig, output_dir: str | Path | None = None) -> dict:
    """Fit the observed entries at a range of ranks and report the relative
    reconstruction error against the oracle's full matrix."""
    out = Path(output_dir if output_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    datasets, test_set = config.build_data(config.seed)
    objective = config.build_objective(datasets[0].num_features)
    trace = run_fedavg(config.fed_config(config.seed, oracle=True), datasets, objective, test_set)
    evaluator = UtilityEvaluator(trace, objective, test_set)
    full = full_matrix(evaluator)
    observed = observe_matrix(evaluator, mode="all_subsets")

    dense = full.to_dense()
    denom = float(np.linalg.norm(dense))
    ranks = config.candidate_ranks or list(range(1, min(10, min(dense.shape)) + 1))
    rows = []
    for rank in ranks:
        factors = solve(observed, config.completion_config(rank=rank, seed=config.seed + 2))
        order = [factors.column_index[key] for key in full.columns]
        recon = factors.W @ factors.H[order].T
        rel = float(np.linalg.norm(dense - recon)) / denom if denom > 0 else float("nan")
        rows.append([rank, rel])
    picked = choose_rank(observed, ranks, config.completion_config(rank=1, seed=config.seed + 2))
    _write_csv(out / "rank_study.csv", ["rank", "relative_difference"], rows)
    plots.save_rank_curve([r[0] for r in rows], [r[1] for r in rows], out / "rank_study.png")
    _write_json(out / "config.json", _echo(config, {"rank": picked}))
    return {"rows": rows, "chosen_rank": picked}


def _algorithm_scan(evaluator: UtilityEvaluator, sample: PermutationSample) -> UtilityMatrix:
    """Literal permutation-scan observation loop (used for call counting):
    every recording event calls the evaluator, including repeats."""
    trace = evaluator.trace
    matrix = UtilityMatrix(
        rounds=trace.rounds,
        num_clients=trace.num_clients,
        columns=sample.unique_keys(),
        entries={},
    )
    for t, selected in enumerate(trace.selections):
        sel = set(selected)
        for m in range(sample.size):
            for client, before, after in sample.steps(m):
                if not before.issubset(sel):
                    break  # prefixes are nested, nothing later fits either
                if before.size:
                    matrix.entries[(t, matrix.column_index[before])] = evaluator.value(t, before)
                if client in sel:
                    matrix.entries[(t, matrix.column_index[after])] = evaluator.value(t, after)
    return matrix


def run_timing(config: ExperimentConfig, output_dir: str | Path | None = None) -> dict:
    """Utility-call counts and wall-clock for both valuations over a client
    grid at a fixed participation rate.

    The per-round estimator is charged its Monte-Carlo walks on a trace
    without the forced full first round (it does not need one); the
    completed value is charged its permutation-scan observations, including
    the full first round its completion requires. Counts are uncached: each
    recording or walk step calls the evaluator.
    """
    out = Path(output_dir if output_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if sorted(config.client_grid) != list(config.client_grid):
        raise ConfigError("client_grid must be ascending")
    rows = []
    for n in config.client_grid:
        k = max(1, round(config.participation_rate * n))
        data_cfg = dict(config.data)
        datasets = generate_synthetic(
            alpha=float(data_cfg.get("alpha", 0.0)),
            beta=float(data_cfg.get("beta", 0.0)),
            num_clients=n,
            samples_per_client=int(data_cfg.get("samples_per_client", 40)),
            n_features=int(data_cfg.get("n_features", 10)),
            n_classes=int(data_cfg.get("n_classes", 3)),
            seed=config.seed,
        )
        datasets, test_set = split_test_pool(datasets, max(1, int(data_cfg.get("samples_per_client", 40)) // 5))
        objective = config.build_objective(datasets[0].num_features)

        def fed(full_first: bool) -> FedConfig:
            return FedConfig(
                num_clients=n,
                rounds=config.rounds,
                clients_per_round=k,
                schedule=config.schedule(),
                seed=config.seed + n,
                oracle_mode=False,
                first_round_full=full_first,
            )

        t0 = time.perf_counter()
        trace_per_round = run_fedavg(fed(False), datasets, objective, test_set)
        eval_per_round = UtilityEvaluator(trace_per_round, objective, test_set, memoize=False)
        fedsv_mc(eval_per_round, seed=config.seed + n + 1)
        sec_fed = time.perf_counter() - t0

        t0 = time.perf_counter()
        trace_completed = run_fedavg(fed(True), datasets, objective, test_set)
        eval_completed = UtilityEvaluator(trace_completed, objective, test_set, memoize=False)
        m_count = config.monte_carlo_samples or default_sample_count(n)
        sample = sample_permutations(n, m_count, seed=config.seed + n + 2)
        matrix = _algorithm_scan(eval_completed, sample)
        rank = _resolve_rank(config, matrix, None, None, config.seed + n + 3)
        factors = solve(matrix, config.completion_config(rank=rank, seed=config.seed + n + 3))
        comfedsv_mc(factors, sample)
        sec_com = time.perf_counter() - t0

        calls_fed, calls_com = eval_per_round.calls, eval_completed.calls
        rows.append(
            [
                n,
                k,
                calls_fed,
                calls_com,
                calls_fed / calls_com if calls_com else float("nan"),
                sec_fed,
                sec_com,
                sec_fed / sec_com if sec_com else float("nan"),
            ]
        )
    _write_csv(
        out / "timing.csv",
        [
            "num_clients",
            "clients_per_round",
            "calls_fedsv",
            "calls_comfedsv",
            "call_ratio",
            "seconds_fedsv",
            "seconds_comfedsv",
            "time_ratio",
        ],
        rows,
    )
    plots.save_timing_figure(
        [r[0] for r in rows],
        {"fedsv": [r[5] for r in rows], "comfedsv": [r[6] for r in rows]},
        [r[4] for r in rows],
        out / "timing.png",
    )
    _write_json(out / "config.json", _echo(config, {}))
    return {"rows": rows}


def _planted_datasets(config: ExperimentConfig, seed: int) -> tuple[list[ClientDataset], ClientDataset]:
    """Data with the configured fairness constructs planted.

    The duplicate pair is planted inside ``build_data`` (before the test
    split); a null client keeps its holdout share in the test pool but
    trains on all-zero rows, which makes its updates no-ops under an
    unregularized quadratic objective.
    """
    datasets, test_set = config.build_data(seed)
    if config.null_client is not None:
        from dataclasses import replace

        ds = datasets[config.null_client]
        datasets[config.null_client] = replace(
            ds,
            features=np.zeros_like(ds.features),
            labels=np.zeros_like(ds.labels),
        )
    return datasets, test_set


def run_analysis(config: ExperimentConfig, output_dir: str | Path | None = None) -> dict:
    """Oracle diagnostics for one configuration: spectrum and approximate
    rank of the full utility matrix, the trajectory and schedule rank
    bounds, the selection-unfairness table, and fairness gaps for whatever
    constructs the config plants."""
    out = Path(output_dir if output_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    datasets, test_set = _planted_datasets(config, config.seed)
    objective = config.build_objective(datasets[0].num_features)
    trace = run_fedavg(config.fed_config(config.seed, oracle=True), datasets, objective, test_set)
    evaluator = UtilityEvaluator(trace, objective, test_set)
    full = full_matrix(evaluator)
    save_matrix(full, out)
    dense = full.to_dense()
    spectrum = singular_values(dense)
    plots.save_singular_values(spectrum[: min(len(spectrum), 30)], out / "singular_values.png")

    scale = float(np.abs(dense).max())
    grid = [scale * g for g in (0.01, 0.03, 0.1, 0.3, 1.0)] if scale > 0 else []
    curve = [[eps, epsilon_rank_upper(dense, eps)] for eps in grid]
    if curve:
        plots.save_epsilon_rank_curve([c[0] for c in curve], [c[1] for c in curve], out / "epsilon_rank.png")

    params = estimate_smoothness(trace, objective, datasets, test_set)
    bounds = {}
    for eps, _ in curve:
        entry = {"trajectory": trajectory_rank_bound(trace, params, eps)}
        schedule = config.schedule()
        if isinstance(schedule, InverseDecaySchedule) and params.strong_convexity > 0:
            entry["schedule"] = schedule_rank_bound(trace.rounds, params, schedule, eps)
        bounds[f"{eps:.6g}"] = entry

    truth = ground_truth(full)
    save_report(truth, out)
    from .utility import split_even_odd

    even, odd = split_even_odd(full)
    split = (ground_truth(even).values, ground_truth(odd).values)

    epsilon = config.completion.get("fairness_epsilon")
    delta = None
    if epsilon is None:
        observed = observe_matrix(evaluator, mode="all_subsets")
        rank = _resolve_rank(config, observed, full, params, config.seed + 2)
        factors = solve(observed, config.completion_config(rank=rank, seed=config.seed + 2))
        delta = delta_completedness(full, factors)
        epsilon = 4.0 * delta / config.num_clients
    verdict = fairness_check(
        truth.values,
        epsilon=float(epsilon),
        identical_pairs=[tuple(config.duplicate_pair)] if config.duplicate_pair else [],
        null_clients=[config.null_client] if config.null_client is not None else [],
        split_values=split,
    )

    analysis = {
        "singular_values": [float(s) for s in spectrum],
        "epsilon_rank_curve": curve,
        "rank_bounds": bounds,
        "unfairness_table": _unfairness_table(config),
        "fairness_verdict": verdict.to_json(),
        "smoothness": {
            "lipschitz": params.lipschitz,
            "smoothness": params.smoothness,
            "strong_convexity": params.strong_convexity,
            "source": params.source,
        },
        "delta_completedness": delta,
        "metric_values": {
            "duplicate_pair_relative_difference": (
                _safe_relative_difference(truth.values, *config.duplicate_pair)
                if config.duplicate_pair
                else None
            )
        },
    }
    _write_json(out / "analysis.json", analysis)
    _write_json(out / "config.json", _echo(config, {}))
    return analysis


def write_generated_data(config: ExperimentConfig, output_dir: str | Path | None = None) -> Path:
    """Generate the configured client data and write one numeric CSV per
    client (last column is the label) plus the pooled test CSV."""
    out = Path(output_dir if output_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    datasets, test_set = _planted_datasets(config, config.seed)
    for ds in datasets:
        table = np.column_stack([ds.features, ds.labels])
        np.savetxt(out / f"client_{ds.client_id}.csv", table, delimiter=",", fmt="%.17g")
    np.savetxt(
        out / "test.csv",
        np.column_stack([test_set.features, test_set.labels]),
        delimiter=",",
        fmt="%.17g",
    )
    _write_json(out / "config.json", _echo(config, {}))
    return out


def run_experiment(config: ExperimentConfig, output_dir: str | Path | None = None):
    """Dispatch on the configured experiment name."""
    if config.experiment == "pipeline":
        return run_pipeline(config, output_dir)
    if config.experiment == "fairness":
        return run_fairness_preset(config, output_dir)
    if config.experiment in ("noisy_data", "noisy_label"):
        return run_noise_presets(config, output_dir)
    if config.experiment == "rank_study":
        return run_rank_study(config, output_dir)
    if config.experiment == "timing":
        return run_timing(config, output_dir)
    raise ConfigError(f"unknown experiment {config.experiment!r}")
