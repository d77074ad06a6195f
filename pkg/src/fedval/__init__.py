"""Federated training simulator with Shapley-style data valuation.

The package simulates federated averaging over client datasets, records
per-round coalition utilities into a partially observed matrix, completes
that matrix by regularized low-rank factorization, and values every client
with exact, per-round, and Monte-Carlo Shapley-style measures, together
with fairness and data-quality diagnostics.
"""

from .analysis import (
    FairnessVerdict,
    SmoothnessParams,
    epsilon_rank_upper,
    estimate_smoothness,
    fairness_check,
    jaccard,
    relative_difference,
    schedule_rank_bound,
    spearman,
    trajectory_rank_bound,
    unfairness_probability,
)
from .completion import CompletionConfig, FactorPair, choose_rank, delta_completedness, solve
from .errors import (
    ConfigError,
    DataFormatError,
    FedValError,
    MissingEntryError,
    NumericError,
)
from .experiments import ExperimentConfig, run_experiment, run_pipeline
from .fedsim import (
    ClientDataset,
    ConstantSchedule,
    FedConfig,
    InverseDecaySchedule,
    LogisticObjective,
    RidgeObjective,
    TrainingTrace,
    generate_synthetic,
    inject_feature_noise,
    inject_label_noise,
    load_csv,
    local_update,
    run_fedavg,
)
from .utility import (
    CoalitionKey,
    UtilityEvaluator,
    UtilityMatrix,
    full_matrix,
    observe_matrix,
    round_utility,
)
from .valuation import (
    PermutationSample,
    ValuationReport,
    classic_shapley,
    comfedsv_exact,
    comfedsv_mc,
    fedsv,
    ground_truth,
    sample_permutations,
)

__version__ = "0.1.0"
