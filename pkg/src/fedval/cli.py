"""Command-line entry points.

Subcommands: gen-data, train, fedsv, comfedsv, analyze, preset <name>.
Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigError, DataFormatError, FedValError, NumericError
from .experiments import (
    ExperimentConfig,
    PRESETS,
    run_analysis,
    run_experiment,
    run_pipeline,
    write_generated_data,
)

__all__ = ["main", "build_parser"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedval",
        description="Federated training simulator with Shapley-style data valuation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="JSON experiment config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", type=Path, help="output directory")

    common(sub.add_parser("gen-data", help="generate client CSVs and the test pool"))
    common(sub.add_parser("train", help="run federated training and persist the trace"))
    common(sub.add_parser("fedsv", help="exact per-round valuation from observed subsets"))
    common(sub.add_parser("comfedsv", help="full completed-value pipeline"))
    common(sub.add_parser("analyze", help="oracle diagnostics: spectrum, rank bounds, fairness"))
    preset = sub.add_parser("preset", help="run a named experiment preset")
    preset.add_argument("name", choices=PRESETS)
    common(preset)
    return parser


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.output_dir = str(args.out)
    return config


def _cmd_train(config: ExperimentConfig) -> None:
    from .experiments import _planted_datasets
    from .fedsim import run_fedavg, save_trace

    datasets, test_set = _planted_datasets(config, config.seed)
    objective = config.build_objective(datasets[0].num_features)
    trace = run_fedavg(config.fed_config(config.seed), datasets, objective, test_set)
    out = Path(config.output_dir)
    save_trace(trace, out / "trace", config_echo=config.to_dict())
    print(f"trace written to {out / 'trace'}")


def _cmd_fedsv(config: ExperimentConfig) -> None:
    from .experiments import _planted_datasets
    from .fedsim import run_fedavg
    from .utility import UtilityEvaluator, observe_matrix, save_matrix
    from .valuation import fedsv, save_report

    datasets, test_set = _planted_datasets(config, config.seed)
    objective = config.build_objective(datasets[0].num_features)
    trace = run_fedavg(config.fed_config(config.seed), datasets, objective, test_set)
    evaluator = UtilityEvaluator(trace, objective, test_set)
    matrix = observe_matrix(evaluator, mode="all_subsets")
    report = fedsv(matrix, trace.selections)
    out = Path(config.output_dir)
    save_matrix(matrix, out)
    path = save_report(report, out)
    print(f"valuation written to {path}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _load_config(args)
        if args.command == "gen-data":
            out = write_generated_data(config)
            print(f"data written to {out}")
        elif args.command == "train":
            _cmd_train(config)
        elif args.command == "fedsv":
            _cmd_fedsv(config)
        elif args.command == "comfedsv":
            report = run_pipeline(config)
            print(json.dumps(report.to_json()["values"], indent=2))
        elif args.command == "analyze":
            run_analysis(config)
            print(f"analysis written to {Path(config.output_dir) / 'analysis.json'}")
        elif args.command == "preset":
            config.experiment = args.name
            run_experiment(config)
            print(f"preset '{args.name}' artifacts written to {config.output_dir}")
    except (ConfigError, DataFormatError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except FedValError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
