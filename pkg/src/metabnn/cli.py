"""Command-line entry point.

Subcommands: fetch-data, toy, permuted, stream, flip-importance, report.
Training subcommands accept --config <json> with ExperimentConfig keys;
explicit flags override file values. Exit codes: 0 success, 1 config
error, 2 data error, 3 numeric failure.
"""

import argparse
import json
import sys

from .data import DigestMismatchError, FetchError, IdxFormatError, fetch_dataset
from .experiments import (ConfigError, ExperimentConfig, emit_report,
                          run_flip_importance, run_permuted, run_stream,
                          run_toy)
from .nn import NumericError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def _add_experiment_flags(parser):
    parser.add_argument("--config", help="JSON file with ExperimentConfig keys")
    parser.add_argument("--method", choices=("meta", "ewc", "plain"))
    parser.add_argument("--m", type=float, help="consolidation strength")
    parser.add_argument("--lambda", dest="lam", type=float,
                        help="EWC penalty scale")
    parser.add_argument("--eta", type=float, help="hidden-weight learning rate")
    parser.add_argument("--eta-bn", type=float,
                        help="normalization-parameter learning rate")
    parser.add_argument("--adam-eps", type=float,
                        help="Adam epsilon floor for hidden weights")
    parser.add_argument("--update-rule", choices=("adam", "sgd"),
                        help="source of the hidden-weight update direction")
    parser.add_argument("--hidden-size", type=int)
    parser.add_argument("--n-tasks", type=int)
    parser.add_argument("--epochs-per-task", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--dataset", choices=("mnist", "fmnist"))
    parser.add_argument("--k-splits", type=int)
    parser.add_argument("--out-dir")
    parser.add_argument("--fisher-samples", type=int)
    parser.add_argument("--n-weights", type=int)
    parser.add_argument("--eval-batch", type=int)
    parser.add_argument("--eval-bn", choices=("batch", "running"),
                        help="evaluation normalization statistics")
    parser.add_argument("--baseline-accuracy", type=float)
    parser.add_argument("--model-path")
    parser.add_argument("--cache-dir", help="dataset cache directory")


def _experiment_config(args) -> ExperimentConfig:
    values = {}
    if args.config:
        with open(args.config) as fh:
            file_values = json.load(fh)
        if not isinstance(file_values, dict):
            raise ConfigError(f"{args.config} must hold a JSON object")
        values.update(file_values)
    for field in ExperimentConfig.__dataclass_fields__:
        flag_value = getattr(args, field, None)
        if flag_value is not None:
            values[field] = flag_value
    return ExperimentConfig.from_dict(values)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="metabnn",
        description="Continual-learning experiments on binarized networks "
                    "with hidden-weight consolidation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fetch-data", help="download and verify a dataset")
    p.add_argument("--dataset", choices=("mnist", "fmnist"), required=True)
    p.add_argument("--cache-dir")
    p.add_argument("--mirror", action="append",
                   help="extra mirror URL prefix, tried before the shipped list "
                        "(repeatable)")

    p = sub.add_parser("toy", help="corner-dynamics divergence vs importance")
    p.add_argument("--config", help="JSON file with the flags below as keys")
    p.add_argument("--d", type=int)
    p.add_argument("--n-problems", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--bins", type=int)
    p.add_argument("--out-dir")

    for name, description in (
            ("permuted", "sequential pixel-permuted tasks"),
            ("stream", "class-balanced subset stream"),
            ("flip-importance", "single-weight flip loss study")):
        p = sub.add_parser(name, help=description)
        _add_experiment_flags(p)

    p = sub.add_parser("report", help="aggregate metrics CSVs to plot-ready JSON")
    p.add_argument("--out", required=True)
    p.add_argument("csv", nargs="+")

    return parser


def _toy_kwargs(args):
    values = {}
    if args.config:
        with open(args.config) as fh:
            values.update(json.load(fh))
    for key in ("d", "n_problems", "eta", "steps", "seed", "bins", "out_dir"):
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            values[key] = flag_value
    return values


def _dispatch(args) -> int:
    log = lambda msg: print(msg, flush=True)
    if args.command == "fetch-data":
        mirrors = None
        if args.mirror:
            from .data import dataset_mirrors
            mirrors = list(args.mirror) + dataset_mirrors(args.dataset)
        paths = fetch_dataset(args.dataset, cache_dir=args.cache_dir,
                              mirrors=mirrors)
        for path in paths:
            print(path)
        return EXIT_OK
    if args.command == "toy":
        summary = run_toy(**_toy_kwargs(args), log=log)
        print(json.dumps({k: summary[k] for k in
                          ("run_id", "spearman_median", "metrics_csv",
                           "summary_json")}, indent=2))
        return EXIT_OK
    if args.command == "report":
        emit_report(args.csv, args.out)
        print(args.out)
        return EXIT_OK

    cfg = _experiment_config(args)
    runner = {"permuted": run_permuted, "stream": run_stream,
              "flip-importance": run_flip_importance}[args.command]
    summary = runner(cfg, cache_dir=args.cache_dir, log=log)
    print(json.dumps({k: v for k, v in summary.items()
                      if k in ("run_id", "final_average_accuracy",
                               "final_accuracy", "baseline_accuracy",
                               "spearman_raw", "spearman_binned",
                               "metrics_csv", "summary_json")}, indent=2))
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FetchError, DigestMismatchError, IdxFormatError,
            FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, OverflowError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
