"""Command line front end.

    mvdssm run --variant semi --rounds 100 --builds 3 --out runs/semi
    mvdssm run --config runs/semi/config.txt          # exact rerun
    mvdssm fetch-data --out data/ml-100k

Settings resolve as flags > MVDSSM_<KEY> environment variables > --config
file > defaults.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import FIELDS, env_overrides, layer, read_config_file, validate_config
from .experiment import run_experiment, write_artifacts
from .federation import ConfigError
from .movielens import DataError

logger = logging.getLogger("mvdssm")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvdssm", description="Federated multi-view DSSM experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train and evaluate a variant over several builds")
    run.add_argument("--config", help="key = value file; flags and environment override it")
    run.add_argument("--data-dir")
    run.add_argument("--variant", help="fl-mv-dssm | semi | fl-dssm | centralized")
    run.add_argument("--view", help="user view for fl-dssm and centralized (1 or 2)")
    run.add_argument("--scenario", help="random | cs-users | cs-items | cs-users-items")
    run.add_argument("--rounds")
    run.add_argument("--builds")
    run.add_argument("--seed")
    run.add_argument("--gamma", help="softmax temperature")
    run.add_argument("--neg", help="negatives per positive")
    run.add_argument("--dp", help="on/off: clip and noise item gradients across views")
    run.add_argument("--dp-sigma")
    run.add_argument("--dp-clip")
    run.add_argument("--dp-batch", help="views sampled per round (default: all)")
    run.add_argument("--predict-sigma", help="noise on prediction probabilities (default: none)")
    run.add_argument("--secure-agg", help="on/off: masked summation across clients")
    run.add_argument("--aggregate-user", help="on/off; off keeps user towers on the client")
    run.add_argument("--clients-per-round")
    run.add_argument("--eval-every")
    run.add_argument("--out")

    fetch = sub.add_parser("fetch-data", help="download MovieLens-100K")
    fetch.add_argument("--out", default="data/ml-100k")
    return parser


def _flag_overrides(args: argparse.Namespace) -> dict[str, str]:
    out = {}
    for key in FIELDS:
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    return out


def cmd_run(args: argparse.Namespace) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    spec = validate_config(layer(file_values, env_overrides(), _flag_overrides(args)))
    if not Path(spec.data_dir).is_dir():
        raise DataError(f"data directory not found: {spec.data_dir} (try `mvdssm fetch-data`)")
    result = run_experiment(spec)
    out = write_artifacts(result, spec.out)
    s = result.final_summary()
    for m, mean in s.mean.items():
        std = "" if s.std[m] is None else f" +- {s.std[m]:.4f}"
        print(f"{spec.label} {spec.scenario.value} {m}: {mean:.4f}{std}")
    print(f"artifacts in {out}")
    return 0


def cmd_fetch(args: argparse.Namespace) -> int:
    from .fetch import fetch_movielens

    try:
        path = fetch_movielens(args.out)
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"MovieLens-100K in {path}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "run":
            return cmd_run(args)
        return cmd_fetch(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
