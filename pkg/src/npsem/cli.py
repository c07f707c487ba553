"""Command line entry point.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, NpsemError
from .estimators import EstimationAborted

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("npsem")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON or YAML experiment document")
    common.add_argument("--seed", type=int, default=None, help="overrides the config's base seed")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--snapshot-every", type=int, default=None, metavar="N",
                        help="write the catalog of every N-th iteration")
    common.add_argument("--threads", type=int, default=1, help="worker processes for replications")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="npsem", description="Nonparametric stochastic EM for state-space models")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write learning/validation truth and observations")
    sub.add_parser("fit", parents=[common], help="run one algorithm and write its trace")
    sub.add_parser("compare", parents=[common], help="run the algorithm comparison")
    sub.add_parser("impute", parents=[common], help="gap imputation of a wave series")
    sub.add_parser("validate-config", parents=[common], help="check a config and print it normalized")
    return p


def _load(args):
    from .harness import load_config

    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = cfg.with_seed(args.seed)
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    if args.snapshot_every is not None and args.snapshot_every < 1:
        raise ConfigError("--snapshot-every must be >= 1")
    return cfg


def cmd_simulate(cfg, args) -> int:
    from .harness import simulate_pair
    from .core import RandomStream
    from .io import write_observations, write_states

    if cfg.model == "csv-data":
        raise ConfigError("simulate needs a generative model (sinus, l63 or affine)")
    out = Path(args.out)
    for r in range(cfg.replications):
        pair = simulate_pair(cfg, RandomStream(int(cfg.seeds)).child(r))
        for name, (_, x, y) in zip(("learn", "validation"), pair):
            write_states(out / f"rep{r}" / f"x_{name}.csv", x)
            write_observations(out / f"rep{r}" / f"y_{name}.csv", y)
    return EXIT_OK


def cmd_fit(cfg, args) -> int:
    from .harness import run_fit
    from .io import write_ensemble, write_trace

    out = Path(args.out)
    tag, trace = run_fit(cfg, out if args.snapshot_every else None, args.snapshot_every)
    write_trace(out / f"trace_{tag}.csv", trace)
    if trace.final.ensemble is not None:
        write_ensemble(out / f"ensemble_{tag}.csv", trace.final.ensemble)
    final = trace.final
    print(f"{tag}: sigma2_Q={final.theta.sigma2_Q:.6g} sigma2_R={final.theta.sigma2_R:.6g} k={final.k}")
    return EXIT_OK


def cmd_compare(cfg, args) -> int:
    from .harness import run_comparison, write_report

    out = Path(args.out)
    report = run_comparison(cfg, args.threads, out if args.snapshot_every else None, args.snapshot_every)
    write_report(report, out)
    for tag in cfg.algorithms:
        print(f"{tag}: median rmse {report.median_rmse(tag):.6g}")
    if report.failures:
        for e in report.failures:
            print(f"failure: replication {e.replication}, {e.algorithm}, iteration {e.iteration}: {e.error}",
                  file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_impute(cfg, args) -> int:
    from .wave import run_imputation, write_imputation_runs

    runs = run_imputation(cfg)
    write_imputation_runs(runs, args.out)
    for run in runs:
        for res in (run.npsem, run.linear):
            print(f"rep {run.replication} {res.method}: rmse {res.rmse} rmse_gaps {res.rmse_gaps}")
    return EXIT_OK


def cmd_validate(cfg, args) -> int:
    print(json.dumps(cfg.to_dict(), indent=2, default=lambda v: np.asarray(v).tolist()))
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "compare": cmd_compare,
    "impute": cmd_impute,
    "validate-config": cmd_validate,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = _load(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EstimationAborted as exc:
        print(f"numeric failure at iteration {exc.iteration}: {type(exc.cause).__name__}: {exc.cause}",
              file=sys.stderr)
        return EXIT_NUMERIC
    except (NpsemError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
