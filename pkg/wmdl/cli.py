"""Command line interface: ``wmdl {simulate,fit,predict,benchmark,robustness}``.

Exit codes: 0 success, 1 runtime failure, 2 invalid input or configuration,
3 failed acceptance check.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from dataclasses import replace
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from wmdl import persistence
from wmdl.common import (
    ConfigurationError,
    ParseError,
    SchemaError,
    ValidationError,
    WmdlError,
)
from wmdl.config import (
    dgp_from_dict,
    dgp_to_dict,
    estimator_to_dict,
    load_benchmark,
    load_fit_config,
    read_json,
)
from wmdl.data import load_covariates, load_csv, simulate, write_csv
from wmdl.estimators import CateEstimate, fit
from wmdl.evaluation import (
    ExperimentReport,
    check_report,
    emit_report,
    robustness_suite,
    run_replications,
)
from wmdl.nuisance import nuisance_summary
from wmdl.utils import default_threads
from wmdl.weighting import weight_diagnostics

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INVALID = 2
EXIT_CHECK_FAILED = 3

#: Errors caused by the user's input rather than by a run
INPUT_ERRORS = (SchemaError, ConfigurationError, ValidationError, ParseError)


def cmd_simulate(args: argparse.Namespace) -> int:
    config = dgp_from_dict(read_json(args.config), where=str(args.config))
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    data = simulate(config)
    out = Path(args.out)
    write_csv(data, out)
    assert data.truth is not None
    sidecar = out.with_name(out.name + ".truth.json")
    truth = {
        "dgp": dgp_to_dict(config),
        "effect_mode": config.effect_mode,
        "seed": config.seed,
        "beta": data.truth.beta.tolist(),
        "mu": {str(s): m.tolist() for s, m in sorted(data.truth.mu.items())},
        "transfer_target": 0 if config.n_target_covariates else None,
    }
    sidecar.write_text(json.dumps(truth, indent=2))
    logger.info("Wrote ground truth to %s", sidecar)
    return EXIT_OK


def _write_fit_diagnostics(estimate: CateEstimate, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    diagnostics = estimate.diagnostics
    if not diagnostics:
        logger.warning("%s has no nuisance or weight diagnostics", estimate.method)
        return
    path = directory / "nuisances.json"
    path.write_text(json.dumps(nuisance_summary(diagnostics["nuisances"]), indent=2))
    logger.info("Wrote %s", path)
    path = directory / "weights.csv"
    weight_diagnostics(diagnostics["weights"]).to_csv(path, index=False)
    logger.info("Wrote %s", path)


def cmd_fit(args: argparse.Namespace) -> int:
    spec, schema = load_fit_config(args.config)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    if spec.weight_spec.kind == "transfer" and schema.transfer_target is None:
        schema = replace(schema, transfer_target=0)
    data = load_csv(args.data, schema)
    estimate = fit(data, spec, threads=args.threads)
    persistence.save(
        estimate,
        args.out,
        meta={"estimator": estimator_to_dict(spec), "data": str(args.data)},
    )
    if args.diagnostics:
        _write_fit_diagnostics(estimate, Path(args.diagnostics))
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    estimate = persistence.load(args.model)
    if not isinstance(estimate, CateEstimate):
        raise SchemaError(f"{args.model} does not hold a treatment effect estimate")
    x, sources = load_covariates(args.data)
    if args.source is not None:
        sources = np.full(len(x), args.source, dtype=np.int64)
    if estimate.mode != "heterogeneous":
        sources = None
    elif sources is None:
        raise ValidationError(
            f"{args.model} is heterogeneous: give --source or a source column"
        )
    delta = estimate.predict_delta(x, sources)
    pd.DataFrame({"delta": delta, "tau": 2.0 * delta}).to_csv(args.out, index=False)
    logger.info("Wrote %d predictions to %s", len(delta), args.out)
    return EXIT_OK


def _override(experiments: list[Any], args: argparse.Namespace) -> list[Any]:
    if args.replications is not None:
        experiments = [replace(e, replications=args.replications) for e in experiments]
    if args.seed is not None:
        experiments = [replace(e, master_seed=args.seed) for e in experiments]
    return experiments


def _finish(
    reports: list[ExperimentReport],
    checks: list[dict[str, Any]],
    args: argparse.Namespace,
) -> int:
    out = Path(args.out)
    emit_report(reports, "csv", out)
    emit_report(reports, "json", out.with_suffix(".json"))
    if not args.check:
        return EXIT_OK
    if not checks:
        logger.warning("--check given but the config defines no checks")
    results = check_report(reports, checks)
    failed = [r for r in results if not r.passed]
    logger.info("%d of %d checks passed", len(results) - len(failed), len(results))
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def cmd_benchmark(args: argparse.Namespace) -> int:
    experiments, checks = load_benchmark(args.config)
    experiments = _override(experiments, args)
    reports = [run_replications(e, threads=args.threads) for e in experiments]
    return _finish(reports, checks, args)


def cmd_robustness(args: argparse.Namespace) -> int:
    experiments, checks = load_benchmark(args.config)
    experiments = _override(experiments, args)
    reports = [robustness_suite(e, threads=args.threads) for e in experiments]
    return _finish(reports, checks, args)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wmdl",
        description="Treatment effect estimation fusing multiple data sources",
    )
    parser.add_argument(
        "-v", "--verbose", action="count", default=0, help="more logging (repeatable)"
    )
    parser.add_argument("-q", "--quiet", action="store_true", help="only log errors")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("simulate", help="draw a dataset from the synthetic DGP")
    p.add_argument("--config", required=True, help="DGP config JSON")
    p.add_argument("--out", required=True, help="CSV file to write")
    p.add_argument("--seed", type=int, help="override the DGP seed")
    p.set_defaults(func=cmd_simulate)

    p = commands.add_parser("fit", help="fit an estimator on a CSV dataset")
    p.add_argument("--data", required=True, help="multi-source CSV file")
    p.add_argument("--config", required=True, help="estimator and schema JSON")
    p.add_argument("--out", required=True, help="model JSON file to write")
    p.add_argument("--seed", type=int, help="override the estimator seed")
    p.add_argument("--threads", type=int, default=default_threads())
    p.add_argument(
        "--diagnostics", help="directory for nuisance and weight diagnostics"
    )
    p.set_defaults(func=cmd_fit)

    p = commands.add_parser("predict", help="evaluate a fitted model at new points")
    p.add_argument("--model", required=True, help="model JSON written by fit")
    p.add_argument("--data", required=True, help="CSV with x1, x2, ... columns")
    p.add_argument("--out", required=True, help="CSV of delta and tau to write")
    p.add_argument(
        "--source", type=int, help="source of every point (heterogeneous models)"
    )
    p.set_defaults(func=cmd_predict)

    for name, func, text in (
        ("benchmark", cmd_benchmark, "run replicated experiments"),
        ("robustness", cmd_robustness, "run the nuisance corruption suite"),
    ):
        p = commands.add_parser(name, help=text)
        p.add_argument(
            "--config", required=True, help="benchmark JSON, or a bundled config name"
        )
        p.add_argument("--out", required=True, help="report path stem")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--replications", type=int, help="override the replications")
        p.add_argument("--threads", type=int, default=default_threads())
        p.add_argument(
            "--check", action="store_true", help="evaluate the config's checks"
        )
        p.set_defaults(func=func)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.quiet:
        level = logging.ERROR
    else:
        level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(
        level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except INPUT_ERRORS as e:
        logger.error("%s", e)
        return EXIT_INVALID
    except (WmdlError, OSError) as e:
        logger.error("%s", e)
        return EXIT_FAILURE


if __name__ == "__main__":  # pragma: nocover
    sys.exit(main())
