"""Monte-Carlo evaluation of CATE estimators on the synthetic DGP.

A replication draws a fresh world (source means, treatment coefficients, training data)
and an independent test sample from the target population, fits every estimator on the
same training data and scores it by the mean squared error of ``delta_hat`` on the
test sample.
"""
from __future__ import annotations

import json
import logging
import math
import time
from collections.abc import Callable, Hashable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Literal

import numpy as np
import pandas as pd

from wmdl.common import (
    ConfigurationError,
    ConsistencyError,
    ExperimentError,
    FitError,
    FloatArray,
    ResultStore,
    SchemaError,
    ValidationError,
)
from wmdl.data import DgpConfig, GroundTruth, MultiSourceData, simulate
from wmdl.estimators import (
    META_METHODS,
    CateEstimate,
    EstimatorSpec,
    fit,
    fit_nuisances,
    nuisance_key,
)
from wmdl.nuisance import NuisanceSet, oracle_nuisances
from wmdl.utils import derive_seed, make_rng, thread_map

logger = logging.getLogger(__name__)

NuisanceMode = Literal[
    "estimated", "both-correct", "m-corrupted", "p-corrupted", "both-corrupted"
]
ROBUSTNESS_ARMS: tuple[NuisanceMode, ...] = (
    "both-correct",
    "m-corrupted",
    "p-corrupted",
    "both-corrupted",
)

#: Largest fraction of failed replications tolerated per estimator
MAX_MISSING = 0.2

#: Errors that drop one replication of one estimator instead of the whole run
REPLICATION_ERRORS = (
    FitError,
    ConsistencyError,
    ValidationError,
    np.linalg.LinAlgError,
)

# stream keys below a replication seed
_TEST_STREAM = 1
_FIT_STREAM = 2


def mse(
    estimate: CateEstimate,
    test_x: FloatArray,
    truth: Callable[[FloatArray], FloatArray] | FloatArray,
) -> float:
    """Mean squared error of ``delta_hat`` against the true effect function on *test_x*.

    *truth* is the true ``delta`` of the target population, either as a function or as
    its values at *test_x*. A heterogeneous estimate is evaluated at its target source.
    """
    s = estimate.target_source if estimate.mode == "heterogeneous" else None
    pred = estimate.predict_delta(test_x, s)
    true = truth(test_x) if callable(truth) else np.asarray(truth, dtype=float)
    if len(true) != len(pred):
        raise ValueError(f"{len(pred)} predictions but {len(true)} true values")
    return float(np.mean((pred - true) ** 2))


@dataclass(frozen=True)
class ExperimentConfig:
    """A grid cell of the benchmark.

    Parameters
    ----------
    label: str
    dgp: DgpConfig
        Template; its seed is replaced by a per-replication seed
    estimators: mapping of name -> EstimatorSpec
    replications: int
    n_test: int
    master_seed: int
    nuisances: str
        ``"estimated"`` cross-fits nuisances; the other modes inject ground-truth
        nuisances into the direct learners, optionally corrupted
    """

    label: str
    dgp: DgpConfig
    estimators: Mapping[str, EstimatorSpec]
    replications: int = 20
    n_test: int = 1000
    master_seed: int = 0
    nuisances: NuisanceMode = "estimated"

    def __post_init__(self) -> None:
        if self.replications < 1:
            raise ConfigurationError("replications must be at least 1")
        if self.n_test < 1:
            raise ConfigurationError("n_test must be at least 1")
        if not self.estimators:
            raise ConfigurationError(f"experiment {self.label!r} has no estimators")
        if self.nuisances not in ("estimated", *ROBUSTNESS_ARMS):
            raise ConfigurationError(f"unknown nuisance mode {self.nuisances!r}")
        if not 0 <= self.master_seed < 2**64:
            raise ConfigurationError("master_seed must be a 64-bit unsigned integer")

    def replication_seed(self, r: int) -> int:
        return derive_seed(self.master_seed, r)


@dataclass(eq=False)
class ExperimentReport:
    """Per-replication MSEs of every estimator; None marks a failed fit.

    ``wall_time`` (seconds per estimator, summed over replications) is informative
    only and never written to report files.
    """

    label: str
    results: dict[str, list[float | None]]
    wall_time: dict[str, float] = field(default_factory=dict)
    config: dict[str, Any] = field(default_factory=dict)

    @property
    def estimators(self) -> list[str]:
        return list(self.results)

    def values(self, name: str) -> FloatArray:
        return np.array([np.nan if v is None else v for v in self.results[name]])

    def mean_mse(self, name: str) -> float:
        v = self.values(name)
        v = v[~np.isnan(v)]
        return float(np.mean(v)) if len(v) else math.nan

    def sd_mse(self, name: str) -> float:
        v = self.values(name)
        v = v[~np.isnan(v)]
        return float(np.std(v, ddof=1)) if len(v) > 1 else math.nan

    def n_missing(self, name: str) -> int:
        return sum(v is None for v in self.results[name])

    def summary(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "experiment": self.label,
                "estimator": name,
                "mean_mse": self.mean_mse(name),
                "sd_mse": self.sd_mse(name),
                "replications": len(self.results[name]),
                "n_missing": self.n_missing(name),
            }
            for name in self.results
        )

    def long(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"experiment": self.label, "estimator": name, "replication": r, "mse": v}
            for name, values in self.results.items()
            for r, v in enumerate(values)
        )

    def __str__(self) -> str:
        return f"<ExperimentReport {self.label!r}: {len(self.results)} estimators>"

    __repr__ = __str__


def _true_delta(truth: GroundTruth) -> Callable[[FloatArray], FloatArray]:
    cfg = truth.config
    if cfg.effect_mode == "heterogeneous":
        return lambda x: truth.delta(x, cfg.target_source)
    return truth.delta


def _fit_one(
    config: ExperimentConfig,
    spec: EstimatorSpec,
    data: MultiSourceData,
    shared: dict[Hashable, NuisanceSet],
) -> CateEstimate:
    """Fit *spec*; estimated nuisances are cross-fitted once per replication and
    reused by every direct learner with the same :func:`nuisance_key`
    """
    if spec.method in META_METHODS:
        return fit(data, spec)
    if config.nuisances == "estimated":
        key = nuisance_key(data, spec)
        if key not in shared:
            shared[key] = fit_nuisances(data, spec)
        nuisances = shared[key]
    else:
        nuisances = oracle_nuisances(
            data,
            corrupt_main_effect=config.nuisances in ("m-corrupted", "both-corrupted"),
            corrupt_propensity=config.nuisances in ("p-corrupted", "both-corrupted"),
            clip_eps=spec.nuisance_learner.clip_eps,
        )
    return fit(data, spec, nuisances=nuisances)


def _replicate(
    config: ExperimentConfig, r: int, store: ResultStore, times: ResultStore
) -> None:
    seed = config.replication_seed(r)
    data = simulate(replace(config.dgp, seed=seed))
    truth = data.truth
    assert truth is not None
    target = config.dgp.target_source
    test_rng = make_rng(seed, _TEST_STREAM)
    test_x, _ = truth.sample_covariates(target, config.n_test, test_rng)
    true = _true_delta(truth)(test_x)
    fit_seed = derive_seed(seed, _FIT_STREAM)
    shared: dict[Hashable, NuisanceSet] = {}
    for name, spec in config.estimators.items():
        start = time.perf_counter()
        try:
            estimate = _fit_one(config, replace(spec, seed=fit_seed), data, shared)
            store[name, r] = mse(estimate, test_x, true)
        except REPLICATION_ERRORS as e:
            logger.warning(
                "%s: replication %d of %s failed: %s", config.label, r, name, e
            )
            store[name, r] = None
        times[name, r] = time.perf_counter() - start
    logger.debug("%s: replication %d done", config.label, r)


def run_replications(
    config: ExperimentConfig, threads: int | None = 1
) -> ExperimentReport:
    """Run every replication of *config*, concurrently on *threads* threads.

    Results depend only on ``master_seed``, never on scheduling or on which other
    estimators are configured.

    Raises
    ------
    ExperimentError
        If more than 20% of the replications of any estimator failed
    """
    logger.info(
        "Experiment %s: %d replications of %s",
        config.label,
        config.replications,
        ", ".join(config.estimators),
    )
    store = ResultStore()
    times = ResultStore()
    thread_map(
        lambda r: _replicate(config, r, store, times),
        list(range(config.replications)),
        threads,
    )
    results = {
        name: store.column(name, config.replications) for name in config.estimators
    }
    wall = {
        name: float(sum(t or 0.0 for t in times.column(name, config.replications)))
        for name in config.estimators
    }
    for name, values in results.items():
        missing = sum(v is None for v in values)
        if missing > MAX_MISSING * len(values):
            raise ExperimentError(
                f"{config.label}: {name} failed in {missing} of {len(values)} "
                "replications"
            )
    from wmdl.config import experiment_to_dict

    report = ExperimentReport(config.label, results, wall, experiment_to_dict(config))
    for name in results:
        logger.info(
            "%s %s: mean MSE %.4g (sd %.3g) in %.1fs",
            config.label,
            name,
            report.mean_mse(name),
            report.sd_mse(name),
            wall[name],
        )
    return report


def robustness_suite(
    base: ExperimentConfig,
    sizes: Sequence[int] = (2000, 8000),
    arms: Sequence[NuisanceMode] = ROBUSTNESS_ARMS,
    threads: int | None = 1,
) -> ExperimentReport:
    """Fit the direct learner of *base* with ground-truth nuisances, each corrupted or
    not, at every sample size.

    The report has one entry per arm and size, named ``"<arm>@<n_total>"``.
    """
    if base.dgp.scenario != "I":
        raise ConfigurationError(
            "the robustness suite needs scenario I (no source covariates)"
        )
    direct = [(n, s) for n, s in base.estimators.items() if s.method in ("wmdl", "mdl")]
    if not direct:
        raise ConfigurationError("the robustness suite needs a wmdl or mdl estimator")
    name, spec = direct[0]
    results, wall = {}, {}
    for n_total in sizes:
        for arm in arms:
            key = f"{arm}@{n_total}"
            cell = replace(
                base,
                label=f"{base.label}/{key}",
                dgp=replace(base.dgp, n_total=n_total),
                estimators={name: spec},
                nuisances=arm,
            )
            report = run_replications(cell, threads)
            results[key] = report.results[name]
            wall[key] = report.wall_time[name]
    from wmdl.config import experiment_to_dict

    return ExperimentReport(base.label, results, wall, experiment_to_dict(base))


def _nullable(v: float | None) -> float | None:
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else v


def emit_report(
    reports: ExperimentReport | Iterable[ExperimentReport],
    fmt: Literal["csv", "json"],
    path: str | Path,
) -> list[Path]:
    """Write reports to disk.

    ``csv`` writes ``<stem>_summary.csv`` (one row per experiment and estimator) and
    ``<stem>_long.csv`` (one row per replication), with empty cells for missing values.
    ``json`` writes one document with every per-replication value; missing values are
    null.

    Returns the paths written.
    """
    if isinstance(reports, ExperimentReport):
        reports = [reports]
    reports = list(reports)
    path = Path(path)
    if fmt == "csv":
        stem = path.with_suffix("") if path.suffix == ".csv" else path
        summary = stem.with_name(stem.name + "_summary.csv")
        long = stem.with_name(stem.name + "_long.csv")
        pd.concat([r.summary() for r in reports], ignore_index=True).to_csv(
            summary, index=False, na_rep=""
        )
        pd.concat([r.long() for r in reports], ignore_index=True).to_csv(
            long, index=False, na_rep=""
        )
        written = [summary, long]
    elif fmt == "json":
        doc = {
            "experiments": [
                {
                    "label": r.label,
                    "config": r.config,
                    "estimators": {
                        name: {
                            "mse": values,
                            "mean_mse": _nullable(r.mean_mse(name)),
                            "sd_mse": _nullable(r.sd_mse(name)),
                        }
                        for name, values in r.results.items()
                    },
                }
                for r in reports
            ]
        }
        path.write_text(json.dumps(doc, indent=2, allow_nan=False))
        written = [path]
    else:
        raise ConfigurationError(f"unknown report format {fmt!r}")
    for p in written:
        logger.info("Wrote %s", p)
    return written


def read_report(path: str | Path) -> list[ExperimentReport]:
    """Load reports written by :func:`emit_report` in JSON format"""
    try:
        doc = json.loads(Path(path).read_text())
        return [
            ExperimentReport(
                e["label"],
                {
                    name: [None if v is None else float(v) for v in entry["mse"]]
                    for name, entry in e["estimators"].items()
                },
                config=e.get("config", {}),
            )
            for e in doc["experiments"]
        ]
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise SchemaError(f"{path} is not a report file: {e}") from e


@dataclass(frozen=True)
class CheckResult:
    check: Mapping[str, Any]
    passed: bool
    message: str


def _mean(by_label: Mapping[str, ExperimentReport], label: str, name: str) -> float:
    try:
        report = by_label[label]
    except KeyError:
        raise SchemaError(f"check refers to unknown experiment {label!r}") from None
    if name not in report.results:
        raise SchemaError(f"check refers to unknown estimator {name!r} in {label!r}")
    return report.mean_mse(name)


def check_report(
    reports: Iterable[ExperimentReport], checks: Iterable[Mapping[str, Any]]
) -> list[CheckResult]:
    """Evaluate acceptance checks against mean MSEs.

    Supported checks:

    - ``{"experiment": e, "less": [a, b]}``: mean MSE of a < mean MSE of b
    - ``{"experiment": e, "estimator": a, "band": [lo, hi]}``: lo <= mean MSE <= hi
    - ``{"experiment": e, "ratio": [a, b], "max": r}``: mean MSE of a <= r times that
      of b
    - ``{"experiments": [e1, e2, ...], "estimator": a, "non_increasing": k}``: mean MSE
      along the experiments increases at most k times
    """
    by_label = {r.label: r for r in reports}
    out = []
    for check in checks:
        label = check.get("experiment", "")
        if "less" in check:
            a, b = check["less"]
            ma, mb = _mean(by_label, label, a), _mean(by_label, label, b)
            passed = ma < mb
            msg = f"{label}: {a} {ma:.4g} < {b} {mb:.4g}"
        elif "ratio" in check:
            a, b = check["ratio"]
            ma, mb = _mean(by_label, label, a), _mean(by_label, label, b)
            passed = ma <= check["max"] * mb
            msg = f"{label}: {a} {ma:.4g} <= {check['max']} x {b} {mb:.4g}"
        elif "band" in check:
            lo, hi = check["band"]
            m = _mean(by_label, label, check["estimator"])
            passed = lo <= m <= hi
            msg = f"{label}: {check['estimator']} {m:.4g} in [{lo}, {hi}]"
        elif "non_increasing" in check:
            name = check["estimator"]
            means = [_mean(by_label, e, name) for e in check["experiments"]]
            inversions = sum(b > a for a, b in zip(means, means[1:]))
            passed = inversions <= int(check["non_increasing"])
            msg = (
                f"{check['estimator']} along {check['experiments']}: "
                f"{inversions} increases (allowed {check['non_increasing']})"
            )
        else:
            raise SchemaError(f"unknown check {dict(check)!r}")
        out.append(CheckResult(check, bool(passed), msg))
        if passed:
            logger.info("check ok: %s", msg)
        else:
            logger.error("check FAILED: %s", msg)
    return out
