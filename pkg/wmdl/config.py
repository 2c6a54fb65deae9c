"""JSON configuration of simulations, estimators and benchmarks.

Every ``*_from_dict`` function rejects unknown keys and mistyped values with
:class:`~wmdl.common.SchemaError`; every ``*_to_dict`` function echoes a fully defaulted
config, so outputs describe the run that produced them.
"""
from __future__ import annotations

import json
import logging
import types
import typing
from collections.abc import Callable, Mapping
from dataclasses import fields
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING, Any, TypeVar

from wmdl.common import ConfigurationError, SchemaError
from wmdl.data import CsvSchema, DgpConfig
from wmdl.estimators import EstimatorSpec
from wmdl.evaluation import ExperimentConfig
from wmdl.learners import LearnerSpec
from wmdl.weighting import WeightSpec

if TYPE_CHECKING:
    from importlib.resources.abc import Traversable

logger = logging.getLogger(__name__)

T = TypeVar("T")

#: Bundled benchmark configs, resolvable by bare file name
BUNDLED = ("comparison_desk.json", "sample_size_desk.json", "robustness_desk.json")


def resolve(path: str | Path) -> Path | Traversable:
    """*path* if it exists, else the bundled config of that name"""
    p = Path(path)
    if p.exists():
        return p
    bundled = resources.files("wmdl") / "configs" / p.name
    if bundled.is_file():
        return bundled
    raise SchemaError(
        f"config file {str(path)!r} not found; bundled configs: {', '.join(BUNDLED)}"
    )


def read_json(path: str | Path) -> Any:
    source = resolve(path)
    try:
        return json.loads(source.read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: invalid JSON: {e}") from e


def _check_value(hint: Any, value: Any, where: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Literal:
        if value not in args:
            raise SchemaError(f"{where}: expected one of {list(args)}; got {value!r}")
        return value
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        others = [a for a in args if a is not type(None)]
        for a in others:
            try:
                return _check_value(a, value, where)
            except SchemaError:
                continue
        raise SchemaError(f"{where}: unexpected value {value!r}")
    if hint is bool:
        if not isinstance(value, bool):
            raise SchemaError(f"{where}: expected true or false; got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise SchemaError(f"{where}: expected an integer; got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaError(f"{where}: expected a number; got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise SchemaError(f"{where}: expected a string; got {value!r}")
        return value
    return value


def _build(
    cls: Callable[..., T],
    d: Any,
    where: str,
    nested: Mapping[str, Callable[[Any, str], Any]] | None = None,
    skip: tuple[str, ...] = (),
) -> T:
    if not isinstance(d, Mapping):
        raise SchemaError(f"{where}: expected an object; got {type(d).__name__}")
    nested = nested or {}
    hints = typing.get_type_hints(cls)
    names = {
        f.name for f in fields(cls) if f.name not in skip  # type: ignore[arg-type]
    }
    unknown = sorted(set(d) - names)
    if unknown:
        raise SchemaError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in d.items():
        loc = f"{where}.{key}"
        if key in nested:
            kwargs[key] = nested[key](value, loc)
        else:
            kwargs[key] = _check_value(hints[key], value, loc)
    try:
        return cls(**kwargs)
    except ConfigurationError as e:
        raise SchemaError(f"{where}: {e}") from e
    except TypeError as e:
        raise SchemaError(f"{where}: {e}") from e


def _to_dict(obj: Any, skip: tuple[str, ...] = ()) -> dict[str, Any]:
    return {f.name: getattr(obj, f.name) for f in fields(obj) if f.name not in skip}


def dgp_from_dict(d: Any, where: str = "dgp") -> DgpConfig:
    return _build(DgpConfig, d, where)


def dgp_to_dict(cfg: DgpConfig) -> dict[str, Any]:
    return _to_dict(cfg)


def learner_from_dict(d: Any, where: str = "learner") -> LearnerSpec:
    return _build(LearnerSpec, d, where)


def learner_to_dict(spec: LearnerSpec) -> dict[str, Any]:
    return _to_dict(spec)


def weight_from_dict(d: Any, where: str = "weight_spec") -> WeightSpec:
    return _build(WeightSpec, d, where, skip=("densities",))


def weight_to_dict(spec: WeightSpec) -> dict[str, Any]:
    return _to_dict(spec, skip=("densities",))


def _known_propensity(value: Any, where: str) -> float | None:
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(
            f"{where}: a known propensity in JSON is the constant P(A=+1)"
        )
    return float(value)


def estimator_from_dict(d: Any, where: str = "estimator") -> EstimatorSpec:
    """EstimatorSpec from JSON. ``known_propensity`` may only be a constant here."""
    return _build(
        EstimatorSpec,
        d,
        where,
        nested={
            "weight_spec": weight_from_dict,
            "nuisance_learner": learner_from_dict,
            "final_learner": learner_from_dict,
            "known_propensity": _known_propensity,
        },
    )


def estimator_to_dict(spec: EstimatorSpec) -> dict[str, Any]:
    d = _to_dict(spec)
    d["weight_spec"] = weight_to_dict(spec.weight_spec)
    d["nuisance_learner"] = learner_to_dict(spec.nuisance_learner)
    d["final_learner"] = learner_to_dict(spec.final_learner)
    if callable(spec.known_propensity):
        d["known_propensity"] = "<function>"
    return d


def _estimators(d: Any, where: str) -> dict[str, EstimatorSpec]:
    if not isinstance(d, Mapping) or not d:
        raise SchemaError(f"{where}: expected a non-empty object of name -> estimator")
    return {
        name: estimator_from_dict(spec, f"{where}.{name}") for name, spec in d.items()
    }


def experiment_from_dict(d: Any, where: str = "experiment") -> ExperimentConfig:
    return _build(
        ExperimentConfig,
        d,
        where,
        nested={"dgp": dgp_from_dict, "estimators": _estimators},
    )


def experiment_to_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    d = _to_dict(cfg)
    d["dgp"] = dgp_to_dict(cfg.dgp)
    d["estimators"] = {name: estimator_to_dict(s) for name, s in cfg.estimators.items()}
    return d


def schema_from_dict(d: Any, where: str = "schema") -> CsvSchema:
    def names(value: Any, loc: str) -> tuple[str, ...] | None:
        if value is None:
            return None
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise SchemaError(f"{loc}: expected a list of column names")
        return tuple(value)

    def extra(value: Any, loc: str) -> dict[int, tuple[str, ...]] | None:
        if value is None:
            return None
        if not isinstance(value, Mapping):
            raise SchemaError(f"{loc}: expected an object of source id -> column names")
        try:
            return {int(k): names(v, f"{loc}.{k}") or () for k, v in value.items()}
        except ValueError:
            raise SchemaError(f"{loc}: source ids must be integers") from None

    return _build(CsvSchema, d, where, nested={"shared": names, "extra": extra})


def schema_to_dict(schema: CsvSchema) -> dict[str, Any]:
    d = _to_dict(schema)
    if schema.shared is not None:
        d["shared"] = list(schema.shared)
    if schema.extra is not None:
        d["extra"] = {str(k): list(v) for k, v in schema.extra.items()}
    return d


def load_fit_config(path: str | Path) -> tuple[EstimatorSpec, CsvSchema]:
    """``{"estimator": {...}, "schema": {...}}``; both keys optional"""
    d = read_json(path)
    if not isinstance(d, Mapping):
        raise SchemaError(f"{path}: expected an object")
    unknown = sorted(set(d) - {"estimator", "schema"})
    if unknown:
        raise SchemaError(f"{path}: unknown keys {unknown}")
    return (
        estimator_from_dict(d.get("estimator", {})),
        schema_from_dict(d.get("schema", {})),
    )


#: Experiment keys a benchmark file may set once for every experiment
SHARED_KEYS = ("estimators", "replications", "n_test", "master_seed", "nuisances")


def load_benchmark(
    path: str | Path,
) -> tuple[list[ExperimentConfig], list[dict[str, Any]]]:
    """Experiments and acceptance checks of a benchmark file.

    Format::

        {"estimators": {...}, "replications": 20, ...,
         "experiments": [{"label": ..., "dgp": {...}, ...}, ...],
         "checks": [...]}

    Top-level keys among ``estimators, replications, n_test, master_seed, nuisances``
    are defaults for every experiment.
    """
    d = read_json(path)
    if not isinstance(d, Mapping) or "experiments" not in d:
        raise SchemaError(f"{path}: a benchmark needs an 'experiments' list")
    unknown = sorted(set(d) - {"experiments", "checks", *SHARED_KEYS})
    if unknown:
        raise SchemaError(f"{path}: unknown keys {unknown}")
    shared = {k: d[k] for k in SHARED_KEYS if k in d}
    experiments = []
    for i, e in enumerate(d["experiments"]):
        if not isinstance(e, Mapping):
            raise SchemaError(f"experiments[{i}]: expected an object")
        experiments.append(experiment_from_dict({**shared, **e}, f"experiments[{i}]"))
    labels = [e.label for e in experiments]
    if len(set(labels)) != len(labels):
        raise SchemaError(f"{path}: duplicate experiment labels")
    checks = d.get("checks", [])
    if not isinstance(checks, list) or not all(isinstance(c, Mapping) for c in checks):
        raise SchemaError(f"{path}: 'checks' must be a list of objects")
    logger.debug(
        "Loaded %d experiments and %d checks from %s",
        len(experiments),
        len(checks),
        path,
    )
    return experiments, [dict(c) for c in checks]
