"""Direct-learning CATE estimators and meta-learner baselines.

The direct learners build, for every row with an outcome, the pseudo-outcome
``y_tilde = a (y - m_hat_s(x, z))`` and the weight
``w_tilde = w_s(x) / p_hat(a | x, z, s)``, then regress ``y_tilde`` on ``x`` with
weights ``w_tilde``. The regression function estimates the treatment effect function
``delta = tau / 2``.

========  =========================  ================
method    weights                    rows
========  =========================  ================
wmdl      information-aware          all sources
mdl       constant                   all sources
wdl       information-aware          target source
dl        constant                   target source
========  =========================  ================

The T-, S- and X-learners are fitted on the pooled sources, optionally with source
indicators appended to the covariates, and are scaled to estimate ``delta`` as well.
"""
from __future__ import annotations

import logging
from collections.abc import Callable, Hashable, Iterator, Sequence
from dataclasses import dataclass, field, replace
from typing import Any, Literal, Union

import numpy as np

from wmdl.common import (
    ConfigurationError,
    ConsistencyError,
    DimensionError,
    FloatArray,
    IntArray,
    UsageError,
)
from wmdl.data import FoldAssignment, MultiSourceData, split_folds
from wmdl.learners import (
    LearnerSpec,
    ProbabilityModel,
    RegressionModel,
    fit_probability,
    fit_regression,
)
from wmdl.nuisance import NuisanceSet, arm_probability, estimate_nuisances
from wmdl.persistence import decode, encode, register
from wmdl.utils import as_matrix
from wmdl.weighting import BatchWeights, WeightSpec, batch_weights

logger = logging.getLogger(__name__)

Method = Literal["wmdl", "mdl", "wdl", "dl", "t_learner", "s_learner", "x_learner"]
EffectMode = Literal["homogeneous", "heterogeneous"]
EstimateMode = Literal["homogeneous", "heterogeneous", "single_source", "transfer"]
KnownPropensity = Union[float, Callable[[IntArray, FloatArray], FloatArray]]

DIRECT_METHODS = ("wmdl", "mdl", "wdl", "dl")
META_METHODS = ("t_learner", "s_learner", "x_learner")


@dataclass(frozen=True)
class EstimatorSpec:
    """How to estimate the treatment effect function.

    Parameters
    ----------
    method: str
        One of ``wmdl, mdl, wdl, dl, t_learner, s_learner, x_learner``
    weight_spec: WeightSpec
        Used by wmdl and wdl; mdl and dl always use constant weights
    nuisance_learner, final_learner: LearnerSpec
    n_folds: int
        Cross-fitting folds G
    effect_mode: "homogeneous" or "heterogeneous"
        Heterogeneous fits one effect function per source through source indicators
    include_source_indicator: bool
        Meta-learners only: append source indicators to the covariates
    known_propensity: float or function of (a, x), optional
        Randomization on shared covariates is known: either the constant ``P(A=+1)``
        or a function returning ``P(A=a | x)``. It replaces the estimated propensity
        in the pseudo-sample weights.
    seed: int
        Seeds fold assignment and learner randomness
    """

    method: Method = "wmdl"
    weight_spec: WeightSpec = field(default_factory=WeightSpec)
    nuisance_learner: LearnerSpec = field(default_factory=lambda: LearnerSpec("gbt"))
    final_learner: LearnerSpec = field(default_factory=lambda: LearnerSpec("gbt"))
    n_folds: int = 2
    effect_mode: EffectMode = "homogeneous"
    include_source_indicator: bool = False
    known_propensity: KnownPropensity | None = field(default=None, compare=False)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.method not in DIRECT_METHODS + META_METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}")
        if self.n_folds < 2:
            raise ConfigurationError(f"n_folds must be at least 2; got {self.n_folds}")
        if self.effect_mode not in ("homogeneous", "heterogeneous"):
            raise ConfigurationError(f"unknown effect_mode {self.effect_mode!r}")
        if self.effect_mode == "heterogeneous" and self.method not in ("wmdl", "mdl"):
            raise ConfigurationError(
                f"{self.method} estimates a single effect function; heterogeneous mode "
                "is for wmdl and mdl"
            )
        if self.effect_mode == "heterogeneous" and self.weight_spec.kind == "transfer":
            raise ConfigurationError("transfer weights require homogeneous effects")
        if self.include_source_indicator and self.method not in META_METHODS:
            raise ConfigurationError("source indicators are a meta-learner option")
        known = self.known_propensity
        if isinstance(known, float) and not 0 < known < 1:
            raise ConfigurationError("a constant known propensity must lie in (0, 1)")

    @property
    def effective_weight_spec(self) -> WeightSpec:
        """mdl and dl are wmdl and wdl with constant weights"""
        if self.method in ("mdl", "dl"):
            return replace(self.weight_spec, kind="constant", target_source=1)
        return self.weight_spec

    @property
    def label(self) -> str:
        return self.method + ("-s" if self.include_source_indicator else "")


@dataclass(frozen=True)
class PseudoSample:
    """One row of the final-stage regression"""

    x: FloatArray
    s: int
    y_tilde: float
    w_tilde: float


@dataclass(frozen=True, eq=False)
class PseudoSamples(Sequence[PseudoSample]):
    """Column-stacked pseudo-samples, in canonical row order"""

    x: FloatArray
    s: IntArray
    y_tilde: FloatArray
    w_tilde: FloatArray

    def __len__(self) -> int:
        return len(self.y_tilde)

    def __getitem__(self, i: int) -> PseudoSample:  # type: ignore[override]
        return PseudoSample(
            self.x[i], int(self.s[i]), float(self.y_tilde[i]), float(self.w_tilde[i])
        )

    def __iter__(self) -> Iterator[PseudoSample]:
        return (self[i] for i in range(len(self)))


def _known_probability(
    known: KnownPropensity, a: IntArray, x: FloatArray
) -> FloatArray:
    if callable(known):
        return np.asarray(known(a, x), dtype=float)
    return arm_probability(a, np.full(len(a), float(known)))


def build_pseudo_samples(
    data: MultiSourceData,
    nuisances: NuisanceSet,
    weights: BatchWeights | FloatArray,
    known_propensity: KnownPropensity | None = None,
) -> PseudoSamples:
    """Pseudo-outcomes and weights of every row with an outcome.

    Covariates-only rows are skipped. The propensity denominator is the out-of-fold
    ``p_hat(a | x, z, s)``, or *known_propensity* when given.

    Raises
    ------
    ConsistencyError
        If nuisances or weights do not line up with the rows of *data*
    """
    ids = data.outcome_sources
    if isinstance(weights, BatchWeights):
        w = weights.weights
    else:
        w = np.asarray(weights, float)
    y, a = data.stack_outcomes(ids)
    if len(w) != len(y):
        raise ConsistencyError(f"{len(w)} weights for {len(y)} rows with outcomes")
    m, p = [], []
    for s in ids:
        if s not in nuisances.sources:
            raise ConsistencyError(f"no nuisance values for source {s}")
        oof = nuisances.sources[s].oof
        if len(oof.m) != data[s].n or len(oof.p_full) != data[s].n:
            raise ConsistencyError(f"nuisance values of source {s} are not aligned")
        m.append(oof.m)
        p.append(oof.p_full)
    x = data.stack_x(ids)
    if known_propensity is None:
        p_obs = arm_probability(a, np.concatenate(p))
    else:
        p_obs = _known_probability(known_propensity, a, x)
    y_tilde = a * (y - np.concatenate(m))
    w_tilde = w / p_obs
    if not (np.all(np.isfinite(y_tilde)) and np.all(np.isfinite(w_tilde))):
        raise ConsistencyError("non-finite pseudo-outcomes or weights")
    return PseudoSamples(x, data.stack_source(ids), y_tilde, w_tilde)


def source_indicators(s: IntArray, levels: Sequence[int]) -> FloatArray:
    """Indicator columns for every level but the first, which is the reference

    Examples
    --------
    >>> source_indicators(np.array([1, 2, 3]), (1, 2, 3)).tolist()
    [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]
    """
    s = np.asarray(s)
    unknown = set(np.unique(s).tolist()) - set(levels)
    if unknown:
        raise UsageError(
            f"unknown source ids {sorted(unknown)}; fitted on {list(levels)}"
        )
    if len(levels) < 2:
        return np.zeros((len(s), 0))
    return np.column_stack([(s == lv).astype(float) for lv in levels[1:]])


@register("t_learner")
class TLearnerModel(RegressionModel):
    """``(mu_{+1}(x) - mu_{-1}(x)) / 2``"""

    def __init__(self, treated: RegressionModel, control: RegressionModel):
        self.treated = treated
        self.control = control
        self.d = treated.d

    def _predict(self, x: FloatArray) -> FloatArray:
        return 0.5 * (self.treated.predict(x) - self.control.predict(x))

    def to_dict(self) -> dict[str, Any]:
        return {"treated": encode(self.treated), "control": encode(self.control)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TLearnerModel:
        return cls(decode(d["treated"]), decode(d["control"]))


@register("s_learner")
class SLearnerModel(RegressionModel):
    """``(f(x, +1) - f(x, -1)) / 2`` for an outcome model *f* with the treatment as
    its last feature
    """

    def __init__(self, outcome: RegressionModel):
        self.outcome = outcome
        self.d = outcome.d - 1

    def _predict(self, x: FloatArray) -> FloatArray:
        ones = np.ones((len(x), 1))
        hi = self.outcome.predict(np.hstack([x, ones]))
        lo = self.outcome.predict(np.hstack([x, -ones]))
        return 0.5 * (hi - lo)

    def to_dict(self) -> dict[str, Any]:
        return {"outcome": encode(self.outcome)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SLearnerModel:
        return cls(decode(d["outcome"]))


@register("x_learner")
class XLearnerModel(RegressionModel):
    """``(g(x) tau_control(x) + (1 - g(x)) tau_treated(x)) / 2``, ``g = P(A=+1 | x)``.

    ``tau_treated`` is fitted on treated rows to ``y - mu_{-1}(x)``, ``tau_control`` on
    control rows to ``mu_{+1}(x) - y``.
    """

    def __init__(
        self,
        tau_treated: RegressionModel,
        tau_control: RegressionModel,
        propensity: ProbabilityModel,
    ):
        self.tau_treated = tau_treated
        self.tau_control = tau_control
        self.propensity = propensity
        self.d = tau_treated.d

    def _predict(self, x: FloatArray) -> FloatArray:
        g = self.propensity.predict(x)
        control, treated = self.tau_control.predict(x), self.tau_treated.predict(x)
        return 0.5 * (g * control + (1 - g) * treated)

    def to_dict(self) -> dict[str, Any]:
        return {
            "tau_treated": encode(self.tau_treated),
            "tau_control": encode(self.tau_control),
            "propensity": encode(self.propensity),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> XLearnerModel:
        return cls(
            decode(d["tau_treated"]), decode(d["tau_control"]), decode(d["propensity"])
        )


@register("cate_estimate")
class CateEstimate:
    """A fitted treatment effect function ``delta`` and its CATE ``tau = 2 delta``.

    ``source_levels`` lists the sources whose indicators were appended to ``x``
    (the first is the reference); it is empty when the model takes ``x`` only.
    ``diagnostics`` holds fit by-products (nuisances, batch weights, pseudo-samples)
    and is not persisted.
    """

    method: str
    mode: EstimateMode
    model: RegressionModel
    target_source: int
    source_levels: tuple[int, ...]
    d_x: int
    diagnostics: dict[str, Any]

    def __init__(
        self,
        method: str,
        mode: EstimateMode,
        model: RegressionModel,
        target_source: int,
        d_x: int,
        source_levels: Sequence[int] = (),
        diagnostics: dict[str, Any] | None = None,
    ):
        self.method = method
        self.mode = mode
        self.model = model
        self.target_source = target_source
        self.d_x = d_x
        self.source_levels = tuple(source_levels)
        self.diagnostics = diagnostics or {}

    def __str__(self) -> str:
        target = self.target_source
        return f"<CateEstimate: {self.method}, {self.mode}, target={target}>"

    __repr__ = __str__

    def features(self, x: FloatArray, s: int | IntArray | None = None) -> FloatArray:
        xm = as_matrix(x)
        if xm.shape[1] != self.d_x:
            raise DimensionError(f"expected {self.d_x} covariates; got {xm.shape[1]}")
        if not self.source_levels:
            return xm
        if s is None:
            if self.mode == "heterogeneous":
                raise UsageError("a heterogeneous estimate needs the source id")
            s = self.target_source
        sv = np.broadcast_to(np.asarray(s), (len(xm),))
        return np.hstack([xm, source_indicators(sv, self.source_levels)])

    def predict_delta(
        self, x: FloatArray, s: int | IntArray | None = None
    ) -> FloatArray:
        return self.model.predict(self.features(x, s))

    def predict_tau(self, x: FloatArray, s: int | IntArray | None = None) -> FloatArray:
        return 2.0 * self.predict_delta(x, s)

    def to_dict(self) -> dict[str, Any]:
        return {
            "method": self.method,
            "mode": self.mode,
            "target_source": self.target_source,
            "d_x": self.d_x,
            "source_levels": list(self.source_levels),
            "model": encode(self.model),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> CateEstimate:
        return cls(
            d["method"],
            d["mode"],
            decode(d["model"]),
            int(d["target_source"]),
            int(d["d_x"]),
            [int(s) for s in d["source_levels"]],
        )


def predict_delta(
    estimate: CateEstimate, x: FloatArray, s: int | IntArray | None = None
) -> float | FloatArray:
    """``delta_hat`` at one point (a vector, returns a float) or at every row of a
    matrix
    """
    out = estimate.predict_delta(x, s)
    return float(out[0]) if np.ndim(x) == 1 else out


def predict_tau(
    estimate: CateEstimate, x: FloatArray, s: int | IntArray | None = None
) -> float | FloatArray:
    out = estimate.predict_tau(x, s)
    return float(out[0]) if np.ndim(x) == 1 else out


def _direct_data(data: MultiSourceData, spec: EstimatorSpec) -> MultiSourceData:
    wspec = spec.effective_weight_spec
    if spec.method in ("wdl", "dl"):
        if data.is_transfer:
            raise ConfigurationError(
                f"{spec.method} fits on the target source, which has no outcomes in "
                "transfer mode"
            )
        return data.restrict([data.target_source])
    if wspec.kind == "transfer":
        if 0 not in data or data[0].has_outcomes:
            raise ConfigurationError(
                "transfer weights need a covariates-only target: source 0 is missing"
            )
        return data
    if data.is_transfer:
        # data fusion towards source 1; the covariates-only block plays no role
        return MultiSourceData(
            [data[s] for s in data.outcome_sources], target_source=1, truth=data.truth
        )
    return data


def nuisance_key(data: MultiSourceData, spec: EstimatorSpec) -> Hashable:
    """Direct learners whose keys are equal cross-fit identical nuisances on *data*"""
    used = _direct_data(data, spec)
    return (
        used.source_ids,
        used.target_source,
        spec.nuisance_learner,
        spec.n_folds,
        spec.seed,
    )


def fit_nuisances(
    data: MultiSourceData, spec: EstimatorSpec, threads: int | None = 1
) -> NuisanceSet:
    """Cross-fit the nuisances a direct learner would fit on *data*.

    The result can be passed to :func:`fit` for every spec with the same
    :func:`nuisance_key`.
    """
    if spec.method in META_METHODS:
        raise UsageError("meta-learners do not use nuisances")
    used = _direct_data(data, spec)
    folds = split_folds(used, spec.n_folds, spec.seed)
    return estimate_nuisances(used, spec.nuisance_learner, folds, threads=threads)


def _fit_direct(
    data: MultiSourceData,
    spec: EstimatorSpec,
    nuisances: NuisanceSet | None,
    threads: int | None,
) -> CateEstimate:
    used = _direct_data(data, spec)
    wspec = spec.effective_weight_spec
    used.require_both_arms()
    logger.info(
        "Fitting %s on %d rows from sources %s",
        spec.method,
        sum(used[s].n for s in used.outcome_sources),
        list(used.outcome_sources),
    )
    folds: FoldAssignment | None = None
    if nuisances is None:
        folds = split_folds(used, spec.n_folds, spec.seed)
        nuisances = estimate_nuisances(
            used, spec.nuisance_learner, folds, threads=threads
        )
    weights = batch_weights(used, nuisances, wspec)
    pseudo = build_pseudo_samples(used, nuisances, weights, spec.known_propensity)

    if spec.method in ("wdl", "dl"):
        mode: EstimateMode = "single_source"
    elif wspec.kind == "transfer":
        mode = "transfer"
    else:
        mode = spec.effect_mode
    target = wspec.target if wspec.kind == "transfer" else used.target_source

    levels: tuple[int, ...] = ()
    features = pseudo.x
    if mode == "heterogeneous":
        ids = used.outcome_sources
        levels = (target, *(s for s in ids if s != target))
        features = np.hstack([pseudo.x, source_indicators(pseudo.s, levels)])
    model = fit_regression(spec.final_learner, features, pseudo.y_tilde, pseudo.w_tilde)
    return CateEstimate(
        spec.method,
        mode,
        model,
        target,
        used.d_x,
        levels,
        diagnostics={
            "nuisances": nuisances,
            "weights": weights,
            "pseudo_samples": pseudo,
            "folds": folds,
        },
    )


def _fit_meta(data: MultiSourceData, spec: EstimatorSpec) -> CateEstimate:
    ids = data.outcome_sources
    data.require_both_arms(ids)
    x = data.stack_x(ids)
    y, a = data.stack_outcomes(ids)
    levels: tuple[int, ...] = ()
    target = data.target_source if data.target_source in ids else ids[0]
    if spec.include_source_indicator:
        levels = (target, *(s for s in ids if s != target))
        x = np.hstack([x, source_indicators(data.stack_source(ids), levels)])
    logger.info("Fitting %s on %d pooled rows", spec.label, len(y))
    outcome, final = spec.nuisance_learner, spec.final_learner
    treated, control = a == 1, a == -1

    model: RegressionModel
    if spec.method == "t_learner":
        model = TLearnerModel(
            fit_regression(outcome, x[treated], y[treated]),
            fit_regression(outcome, x[control], y[control]),
        )
    elif spec.method == "s_learner":
        model = SLearnerModel(fit_regression(outcome, np.hstack([x, a[:, None]]), y))
    else:
        mu_t = fit_regression(outcome, x[treated], y[treated])
        mu_c = fit_regression(outcome, x[control], y[control])
        model = XLearnerModel(
            fit_regression(final, x[treated], y[treated] - mu_c.predict(x[treated])),
            fit_regression(final, x[control], mu_t.predict(x[control]) - y[control]),
            fit_probability(outcome, x, a),
        )
    return CateEstimate(spec.label, "homogeneous", model, target, data.d_x, levels)


def fit(
    data: MultiSourceData,
    spec: EstimatorSpec,
    nuisances: NuisanceSet | None = None,
    threads: int | None = 1,
) -> CateEstimate:
    """Estimate the treatment effect function.

    Parameters
    ----------
    data: MultiSourceData
    spec: EstimatorSpec
    nuisances: NuisanceSet, optional
        Inject nuisances instead of cross-fitting them, e.g. from
        :func:`wmdl.nuisance.oracle_nuisances`. Direct learners only.
    threads: int
        Threads used for the nuisance fits

    See Also
    --------
    predict_delta
    """
    if spec.method in META_METHODS:
        if nuisances is not None:
            raise UsageError("meta-learners do not take injected nuisances")
        return _fit_meta(data, spec)
    return _fit_direct(data, spec, nuisances, threads)
