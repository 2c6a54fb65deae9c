"""Cross-fitted nuisance functions.

Per source with outcomes: arm means ``mu_{a,s}(x, z)``, the main effect
``m_s = (mu_{+1,s} + mu_{-1,s}) / 2``, the treatment propensity on ``(x, z)`` and on
``x`` alone, and the conditional outcome variance of each arm. Across sources: the
selection propensities ``pi_s(x) = P(S=s | x)`` and the source shares ``P(S=s)``.

Every nuisance is available both as a function of new points and as out-of-fold values
aligned with the rows of its source.
"""
from __future__ import annotations

import logging
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np

from wmdl.common import (
    ConfigurationError,
    FitError,
    FloatArray,
    IntArray,
    ValidationError,
)
from wmdl.data import FoldAssignment, GroundTruth, MultiSourceData, SourceData
from wmdl.learners import CrossFit, LearnerSpec, cross_fit
from wmdl.utils import as_matrix, thread_map

logger = logging.getLogger(__name__)

#: Lower bound of estimated conditional variances
V_FLOOR = 1e-4

CovariateSet = Literal["full", "marginal"]
ArmFunction = Callable[[FloatArray, FloatArray], FloatArray]
XFunction = Callable[[FloatArray], FloatArray]


def arm_probability(a: IntArray | int, p_treated: FloatArray) -> FloatArray:
    """``P(A=a)`` from ``P(A=+1)``"""
    return np.where(np.asarray(a) == 1, p_treated, 1.0 - p_treated)


def _features(sd: SourceData, covariates: CovariateSet = "full") -> FloatArray:
    return np.hstack([sd.x, sd.z]) if covariates == "full" else sd.x


def _xz(x: FloatArray, z: FloatArray | None) -> FloatArray:
    xm = as_matrix(x)
    if z is None or np.size(z) == 0:
        return xm
    return np.hstack([xm, np.asarray(z, dtype=float).reshape(len(xm), -1)])


@dataclass(frozen=True, eq=False)
class SourceOOF:
    """Out-of-fold nuisance values for every row of one source"""

    m: FloatArray
    p_full: FloatArray
    p_marg: FloatArray
    v: Mapping[int, FloatArray]
    mu: Mapping[int, FloatArray]


@dataclass(frozen=True, eq=False)
class SourceNuisance:
    """Nuisance functions of one source.

    ``p_full`` and ``p_marg`` return ``P(A=+1 | .)``; use :func:`arm_probability` for
    the other arm. ``v_hat`` and ``arm_means`` are keyed by arm.
    """

    source_id: int
    m_hat: ArmFunction
    p_full: ArmFunction
    p_marg: XFunction
    v_hat: Mapping[int, XFunction]
    arm_means: Mapping[int, ArmFunction]
    oof: SourceOOF


@dataclass(frozen=True, eq=False)
class SelectionPropensity:
    """``P(S=s | x)`` for every source id in ``source_ids``, one column each"""

    source_ids: tuple[int, ...]
    predict_fn: XFunction
    oof: Mapping[int, FloatArray] = field(repr=False)

    def index(self, s: int) -> int:
        try:
            return self.source_ids.index(s)
        except ValueError:
            raise ConfigurationError(
                f"source {s} is not covered by the selection model"
            ) from None

    def predict(self, x: FloatArray) -> FloatArray:
        return self.predict_fn(as_matrix(x))

    def pi(self, s: int, x: FloatArray) -> FloatArray:
        return self.predict(x)[:, self.index(s)]


@dataclass(frozen=True, eq=False)
class NuisanceSet:
    """All nuisances needed by the direct-learning estimators.

    ``selection`` is None when the data have a single source.
    """

    sources: Mapping[int, SourceNuisance]
    selection: SelectionPropensity | None
    source_share: Mapping[int, float]
    clip_eps: float
    v_floor: float = V_FLOOR

    def __getitem__(self, s: int) -> SourceNuisance:
        try:
            return self.sources[s]
        except KeyError:
            raise ConfigurationError(f"no nuisances for source {s}") from None

    def pi_hat(self, s: int, x: FloatArray) -> FloatArray:
        if self.selection is None:
            raise ConfigurationError("selection propensities need at least two sources")
        return self.selection.pi(s, x)


def _floor_selection(raw: FloatArray, eps: float) -> FloatArray:
    """Renormalize one-vs-rest probabilities across sources and floor them at *eps*
    while keeping every row summing to 1
    """
    k = raw.shape[1]
    if k * eps >= 1:
        raise ConfigurationError(f"clip_eps={eps} is too large for {k} sources")
    norm = raw / raw.sum(axis=1, keepdims=True)
    return eps + (1.0 - k * eps) * norm


@dataclass(frozen=True, eq=False)
class MainEffect:
    """Cross-fitted arm means and the main effect they average to"""

    mu: Mapping[int, CrossFit]
    oof: FloatArray

    def predict(self, x: FloatArray, z: FloatArray | None = None) -> FloatArray:
        xz = _xz(x, z)
        return 0.5 * (self.mu[1].predict(xz) + self.mu[-1].predict(xz))

    def arm_mean(self, arm: int) -> ArmFunction:
        fit = self.mu[arm]
        return lambda x, z=None: fit.predict(_xz(x, z))


def _source_with_outcomes(
    data: MultiSourceData, s: int
) -> tuple[SourceData, FloatArray, IntArray]:
    sd = data[s]
    if sd.y is None or sd.a is None:
        raise ConfigurationError(f"source {s} has no outcomes")
    return sd, sd.y, sd.a


def estimate_main_effect(
    data: MultiSourceData,
    s: int,
    spec: LearnerSpec,
    folds: FoldAssignment,
    threads: int | None = 1,
) -> MainEffect:
    """Cross-fit ``mu_{+1,s}`` and ``mu_{-1,s}`` on ``(x, z)`` within each arm.

    The out-of-fold main effect at a row averages both arm models fitted without the
    row's fold.
    """
    sd, y, a = _source_with_outcomes(data, s)
    feats = _features(sd)
    fold = folds.for_source(s)

    def fit_arm(arm: int) -> CrossFit:
        if not np.any(a == arm):
            raise FitError("no observations in arm", source=s, arm=arm)
        try:
            return cross_fit(
                spec, feats, y, None, fold, "regression", train_mask=a == arm
            )
        except FitError as e:
            raise e.with_context(source=s, arm=arm) from e

    fits = dict(zip((1, -1), thread_map(fit_arm, [1, -1], threads)))
    return MainEffect(fits, 0.5 * (fits[1].oof + fits[-1].oof))


def estimate_treat_propensity(
    data: MultiSourceData,
    s: int,
    spec: LearnerSpec,
    folds: FoldAssignment,
    covariate_set: CovariateSet = "full",
) -> CrossFit:
    """Cross-fitted ``P(A=+1 | x, z, S=s)`` (``"full"``) or ``P(A=+1 | x, S=s)``
    (``"marginal"``), clipped to ``[clip_eps, 1 - clip_eps]``
    """
    if covariate_set not in ("full", "marginal"):
        raise ConfigurationError(f"unknown covariate set {covariate_set!r}")
    sd, _, a = _source_with_outcomes(data, s)
    try:
        feats = _features(sd, covariate_set)
        return cross_fit(spec, feats, a, None, folds.for_source(s), "probability")
    except FitError as e:
        raise e.with_context(source=s) from e


def estimate_selection_propensity(
    data: MultiSourceData,
    spec: LearnerSpec,
    folds: FoldAssignment,
    threads: int | None = 1,
) -> SelectionPropensity:
    """One-vs-rest cross-fitted ``P(S=s | x)`` over every source, including a
    covariates-only target.

    Raw probabilities are renormalized across sources, then floored at ``clip_eps``.
    """
    ids = data.source_ids
    if len(ids) < 2:
        raise ConfigurationError("selection propensities need at least two sources")
    x = data.stack_x(ids)
    s_row = data.stack_source(ids)
    fold = folds.pooled(ids)

    def fit_source(s: int) -> CrossFit:
        try:
            return cross_fit(spec, x, s_row == s, None, fold, "probability")
        except FitError as e:
            raise e.with_context(source=s) from e

    fits = thread_map(fit_source, list(ids), threads)
    eps = spec.clip_eps
    oof_all = _floor_selection(np.column_stack([f.oof for f in fits]), eps)
    oof = {s: oof_all[s_row == s] for s in ids}

    def predict_fn(xn: FloatArray) -> FloatArray:
        return _floor_selection(np.column_stack([f.predict(xn) for f in fits]), eps)

    return SelectionPropensity(ids, predict_fn, oof)


@dataclass(frozen=True, eq=False)
class VarianceFunction:
    """Cross-fitted conditional variance of one arm, floored at ``v_floor``"""

    fit: CrossFit
    v_floor: float

    @property
    def oof(self) -> FloatArray:
        return np.maximum(self.fit.oof, self.v_floor)

    def predict(self, x: FloatArray) -> FloatArray:
        return np.maximum(self.fit.predict(x), self.v_floor)


def estimate_conditional_variance(
    data: MultiSourceData,
    s: int,
    a: int,
    spec: LearnerSpec,
    folds: FoldAssignment,
    arm_means: ArmFunction | FloatArray,
    v_floor: float = V_FLOOR,
) -> VarianceFunction:
    """Regress squared residuals ``(y - mu_{a,s})^2`` on ``x`` within arm *a* of
    source *s*.

    *arm_means* is either a function of ``(x, z)`` or the out-of-fold arm-mean values at
    every row of the source. Conditioning on ``x`` only, the result is the variance
    marginalized over source-specific covariates.
    """
    sd, y, arms = _source_with_outcomes(data, s)
    in_arm = arms == a
    if not in_arm.any():
        raise FitError("no observations in arm", source=s, arm=a)
    if callable(arm_means):
        mu = arm_means(sd.x, sd.z)
    else:
        mu = np.asarray(arm_means, dtype=float)
    resid2 = (y - mu) ** 2
    try:
        fold = folds.for_source(s)
        fit = cross_fit(
            spec, sd.x, resid2, None, fold, "regression", train_mask=in_arm
        )
    except FitError as e:
        raise e.with_context(source=s, arm=a) from e
    return VarianceFunction(fit, v_floor)


def _estimate_source(
    data: MultiSourceData,
    s: int,
    spec: LearnerSpec,
    folds: FoldAssignment,
    v_floor: float,
) -> SourceNuisance:
    logger.debug("Estimating nuisances of source %d (%d rows)", s, data[s].n)
    main = estimate_main_effect(data, s, spec, folds)
    p_full = estimate_treat_propensity(data, s, spec, folds, "full")
    p_marg = estimate_treat_propensity(data, s, spec, folds, "marginal")
    var = {
        arm: estimate_conditional_variance(
            data, s, arm, spec, folds, main.mu[arm].oof, v_floor
        )
        for arm in (1, -1)
    }
    oof = SourceOOF(
        m=main.oof,
        p_full=p_full.oof,
        p_marg=p_marg.oof,
        v={arm: v.oof for arm, v in var.items()},
        mu={arm: main.mu[arm].oof for arm in (1, -1)},
    )
    return SourceNuisance(
        source_id=s,
        m_hat=main.predict,
        p_full=lambda x, z=None: p_full.predict(_xz(x, z)),
        p_marg=p_marg.predict,
        v_hat={arm: v.predict for arm, v in var.items()},
        arm_means={arm: main.arm_mean(arm) for arm in (1, -1)},
        oof=oof,
    )


def source_shares(data: MultiSourceData) -> dict[int, float]:
    """``P(S=s)`` estimated by ``n_s / n``, over every source including a target"""
    return {s: sd.n / data.n_total for s, sd in data.items()}


def estimate_nuisances(
    data: MultiSourceData,
    spec: LearnerSpec,
    folds: FoldAssignment,
    v_floor: float = V_FLOOR,
    threads: int | None = 1,
) -> NuisanceSet:
    """Cross-fit every nuisance of every source.

    Sources are processed concurrently on *threads* threads.
    """
    data.require_both_arms()
    logger.info(
        "Estimating nuisances: %d sources, %s learner, %d folds",
        len(data.outcome_sources),
        spec.kind,
        folds.n_folds,
    )
    per_source = thread_map(
        lambda s: _estimate_source(data, s, spec, folds, v_floor),
        list(data.outcome_sources),
        threads,
    )
    selection = None
    if len(data) > 1:
        selection = estimate_selection_propensity(data, spec, folds, threads)
    return NuisanceSet(
        sources={ns.source_id: ns for ns in per_source},
        selection=selection,
        source_share=source_shares(data),
        clip_eps=spec.clip_eps,
        v_floor=v_floor,
    )


def oracle_nuisances(
    data: MultiSourceData,
    truth: GroundTruth | None = None,
    corrupt_main_effect: bool = False,
    corrupt_propensity: bool = False,
    clip_eps: float = 0.01,
    v_floor: float = V_FLOOR,
) -> NuisanceSet:
    """Nuisances taken from the simulation ground truth.

    ``corrupt_main_effect`` replaces ``m_s`` (and the arm means) by 0;
    ``corrupt_propensity`` replaces both treatment propensities by 0.5. Selection
    propensities use the exact covariate densities and are never corrupted.
    """
    truth = truth or data.truth
    if truth is None:
        raise ConfigurationError(
            "oracle nuisances need simulated data with a ground truth"
        )
    variance = max(truth.variance, v_floor)

    def clip(p: FloatArray) -> FloatArray:
        return np.clip(p, clip_eps, 1 - clip_eps)

    def build(s: int) -> SourceNuisance:
        sd = data[s]

        def m_hat(x: FloatArray, z: FloatArray | None = None) -> FloatArray:
            xm = as_matrix(x)
            if corrupt_main_effect:
                return np.zeros(len(xm))
            return truth.main_effect(xm, z)

        def arm_mean(arm: int) -> ArmFunction:
            def mu(x: FloatArray, z: FloatArray | None = None) -> FloatArray:
                xm = as_matrix(x)
                if corrupt_main_effect:
                    return np.zeros(len(xm))
                return truth.main_effect(xm, z) + arm * truth.delta(xm, s)

            return mu

        def p_full(x: FloatArray, z: FloatArray | None = None) -> FloatArray:
            xm = as_matrix(x)
            if corrupt_propensity:
                return np.full(len(xm), 0.5)
            return clip(truth.propensity(xm, z))

        def p_marg(x: FloatArray) -> FloatArray:
            xm = as_matrix(x)
            if corrupt_propensity:
                return np.full(len(xm), 0.5)
            return clip(truth.marginal_propensity(xm, s))

        def v_hat(x: FloatArray) -> FloatArray:
            return np.full(len(as_matrix(x)), variance)

        means = {arm: arm_mean(arm) for arm in (1, -1)}
        oof = SourceOOF(
            m=m_hat(sd.x, sd.z),
            p_full=p_full(sd.x, sd.z),
            p_marg=p_marg(sd.x),
            v={arm: v_hat(sd.x) for arm in (1, -1)},
            mu={arm: means[arm](sd.x, sd.z) for arm in (1, -1)},
        )
        v = {1: v_hat, -1: v_hat}
        return SourceNuisance(s, m_hat, p_full, p_marg, v, means, oof)

    shares = source_shares(data)
    selection = None
    if len(data) > 1:
        ids = data.source_ids

        def predict_fn(x: FloatArray) -> FloatArray:
            exact = truth.selection_propensity(x, {s: shares[s] for s in ids})
            return _floor_selection(np.maximum(exact, 1e-300), clip_eps)

        selection = SelectionPropensity(
            ids, predict_fn, {s: predict_fn(data[s].x) for s in ids}
        )
    return NuisanceSet(
        sources={s: build(s) for s in data.outcome_sources},
        selection=selection,
        source_share=shares,
        clip_eps=clip_eps,
        v_floor=v_floor,
    )


def partial_balance_score(
    data: MultiSourceData,
    s: int,
    p_tilde: Callable[[IntArray, FloatArray, FloatArray], FloatArray],
    delta_hat: ArmFunction,
    g: Sequence[XFunction],
    standardize: float | None = 2.0,
) -> FloatArray:
    """Empirical balance of the working propensity along each function in *g*.

    Component j is the mean over source *s* of ``g_j(x) (p_tilde(a, x, z)^-1 / c - 1)
    delta_hat(x, z)``, with ``c = standardize``. Under the true propensity the
    standardized term ``p^-1 / 2 - 1`` has conditional mean zero, so near-zero
    components indicate partial balance along ``g_j``. ``standardize=None`` uses
    ``p^-1 - 1``.

    Parameters
    ----------
    p_tilde: function of (a, x, z)
        Working probability of the observed arm
    delta_hat: function of (x, z)
    g: sequence of functions of x
    """
    sd, _, a = _source_with_outcomes(data, s)
    p = np.asarray(p_tilde(a, sd.x, sd.z), dtype=float)
    if np.any(p <= 0) or np.any(p >= 1):
        raise ValidationError("working propensities must lie strictly inside (0, 1)")
    c = 1.0 if standardize is None else standardize
    term = (1.0 / (c * p) - 1.0) * np.asarray(delta_hat(sd.x, sd.z), dtype=float)
    return np.array([float(np.mean(gj(sd.x) * term)) for gj in g])


def _stats(values: FloatArray) -> dict[str, float]:
    return {
        "mean": float(np.mean(values)),
        "min": float(np.min(values)),
        "max": float(np.max(values)),
    }


def nuisance_summary(nuisances: NuisanceSet) -> dict[str, Any]:
    """Mean, min and max of every out-of-fold nuisance, per source; JSON-serializable"""
    shares = {str(s): v for s, v in nuisances.source_share.items()}
    out: dict[str, Any] = {"source_share": shares}
    for s, ns in nuisances.sources.items():
        entry = {
            "m_hat": _stats(ns.oof.m),
            "p_full": _stats(ns.oof.p_full),
            "p_marg": _stats(ns.oof.p_marg),
            "v_hat_treated": _stats(ns.oof.v[1]),
            "v_hat_control": _stats(ns.oof.v[-1]),
        }
        if nuisances.selection is not None:
            selection = nuisances.selection
            entry["pi_hat"] = _stats(selection.oof[s][:, selection.index(s)])
        out[str(s)] = entry
    return out
