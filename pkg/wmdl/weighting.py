"""Source weights of the weighted multi-source direct learner.

The information-aware weight of source *s* at *x* is the product of a transfer term,

    R_s(x) = f(x | S=target) / f(x | S=s) = P(S=s) pi_target(x) / (P(S=target) pi_s(x)),

which reweights source *s* towards the target population, and an information term,

    I_s(x) = 1 / (V_{+1|s}(x) / p_{+1|s}(x) + V_{-1|s}(x) / p_{-1|s}(x)),

which favours balanced treatment and low outcome noise. ``R_target == 1`` identically.
"""
from __future__ import annotations

import logging
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import pandas as pd

from wmdl.common import ConfigurationError, ConsistencyError, FloatArray, IntArray
from wmdl.data import MultiSourceData
from wmdl.nuisance import NuisanceSet
from wmdl.utils import as_matrix

logger = logging.getLogger(__name__)

WeightKind = Literal["constant", "information_aware", "transfer"]
Density = Callable[[FloatArray], FloatArray]


@dataclass(frozen=True)
class WeightSpec:
    """Weight rule.

    Parameters
    ----------
    kind: "constant", "information_aware" or "transfer"
    target_source: int
        1 for data fusion, 0 for transfer to a covariates-only target. Defaults to 0
        for the transfer kind and 1 otherwise.
    densities: mapping of source id -> density of x, optional
        Use the density-ratio form of the transfer term with these densities instead
        of the selection propensities. A point where the target density is 0 gets a
        weight of exactly 0.
    cap_quantile: float or None
        Combined weights above this quantile of the batch are truncated to it before
        normalization. None disables the cap.
    """

    kind: WeightKind = "information_aware"
    target_source: int | None = None
    densities: Mapping[int, Density] | None = field(default=None, compare=False)
    cap_quantile: float | None = 0.995

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "information_aware", "transfer"):
            raise ConfigurationError(f"unknown weight kind {self.kind!r}")
        if self.target_source is None:
            target = 0 if self.kind == "transfer" else 1
            object.__setattr__(self, "target_source", target)
        if self.kind == "transfer" and self.target_source != 0:
            raise ConfigurationError("transfer weights target source 0")
        if self.kind != "transfer" and self.target_source == 0:
            raise ConfigurationError("source 0 is only a target for transfer weights")
        if self.cap_quantile is not None and not 0 < self.cap_quantile <= 1:
            raise ConfigurationError("cap_quantile must lie in (0, 1]")

    @property
    def target(self) -> int:
        assert self.target_source is not None
        return self.target_source


@dataclass(frozen=True, eq=False)
class WeightComponents:
    """Transfer term, information term and their product, one value per point"""

    transfer_term: FloatArray
    information_term: FloatArray
    combined: FloatArray


def information_term(
    v_pos: FloatArray, v_neg: FloatArray, p_pos: FloatArray
) -> FloatArray:
    """``1 / (V_{+1} / p + V_{-1} / (1 - p))``

    Examples
    --------
    >>> round(float(information_term(1.0, 1.0, 0.9)), 12)  # reduces to p (1 - p)
    0.09
    """
    p = np.asarray(p_pos, dtype=float)
    return 1.0 / (np.asarray(v_pos) / p + np.asarray(v_neg) / (1.0 - p))


def _transfer_term(
    s: int,
    target: int,
    x: FloatArray,
    nuisances: NuisanceSet,
    densities: Mapping[int, Density] | None,
    pi: FloatArray | None = None,
) -> FloatArray:
    """R_s at every row of *x*. *pi* optionally holds precomputed selection
    propensities with one column per selection source.
    """
    if s == target:
        return np.ones(len(x))
    if densities is not None:
        try:
            f_t, f_s = densities[target], densities[s]
        except KeyError as e:
            raise ConfigurationError(
                f"no density supplied for source {e.args[0]}"
            ) from None
        num = np.asarray(f_t(x), dtype=float)
        den = np.asarray(f_s(x), dtype=float)
        return np.divide(num, den, out=np.zeros(len(x)), where=num > 0)
    if target not in nuisances.source_share:
        raise ConfigurationError(f"target source {target} has no covariate rows")
    sel = nuisances.selection
    if sel is None:
        raise ConfigurationError("transfer terms need selection propensities")
    if pi is None:
        pi = sel.predict(x)
    share = nuisances.source_share[s] / nuisances.source_share[target]
    return share * pi[:, sel.index(target)] / pi[:, sel.index(s)]


def information_weight(
    s: int,
    x: FloatArray,
    nuisances: NuisanceSet,
    target: int = 1,
    densities: Mapping[int, Density] | None = None,
) -> WeightComponents:
    """Information-aware weight of source *s* at new points *x*

    The treatment propensity is the one on shared covariates, ``p_marg``.
    """
    xm = as_matrix(x)
    ns = nuisances[s]
    r = _transfer_term(s, target, xm, nuisances, densities)
    info = information_term(ns.v_hat[1](xm), ns.v_hat[-1](xm), ns.p_marg(xm))
    return WeightComponents(r, info, r * info)


def constant_weight(s: int, x: FloatArray) -> WeightComponents:
    """The unit weight of the unweighted learners"""
    ones = np.ones(len(as_matrix(x)))
    return WeightComponents(ones, ones, ones)


@dataclass(frozen=True, eq=False)
class BatchWeights:
    """Normalized weights of every row with outcomes, in canonical row order.

    ``transfer_term``, ``information_term`` and ``raw`` are before capping and
    normalization; ``weights`` has pooled mean 1.
    """

    weights: FloatArray
    source: IntArray
    transfer_term: FloatArray
    information_term: FloatArray
    raw: FloatArray
    cap: float | None
    n_capped: int
    kind: str

    def __len__(self) -> int:
        return len(self.weights)


def batch_weights(
    data: MultiSourceData, nuisances: NuisanceSet, spec: WeightSpec
) -> BatchWeights:
    """Evaluate the weight of *spec* at every row with outcomes, using out-of-fold
    nuisances, then cap and normalize to pooled mean 1.
    """
    ids = data.outcome_sources
    source = data.stack_source(ids)
    target = spec.target
    if spec.kind == "transfer" and not (0 in data and not data[0].has_outcomes):
        raise ConfigurationError(
            "transfer weights need a covariates-only target block for source 0"
        )
    if spec.kind == "constant":
        ones = np.ones(len(source))
        return BatchWeights(ones, source, ones, ones, ones, None, 0, spec.kind)
    if target not in data:
        raise ConfigurationError(f"target source {target} is not in the data")

    rs, infos = [], []
    for s in ids:
        sd = data[s]
        ns = nuisances[s]
        oof = ns.oof
        if len(oof.p_marg) != sd.n or len(oof.v[1]) != sd.n:
            raise ConsistencyError(
                f"nuisances of source {s} are not aligned with its rows"
            )
        pi = None
        if s != target and spec.densities is None and nuisances.selection is not None:
            pi = nuisances.selection.oof[s]
            if len(pi) != sd.n:
                raise ConsistencyError(
                    f"selection propensities of source {s} misaligned"
                )
        rs.append(_transfer_term(s, target, sd.x, nuisances, spec.densities, pi))
        infos.append(information_term(oof.v[1], oof.v[-1], oof.p_marg))
    r = np.concatenate(rs)
    info = np.concatenate(infos)
    raw = r * info
    if not np.all(np.isfinite(raw)) or np.any(raw < 0):
        raise ConsistencyError("weights must be finite and non-negative")

    w, cap, n_capped = raw, None, 0
    if spec.cap_quantile is not None and spec.cap_quantile < 1:
        cap = float(np.quantile(raw, spec.cap_quantile))
        n_capped = int(np.sum(raw > cap))
        w = np.minimum(raw, cap)
        logger.debug("Capped %d weights at %.4g", n_capped, cap)
    total = w.sum()
    if total <= 0:
        raise ConsistencyError(
            "every weight is zero; the target population is not covered"
        )
    w = w * (len(w) / total)
    return BatchWeights(w, source, r, info, raw, cap, n_capped, spec.kind)


def weight_diagnostics(batch: BatchWeights, bins: int = 10) -> pd.DataFrame:
    """Per-source histogram of the normalized weights plus a summary of the
    transfer/information decomposition; one row per source and bin.
    """
    cap = batch.cap
    edges = np.linspace(0.0, float(batch.weights.max()) or 1.0, bins + 1)
    rows = []
    for s in np.unique(batch.source):
        sel = batch.source == s
        counts, _ = np.histogram(batch.weights[sel], bins=edges)
        summary = {
            "source": int(s),
            "n": int(sel.sum()),
            "weight_mean": float(batch.weights[sel].mean()),
            "transfer_mean": float(batch.transfer_term[sel].mean()),
            "information_mean": float(batch.information_term[sel].mean()),
            "n_capped": 0 if cap is None else int(np.sum(batch.raw[sel] > cap)),
        }
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            rows.append({**summary, "bin_low": lo, "bin_high": hi, "count": int(c)})
    return pd.DataFrame(rows)
