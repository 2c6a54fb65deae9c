"""Multi-source observations, CSV ingestion, fold assignment and the synthetic DGP.

Sources are numbered from 1. Source 0 is reserved for a covariates-only target
population (transfer mode). Treatments are coded ``+1`` / ``-1`` throughout the package.
"""
from __future__ import annotations

import logging
import re
from collections.abc import Callable, Iterable, Iterator, Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
from scipy import stats
from scipy.special import expit

from wmdl.common import (
    ConfigurationError,
    DimensionError,
    FloatArray,
    IntArray,
    ParseError,
    SchemaError,
    ValidationError,
)
from wmdl.utils import as_matrix, make_rng

logger = logging.getLogger(__name__)

#: Dimension of the shared covariates in the synthetic DGP
DGP_DIM = 4

Scenario = Literal["I", "II"]
EffectMode = Literal["homogeneous", "heterogeneous"]


def _main_effect_poly(x: FloatArray, z: FloatArray) -> FloatArray:
    out = 1.0 + x[:, 0] + x[:, 1] ** 2 - x[:, 2] * x[:, 3]
    if z.shape[1]:
        out = out + 0.5 * z[:, 0]
    return out


def _main_effect_linear(x: FloatArray, z: FloatArray) -> FloatArray:
    out = 1.0 + x[:, 0] - 0.5 * x[:, 1]
    if z.shape[1]:
        out = out + 0.5 * z[:, 0]
    return out


def _main_effect_zero(x: FloatArray, z: FloatArray) -> FloatArray:
    return np.zeros(len(x))


#: Families of main effects m_s(x, z), identical across sources
MAIN_EFFECTS: dict[str, Callable[[FloatArray, FloatArray], FloatArray]] = {
    "poly-1": _main_effect_poly,
    "linear-1": _main_effect_linear,
    "zero": _main_effect_zero,
}


def _check_dgp_x(x: Iterable[float] | FloatArray) -> tuple[FloatArray, bool]:
    arr = np.asarray(x, dtype=float)
    vector = arr.ndim == 1
    try:
        return as_matrix(arr, DGP_DIM), vector
    except DimensionError:
        raise DimensionError(
            f"treatment effect functions take {DGP_DIM} covariates; "
            f"got shape {arr.shape}"
        ) from None


def true_delta_hom(x: Iterable[float] | FloatArray) -> float | FloatArray:
    """Homogeneous treatment effect ``(x1 + x2 + x3) 1(x1 < 0.5) + x4``.

    Accepts a single point (returns a float) or a matrix with one point per row.

    Examples
    --------
    >>> true_delta_hom([1, 0.5, -0.5, 0.2])
    0.2
    """
    xm, vector = _check_dgp_x(x)
    out = (xm[:, 0] + xm[:, 1] + xm[:, 2]) * (xm[:, 0] < 0.5) + xm[:, 3]
    return float(out[0]) if vector else out


def true_delta_het(
    x: Iterable[float] | FloatArray,
    s: int | IntArray,
    n_sources: int | None = None,
) -> float | FloatArray:
    """Source-specific treatment effect of the heterogeneous DGP.

    ``x1 1(x1<0.5) 1(s odd) + x2 1(x2<0.5) 1(s<=7) + x3 1(x3<0.5) + x4 1(s odd)
    + 2 1(x1<0) 1(s even)``

    Parameters
    ----------
    x: vector of length 4 or matrix with 4 columns
    s: int or array of source ids, one per row
    n_sources: int, optional
        If given, *s* must lie in ``1..n_sources``

    Examples
    --------
    >>> round(true_delta_het([-0.5, 0.2, 0.6, 0.1], 2), 12)
    2.2
    >>> round(true_delta_het([-0.5, 0.2, 0.6, 0.1], 1), 12)
    -0.2
    """
    xm, vector = _check_dgp_x(x)
    sv = np.broadcast_to(np.asarray(s, dtype=np.int64), (len(xm),))
    upper = n_sources if n_sources is not None else np.iinfo(np.int64).max
    if np.any(sv < 1) or np.any(sv > upper):
        raise ValidationError(f"source id out of range 1..{n_sources}: {np.unique(sv)}")
    odd = (sv % 2 == 1).astype(float)
    even = 1.0 - odd
    out = (
        xm[:, 0] * (xm[:, 0] < 0.5) * odd
        + xm[:, 1] * (xm[:, 1] < 0.5) * (sv <= 7)
        + xm[:, 2] * (xm[:, 2] < 0.5)
        + xm[:, 3] * odd
        + 2.0 * (xm[:, 0] < 0) * even
    )
    return float(out[0]) if vector else out


@dataclass(frozen=True)
class Observation:
    """A single row of a multi-source dataset"""

    source_id: int
    y: float | None
    a: int | None
    x: FloatArray
    z: FloatArray


@dataclass(frozen=True, eq=False)
class SourceData:
    """All rows of one source, column-stacked.

    ``y`` and ``a`` are None for a covariates-only source.
    """

    source_id: int
    x: FloatArray
    z: FloatArray
    y: FloatArray | None = None
    a: IntArray | None = None

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 2:
            raise ValidationError(f"source {self.source_id}: x must be a matrix")
        z = np.asarray(self.z, dtype=float)
        if z.size == 0:
            z = np.zeros((len(x), 0))
        if z.ndim != 2 or len(z) != len(x):
            raise ValidationError(f"source {self.source_id}: z must have one row per x")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)
        if (self.y is None) != (self.a is None):
            raise ValidationError(
                f"source {self.source_id}: outcome and treatment must be both present "
                "or both absent"
            )
        if self.y is not None and self.a is not None:
            y = np.asarray(self.y, dtype=float).ravel()
            a = np.asarray(self.a).ravel()
            if len(y) != len(x) or len(a) != len(x):
                raise ValidationError(f"source {self.source_id}: ragged columns")
            if not np.all(np.isin(a, (1, -1))):
                raise ValidationError(
                    f"source {self.source_id}: treatment must be coded +1/-1"
                )
            if not np.all(np.isfinite(y)):
                raise ValidationError(f"source {self.source_id}: non-finite outcome")
            object.__setattr__(self, "y", y)
            object.__setattr__(self, "a", a.astype(np.int64))
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(z)):
            raise ValidationError(f"source {self.source_id}: non-finite covariates")

    @property
    def n(self) -> int:
        return len(self.x)

    @property
    def has_outcomes(self) -> bool:
        return self.y is not None

    def observations(self) -> Iterator[Observation]:
        for i in range(self.n):
            yield Observation(
                self.source_id,
                None if self.y is None else float(self.y[i]),
                None if self.a is None else int(self.a[i]),
                self.x[i],
                self.z[i],
            )


class MultiSourceData(Mapping[int, SourceData]):
    """Read-only mapping of source id -> :class:`SourceData`.

    Parameters
    ----------
    sources: iterable of SourceData
    target_source: int
        1 in data fusion; 0 in transfer mode, where source 0 holds covariates only
    truth: GroundTruth, optional
        Attached by :func:`simulate`

    Notes
    -----
    Row order is canonical: sources by ascending id, rows in insertion order. Every
    pooled array in the package (nuisance out-of-fold values, weights, pseudo-samples)
    follows it. Having both treatment arms in every fused source is a precondition of
    fitting, checked by :meth:`require_both_arms`, not of construction.
    """

    d_x: int
    d_z: dict[int, int]
    target_source: int
    truth: GroundTruth | None
    _sources: dict[int, SourceData]

    def __init__(
        self,
        sources: Iterable[SourceData],
        target_source: int = 1,
        truth: GroundTruth | None = None,
    ):
        srcs = sorted(sources, key=lambda sd: sd.source_id)
        if not srcs or sum(sd.n for sd in srcs) == 0:
            raise ValidationError("no observations")
        ids = [sd.source_id for sd in srcs]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"duplicate source ids: {ids}")
        if any(s < 0 for s in ids):
            raise ValidationError(f"source ids must be non-negative: {ids}")
        d_x = {sd.x.shape[1] for sd in srcs}
        if len(d_x) != 1:
            raise ValidationError(
                f"shared covariate dimension differs across sources: {d_x}"
            )
        if target_source not in ids:
            raise ValidationError(f"target source {target_source} has no observations")
        for sd in srcs:
            if sd.n == 0:
                raise ValidationError(f"source {sd.source_id} is empty")
            if sd.source_id == 0 and sd.has_outcomes:
                raise ValidationError("source 0 is reserved for covariates-only rows")
            if sd.source_id != 0 and not sd.has_outcomes:
                raise ValidationError(
                    f"source {sd.source_id}: only the transfer target (source 0) may "
                    "lack outcomes"
                )
        if target_source == 0 and len(ids) < 2:
            raise ValidationError(
                "transfer mode needs at least one source with outcomes"
            )

        self._sources = {sd.source_id: sd for sd in srcs}
        self.d_x = d_x.pop()
        self.d_z = {sd.source_id: sd.z.shape[1] for sd in srcs}
        self.target_source = target_source
        self.truth = truth

    def __getitem__(self, key: int) -> SourceData:
        return self._sources[key]

    def __iter__(self) -> Iterator[int]:
        return iter(self._sources)

    def __len__(self) -> int:
        return len(self._sources)

    def __str__(self) -> str:
        sizes = ", ".join(f"{s}: {sd.n}" for s, sd in self._sources.items())
        return f"<MultiSourceData: target={self.target_source} {{{sizes}}}>"

    __repr__ = __str__

    @property
    def source_ids(self) -> tuple[int, ...]:
        return tuple(self._sources)

    @property
    def outcome_sources(self) -> tuple[int, ...]:
        """Sources that carry outcomes and treatments, i.e. every source but 0"""
        return tuple(s for s, sd in self._sources.items() if sd.has_outcomes)

    @property
    def n_total(self) -> int:
        return sum(sd.n for sd in self._sources.values())

    @property
    def is_transfer(self) -> bool:
        return self.target_source == 0

    def observations(self) -> Iterator[Observation]:
        for sd in self._sources.values():
            yield from sd.observations()

    def restrict(self, source_ids: Iterable[int]) -> MultiSourceData:
        """Subset of the sources, keeping the target and the ground truth"""
        keep = set(source_ids)
        return MultiSourceData(
            [sd for s, sd in self._sources.items() if s in keep],
            target_source=self.target_source,
            truth=self.truth,
        )

    def replace_source(self, sd: SourceData) -> MultiSourceData:
        """Copy with one source swapped for *sd*"""
        srcs = dict(self._sources)
        srcs[sd.source_id] = sd
        return MultiSourceData(srcs.values(), self.target_source, self.truth)

    def require_both_arms(self, source_ids: Iterable[int] | None = None) -> None:
        """Raise ValidationError unless every listed source has both treatment arms"""
        for s in self.outcome_sources if source_ids is None else source_ids:
            a = self._sources[s].a
            assert a is not None
            for arm in (1, -1):
                if not np.any(a == arm):
                    raise ValidationError(
                        f"source {s} has no observation with a={arm:+d}"
                    )

    def stack_x(self, source_ids: Iterable[int] | None = None) -> FloatArray:
        ids = self.outcome_sources if source_ids is None else tuple(source_ids)
        return np.concatenate([self._sources[s].x for s in ids])

    def stack_source(self, source_ids: Iterable[int] | None = None) -> IntArray:
        ids = self.outcome_sources if source_ids is None else tuple(source_ids)
        return np.concatenate(
            [np.full(self._sources[s].n, s, dtype=np.int64) for s in ids]
        )

    def stack_outcomes(
        self, source_ids: Iterable[int] | None = None
    ) -> tuple[FloatArray, IntArray]:
        ids = self.outcome_sources if source_ids is None else tuple(source_ids)
        ys, as_ = [], []
        for s in ids:
            sd = self._sources[s]
            if sd.y is None or sd.a is None:
                raise ValidationError(f"source {s} has no outcomes")
            ys.append(sd.y)
            as_.append(sd.a)
        return np.concatenate(ys), np.concatenate(as_)


@dataclass(frozen=True)
class DgpConfig:
    """Configuration of the synthetic data-generating process.

    Parameters
    ----------
    n_sources: int
        K, the number of sources with outcomes
    n_total: int
        Observations across the K sources, split evenly; the remainder goes to the
        lowest source ids
    scenario: "I" or "II"
        "II" adds one source-specific covariate per source
    effect_mode: "homogeneous" or "heterogeneous"
    sigma_mu: float
        Spread of the source means of the truncated-normal covariates
    sigma_eps: float
        Outcome noise standard deviation
    seed: int
    main_effect_id: str
        Key of :data:`MAIN_EFFECTS`
    n_target_covariates: int
        If positive, add a covariates-only source 0 and make it the target
    target_half_width: float
        Source 0 covariates are uniform on ``[-h, h]^4``
    """

    n_sources: int = 10
    n_total: int = 3000
    scenario: Scenario = "I"
    effect_mode: EffectMode = "homogeneous"
    sigma_mu: float = 0.3
    sigma_eps: float = 0.1
    seed: int = 0
    main_effect_id: str = "poly-1"
    n_target_covariates: int = 0
    target_half_width: float = 1.0

    def __post_init__(self) -> None:
        if self.n_sources < 1:
            raise ConfigurationError(f"n_sources must be >= 1; got {self.n_sources}")
        if self.n_total < self.n_sources:
            raise ConfigurationError(
                f"n_total ({self.n_total}) must be at least "
                f"n_sources ({self.n_sources})"
            )
        if self.scenario not in ("I", "II"):
            raise ConfigurationError(
                f"scenario must be 'I' or 'II'; got {self.scenario!r}"
            )
        if self.effect_mode not in ("homogeneous", "heterogeneous"):
            raise ConfigurationError(f"unknown effect_mode {self.effect_mode!r}")
        if self.sigma_mu < 0 or self.sigma_eps < 0:
            raise ConfigurationError("sigma_mu and sigma_eps must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must be a 64-bit unsigned integer")
        if self.main_effect_id not in MAIN_EFFECTS:
            raise ConfigurationError(
                f"unknown main_effect_id {self.main_effect_id!r}; "
                f"expected one of {sorted(MAIN_EFFECTS)}"
            )
        if self.n_target_covariates < 0:
            raise ConfigurationError("n_target_covariates must be non-negative")
        if self.n_target_covariates and self.effect_mode != "homogeneous":
            raise ConfigurationError("a transfer target requires homogeneous effects")
        if not 0 < self.target_half_width <= 1:
            raise ConfigurationError("target_half_width must lie in (0, 1]")

    @property
    def d_z(self) -> int:
        return 1 if self.scenario == "II" else 0

    @property
    def target_source(self) -> int:
        return 0 if self.n_target_covariates else 1

    def source_sizes(self) -> dict[int, int]:
        base, rem = divmod(self.n_total, self.n_sources)
        return {s: base + (s <= rem) for s in range(1, self.n_sources + 1)}


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """The true nuisance and effect functions behind a simulated dataset"""

    config: DgpConfig
    beta: FloatArray
    mu: dict[int, FloatArray] = field(repr=False)

    def delta(self, x: FloatArray, s: int | IntArray | None = None) -> FloatArray:
        """True treatment effect function (half the CATE) at every row of *x*"""
        xm = as_matrix(x, DGP_DIM)
        if self.config.effect_mode == "homogeneous":
            return np.asarray(true_delta_hom(xm), dtype=float)
        if s is None:
            s = self.config.target_source
        return np.asarray(true_delta_het(xm, s, self.config.n_sources), dtype=float)

    def main_effect(self, x: FloatArray, z: FloatArray | None = None) -> FloatArray:
        xm = as_matrix(x, DGP_DIM)
        if z is None or np.size(z) == 0:
            zm = np.zeros((len(xm), 0))
        else:
            zm = np.asarray(z, dtype=float).reshape(len(xm), -1)
        return MAIN_EFFECTS[self.config.main_effect_id](xm, zm)

    def propensity(self, x: FloatArray, z: FloatArray | None = None) -> FloatArray:
        """True ``P(A=+1 | x, z)``"""
        xm = as_matrix(x, DGP_DIM)
        cov = xm if z is None or self.config.d_z == 0 else np.column_stack([xm, z])
        return expit(cov @ self.beta)

    def marginal_propensity(
        self, x: FloatArray, s: int, n_draws: int = 2000
    ) -> FloatArray:
        """True ``P(A=+1 | x, S=s)``, integrating the source covariate out.

        Exact without source covariates; Monte-Carlo over *n_draws* draws of z
        otherwise.
        """
        xm = as_matrix(x, DGP_DIM)
        if self.config.d_z == 0:
            return self.propensity(xm)
        rng = make_rng(self.config.seed, 9, s)
        z = _truncated_normal(rng, np.zeros(1), n_draws)[:, 0]
        lin = xm @ self.beta[:DGP_DIM]
        return expit(lin[:, None] + self.beta[DGP_DIM] * z[None, :]).mean(axis=1)

    @property
    def variance(self) -> float:
        """Conditional outcome variance, identical in every arm and source"""
        return self.config.sigma_eps**2

    def density(self, x: FloatArray, s: int) -> FloatArray:
        """Exact covariate density ``f(x | S=s)``"""
        xm = as_matrix(x, DGP_DIM)
        if s == 0:
            h = self.config.target_half_width
            inside = np.all(np.abs(xm) <= h, axis=1)
            return inside * (1.0 / (2 * h)) ** DGP_DIM
        if s == 1:
            inside = np.all(np.abs(xm) <= 1, axis=1)
            return inside * 0.5**DGP_DIM
        mu = self.mu[s]
        pdf = stats.truncnorm.pdf(xm, -1 - mu, 1 - mu, loc=mu, scale=1.0)
        return np.prod(pdf, axis=1)

    def selection_propensity(
        self, x: FloatArray, shares: Mapping[int, float]
    ) -> FloatArray:
        """Exact ``P(S=s | x)`` for the given source shares; one column per source,
        ordered like *shares*.
        """
        dens = np.column_stack([shares[s] * self.density(x, s) for s in shares])
        total = dens.sum(axis=1, keepdims=True)
        return dens / np.where(total > 0, total, 1.0)

    def sample_covariates(
        self, s: int, n: int, rng: np.random.Generator
    ) -> tuple[FloatArray, FloatArray]:
        """Draw *n* rows of ``(x, z)`` from source *s*'s covariate distribution"""
        if s == 0:
            h = self.config.target_half_width
            return rng.uniform(-h, h, size=(n, DGP_DIM)), np.zeros((n, 0))
        if s == 1:
            x = rng.uniform(-1.0, 1.0, size=(n, DGP_DIM))
        else:
            x = _truncated_normal(rng, self.mu[s], n)
        if self.config.d_z:
            z = _truncated_normal(rng, np.zeros(1), n)
        else:
            z = np.zeros((n, 0))
        return x, z


def _truncated_normal(
    rng: np.random.Generator,
    mean: FloatArray,
    n: int,
    low: float = -1.0,
    high: float = 1.0,
) -> FloatArray:
    """Unit-variance normal with independent coordinates, truncated to [low, high] by
    per-coordinate rejection
    """
    out = np.empty((n, len(mean)))
    for j, m in enumerate(mean):
        filled = 0
        while filled < n:
            draw = rng.normal(m, 1.0, size=2 * (n - filled) + 8)
            draw = draw[(draw >= low) & (draw <= high)][: n - filled]
            out[filled : filled + len(draw), j] = draw
            filled += len(draw)
    return out


#: Attempts at drawing a treatment coefficient that leaves no source with an empty arm
MAX_BETA_DRAWS = 1000


def simulate(config: DgpConfig) -> MultiSourceData:
    """Draw a multi-source dataset from the synthetic DGP.

    Source 1 has uniform covariates on ``[-1, 1]^4``; sources 2..K truncated normals
    with random means. Treatment follows a logistic model with standard normal
    coefficients, redrawn until every source has both arms. The returned data carries a
    :class:`GroundTruth` in ``.truth``.

    Examples
    --------
    >>> data = simulate(DgpConfig(n_sources=3, n_total=90, seed=7))
    >>> [data[s].n for s in data]
    [30, 30, 30]
    """
    world = make_rng(config.seed, 0)
    mu = {
        s: world.normal(0.0, config.sigma_mu, size=DGP_DIM)
        for s in range(2, config.n_sources + 1)
    }
    beta_dim = DGP_DIM + config.d_z
    truth = GroundTruth(config, np.zeros(beta_dim), mu)

    covariates = {
        s: truth.sample_covariates(s, n, make_rng(config.seed, 1, s))
        for s, n in config.source_sizes().items()
    }
    uniforms = {
        s: make_rng(config.seed, 3, s).uniform(size=len(x))
        for s, (x, _) in covariates.items()
    }

    for attempt in range(MAX_BETA_DRAWS):
        beta = make_rng(config.seed, 2, attempt).standard_normal(beta_dim)
        truth = replace(truth, beta=beta)
        treatments = {
            s: np.where(uniforms[s] < truth.propensity(x, z), 1, -1)
            for s, (x, z) in covariates.items()
        }
        if all(np.any(a == 1) and np.any(a == -1) for a in treatments.values()):
            break
        logger.warning("Redrawing treatment coefficients: a source has an empty arm")
    else:
        raise ConfigurationError(
            "could not draw treatment coefficients leaving both arms in every source; "
            "increase n_total"
        )

    sources = []
    for s, (x, z) in covariates.items():
        a = treatments[s]
        noise = make_rng(config.seed, 4, s).standard_normal(len(x))
        m = truth.main_effect(x, z)
        y = m + a * truth.delta(x, s) + config.sigma_eps * noise
        sources.append(SourceData(s, x, z, y, a))

    if config.n_target_covariates:
        x0, z0 = truth.sample_covariates(
            0, config.n_target_covariates, make_rng(config.seed, 1, 0)
        )
        sources.append(SourceData(0, x0, z0))

    data = MultiSourceData(sources, target_source=config.target_source, truth=truth)
    logger.debug("Simulated %s", data)
    return data


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping of a multi-source CSV file.

    Parameters
    ----------
    source, outcome, treatment: str
        Column names
    shared: tuple of str, optional
        Shared covariate columns. Default: every ``x<k>`` column, ordered by k.
    extra: mapping of source id -> tuple of str, optional
        Source-specific covariate columns. Default: for every source, the ``z<k>``
        columns that are filled on all of its rows.
    transfer_target: int, optional
        Source whose rows are covariates-only. Its outcome and treatment cells are
        ignored and may be empty. The data target becomes this source.
    """

    source: str = "source"
    outcome: str = "y"
    treatment: str = "a"
    shared: tuple[str, ...] | None = None
    extra: Mapping[int, tuple[str, ...]] | None = None
    transfer_target: int | None = None


_X_COLUMN = re.compile(r"^x(\d+)$")
_Z_COLUMN = re.compile(r"^z(\d+)$")


def _numbered(columns: Iterable[str], pattern: re.Pattern[str]) -> tuple[str, ...]:
    found = [(int(m.group(1)), c) for c in columns if (m := pattern.match(c))]
    return tuple(c for _, c in sorted(found))


def _to_numeric(raw: pd.Series, column: str) -> pd.Series:
    stripped = raw.str.strip()
    values = pd.to_numeric(stripped.where(stripped != ""), errors="coerce")
    bad = values.isna() & (stripped != "")
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise ParseError(
            f"non-numeric value {raw.iloc[row]!r} in column {column!r} at row {row}",
            row=row,
            column=column,
        )
    return values


def load_csv(path: str | Path, schema: CsvSchema | None = None) -> MultiSourceData:
    """Read a multi-source CSV file.

    Treatments may be coded ``{0, 1}`` or ``{-1, 1}``; 0 maps to -1.

    Raises
    ------
    SchemaError
        A core or shared column is missing
    ParseError
        A used cell is not numeric
    ValidationError
        Empty file, bad treatment code, missing values, missing source-specific columns
    """
    schema = schema or CsvSchema()
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise ValidationError("no observations") from None
    if df.empty:
        raise ValidationError("no observations")

    shared = schema.shared or _numbered(df.columns, _X_COLUMN)
    if not shared:
        raise SchemaError("no shared covariate columns (x1, x2, ...)")
    required = (schema.source, schema.outcome, schema.treatment, *shared)
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise SchemaError(f"missing columns: {missing}")

    src = _to_numeric(df[schema.source], schema.source)
    if src.isna().any() or not np.all(src == np.round(src)):
        row = int(np.flatnonzero((src.isna() | (src != np.round(src))).to_numpy())[0])
        raise ValidationError(f"source id must be an integer (row {row})")
    src_ids = src.to_numpy(dtype=np.int64)

    x = np.column_stack([_to_numeric(df[c], c).to_numpy(dtype=float) for c in shared])
    if np.isnan(x).any():
        row = int(np.flatnonzero(np.isnan(x).any(axis=1))[0])
        raise ValidationError(f"missing shared covariate at row {row}")
    # outcome and treatment cells of covariates-only rows are never read
    covariates_only = np.zeros(len(src_ids), dtype=bool)
    if schema.transfer_target is not None:
        covariates_only = src_ids == schema.transfer_target
    y, a = (
        _to_numeric(df[c].where(~covariates_only, ""), c).to_numpy(dtype=float)
        for c in (schema.outcome, schema.treatment)
    )

    z_columns = _numbered(df.columns, _Z_COLUMN)
    sources = []
    for s in sorted(set(src_ids.tolist())):
        rows = src_ids == s
        idx = np.flatnonzero(rows)
        if schema.extra is not None:
            names = tuple(schema.extra.get(s, ()))
            absent = [c for c in names if c not in df.columns]
            if absent:
                raise ValidationError(
                    f"source {s}: declared columns {absent} not in file"
                )
        else:
            names = tuple(
                c for c in z_columns if (df.loc[rows, c].str.strip() != "").all()
            )
        if names:
            z = np.column_stack(
                [_to_numeric(df[c], c).to_numpy(dtype=float)[rows] for c in names]
            )
            if np.isnan(z).any():
                row = int(idx[np.flatnonzero(np.isnan(z).any(axis=1))[0]])
                raise ValidationError(
                    f"source {s}: missing source-specific value at row {row}"
                )
        else:
            z = np.zeros((len(idx), 0))

        if s == schema.transfer_target:
            sources.append(SourceData(s, x[rows], z))
            continue
        ys, as_ = y[rows], a[rows]
        if np.isnan(ys).any() or np.isnan(as_).any():
            row = int(idx[np.flatnonzero(np.isnan(ys) | np.isnan(as_))[0]])
            raise ValidationError(
                f"source {s}: missing outcome or treatment at row {row}; only the "
                "transfer target may omit them"
            )
        if not np.all(np.isin(as_, (-1.0, 0.0, 1.0))):
            row = int(idx[np.flatnonzero(~np.isin(as_, (-1.0, 0.0, 1.0)))[0]])
            raise ValidationError(
                f"treatment value {a[row]:g} at row {row} is not one of 0, 1, -1"
            )
        arm = np.where(as_ == 0, -1, as_).astype(int)
        sources.append(SourceData(s, x[rows], z, ys, arm))

    target = schema.transfer_target if schema.transfer_target is not None else 1
    data = MultiSourceData(sources, target_source=target)
    logger.info("Loaded %d rows from %s: %s", data.n_total, path, data)
    return data


def load_covariates(
    path: str | Path, shared: tuple[str, ...] | None = None, source: str = "source"
) -> tuple[FloatArray, IntArray | None]:
    """Shared covariates of the points in a CSV file, plus their source ids when the
    file has a *source* column
    """
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise ValidationError("no observations") from None
    if df.empty:
        raise ValidationError("no observations")
    shared = shared or _numbered(df.columns, _X_COLUMN)
    missing = [c for c in shared if c not in df.columns]
    if not shared or missing:
        raise SchemaError(f"missing covariate columns: {missing or 'x1, x2, ...'}")
    x = np.column_stack([_to_numeric(df[c], c).to_numpy(dtype=float) for c in shared])
    if np.isnan(x).any():
        row = int(np.flatnonzero(np.isnan(x).any(axis=1))[0])
        raise ValidationError(f"missing covariate at row {row}")
    if source not in df.columns:
        return x, None
    src = _to_numeric(df[source], source)
    if src.isna().any():
        raise ValidationError("missing source id")
    return x, src.to_numpy(dtype=np.int64)


def write_csv(data: MultiSourceData, path: str | Path) -> None:
    """Write *data* in the layout read by :func:`load_csv` with the default schema.

    Source-specific covariates go to ``z1..z<max d_z>``; cells a source does not have
    are left empty.
    """
    d_z = max(data.d_z.values())
    frames = []
    for s, sd in data.items():
        frame = pd.DataFrame(sd.x, columns=[f"x{j + 1}" for j in range(data.d_x)])
        frame.insert(0, "source", s)
        frame.insert(1, "y", np.nan if sd.y is None else sd.y)
        arm = [pd.NA] * sd.n if sd.a is None else sd.a
        frame.insert(2, "a", pd.array(arm, dtype="Int64"))
        for j in range(d_z):
            frame[f"z{j + 1}"] = sd.z[:, j] if j < sd.z.shape[1] else np.nan
        frames.append(frame)
    pd.concat(frames, ignore_index=True).to_csv(path, index=False, na_rep="")
    logger.info("Wrote %d rows to %s", data.n_total, path)


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    """Fold index of every row, per source.

    ``folds[s][i]`` is the fold of the i-th row of source s.
    """

    folds: Mapping[int, IntArray]
    n_folds: int

    def for_source(self, s: int) -> IntArray:
        return self.folds[s]

    def pooled(self, source_ids: Iterable[int]) -> IntArray:
        """Fold vector over the canonical row order of *source_ids*"""
        return np.concatenate([self.folds[s] for s in source_ids])

    def sizes(self, s: int) -> IntArray:
        return np.bincount(self.folds[s], minlength=self.n_folds)


def split_folds(data: MultiSourceData, n_folds: int, seed: int) -> FoldAssignment:
    """Partition each source at random into *n_folds* folds whose sizes differ by at
    most one.

    Examples
    --------
    >>> data = simulate(DgpConfig(n_sources=2, n_total=602, seed=1))
    >>> sorted(split_folds(data, 3, seed=0).sizes(1).tolist())
    [100, 100, 101]
    """
    if n_folds < 2:
        raise ConfigurationError(f"at least 2 folds are needed; got {n_folds}")
    folds = {}
    for s, sd in data.items():
        if sd.n < n_folds:
            raise ConfigurationError(
                f"source {s} has {sd.n} rows, fewer than the {n_folds} folds"
            )
        perm = make_rng(seed, s).permutation(sd.n)
        fold = np.empty(sd.n, dtype=np.int64)
        fold[perm] = np.arange(sd.n) % n_folds
        folds[s] = fold
    return FoldAssignment(folds, n_folds)
