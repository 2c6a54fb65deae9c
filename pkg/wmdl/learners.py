"""Weighted supervised learners and cross-fitting.

Three kinds are available for both regression and class probabilities:

- ``linear``: intercept plus the raw features
- ``poly2``: intercept, features, squares and pairwise products
- ``gbt``: gradient-boosted regression trees

Least-squares fits minimize
``sum(w (y - phi theta)^2) / sum(w) + ridge_penalty |theta|^2``, so every fit is
invariant to a positive rescaling of the weights. Rank-deficient unpenalized problems
return the minimum-norm solution.
"""
from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Any, Literal, overload

import numpy as np
import scipy.linalg
from scipy.special import expit, logit

from wmdl.common import (
    ConfigurationError,
    DimensionError,
    FitError,
    FloatArray,
    IntArray,
)
from wmdl.data import FoldAssignment
from wmdl.persistence import decode, encode, floats, register
from wmdl.utils import as_matrix, derive_seed, make_rng, thread_map

logger = logging.getLogger(__name__)

LearnerKind = Literal["linear", "poly2", "gbt"]
Task = Literal["regression", "probability"]

#: Maximum IRLS iterations and convergence tolerance on the coefficients
IRLS_MAX_ITER = 100
IRLS_TOL = 1e-8


@dataclass(frozen=True)
class LearnerSpec:
    """Which learner to fit, with its hyperparameters.

    ``ridge_penalty`` applies to linear and poly2, the boosting parameters to gbt.
    ``clip_eps`` bounds predicted probabilities to ``[clip_eps, 1 - clip_eps]``.
    """

    kind: LearnerKind = "linear"
    ridge_penalty: float = 0.0
    learning_rate: float = 0.05
    max_depth: int = 3
    n_rounds: int = 400
    min_leaf: int = 10
    subsample: float = 1.0
    clip_eps: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("linear", "poly2", "gbt"):
            raise ConfigurationError(f"unknown learner kind {self.kind!r}")
        if self.ridge_penalty < 0:
            raise ConfigurationError("ridge_penalty must be non-negative")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.max_depth < 1:
            raise ConfigurationError("max_depth must be at least 1")
        if self.n_rounds < 1:
            raise ConfigurationError("n_rounds must be at least 1")
        if self.min_leaf < 1:
            raise ConfigurationError("min_leaf must be at least 1")
        if not 0 < self.subsample <= 1:
            raise ConfigurationError("subsample must lie in (0, 1]")
        if not 0 < self.clip_eps < 0.5:
            raise ConfigurationError("clip_eps must lie in (0, 0.5)")


def expand_features(kind: str, x: FloatArray) -> FloatArray:
    """Design matrix of the linear or poly2 expansion

    Examples
    --------
    >>> expand_features("poly2", np.array([[2.0, 3.0]])).tolist()
    [[1.0, 2.0, 3.0, 4.0, 9.0, 6.0]]
    """
    ones = np.ones((len(x), 1))
    if kind == "linear":
        return np.hstack([ones, x])
    if kind == "poly2":
        pairs = [x[:, i] * x[:, j] for i, j in combinations(range(x.shape[1]), 2)]
        return np.hstack([ones, x, x**2, np.column_stack(pairs) if pairs else x[:, :0]])
    raise ConfigurationError(f"{kind!r} is not a basis expansion")


def _penalized_lstsq(
    phi: FloatArray, y: FloatArray, w: FloatArray, penalty: float
) -> FloatArray:
    """argmin ``sum(w (y - phi theta)^2) + penalty |theta|^2``; minimum norm if
    singular
    """
    sw = np.sqrt(w)
    a = phi * sw[:, None]
    b = y * sw
    p = phi.shape[1]
    if penalty > 0:
        a = np.vstack([a, np.sqrt(penalty) * np.eye(p)])
        b = np.concatenate([b, np.zeros(p)])
    coef, _, rank, _ = scipy.linalg.lstsq(a, b, lapack_driver="gelsd")
    if rank < p:
        logger.warning(
            "Rank-deficient design (rank %d < %d); using the minimum-norm solution",
            rank,
            p,
        )
    return np.asarray(coef, dtype=float)


def _check_inputs(
    features: FloatArray, targets: FloatArray, weights: FloatArray | None
) -> tuple[FloatArray, FloatArray, FloatArray]:
    x = as_matrix(features)
    y = np.asarray(targets, dtype=float).ravel()
    if len(x) == 0:
        raise FitError("cannot fit on zero rows")
    if len(y) != len(x):
        raise DimensionError(f"{len(x)} feature rows but {len(y)} targets")
    if weights is None:
        w = np.ones(len(x))
    else:
        w = np.asarray(weights, dtype=float).ravel()
        if len(w) != len(x):
            raise DimensionError(f"{len(x)} feature rows but {len(w)} weights")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise FitError("weights must be finite and non-negative")
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
        raise FitError("non-finite features or targets")
    total = w.sum()
    if total <= 0:
        raise FitError("all weights are zero")
    return x, y, w / total


class RegressionModel(ABC):
    """A fitted real-valued function of a fixed number of features"""

    d: int

    @abstractmethod
    def _predict(self, x: FloatArray) -> FloatArray:
        ...  # pragma: nocover

    def predict(self, x: FloatArray) -> FloatArray:
        """Predictions at every row of *x*"""
        return self._predict(as_matrix(x, self.d))

    @abstractmethod
    def to_dict(self) -> dict[str, Any]:
        ...  # pragma: nocover


@register("linear")
class LinearModel(RegressionModel):
    """``phi(x) . coef`` for the linear or poly2 expansion *phi*"""

    kind: str
    coef: FloatArray

    def __init__(self, kind: str, coef: FloatArray, d: int):
        self.kind = kind
        self.coef = np.asarray(coef, dtype=float)
        self.d = d

    def _predict(self, x: FloatArray) -> FloatArray:
        return expand_features(self.kind, x) @ self.coef

    def __str__(self) -> str:
        return f"<LinearModel: {self.kind}, d={self.d}>"

    __repr__ = __str__

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "coef": floats(self.coef), "d": self.d}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> LinearModel:
        return cls(d["kind"], np.array(d["coef"], dtype=float), int(d["d"]))


@dataclass(eq=False)
class Tree:
    """Binary regression tree stored as flat node arrays.

    ``feature[i] == -1`` marks a leaf. Internal nodes send ``x[feature] <= threshold``
    to ``left``, everything else to ``right``.
    """

    feature: IntArray
    threshold: FloatArray
    left: IntArray
    right: IntArray
    value: FloatArray

    def predict(self, x: FloatArray) -> FloatArray:
        node = np.zeros(len(x), dtype=np.int64)
        rows = np.arange(len(x))
        for _ in range(len(self.feature)):
            feat = self.feature[node]
            internal = feat >= 0
            if not internal.any():
                break
            go_left = x[rows, np.where(internal, feat, 0)] <= self.threshold[node]
            child = np.where(go_left, self.left[node], self.right[node])
            node = np.where(internal, child, node)
        return self.value[node]

    def to_dict(self) -> dict[str, Any]:
        return {
            "feature": floats(self.feature),
            "threshold": floats(self.threshold),
            "left": floats(self.left),
            "right": floats(self.right),
            "value": floats(self.value),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Tree:
        return cls(
            np.array(d["feature"], dtype=np.int64),
            np.array(d["threshold"], dtype=float),
            np.array(d["left"], dtype=np.int64),
            np.array(d["right"], dtype=np.int64),
            np.array(d["value"], dtype=float),
        )


class _TreeGrower:
    """Greedy depth-first growth of one weighted least-squares tree.

    Each feature is sorted once per fit. A node holds an ``(m, d)`` array whose column
    ``j`` lists the node's rows in increasing order of feature ``j``; children inherit
    stable partitions of it, so a node costs ``O(m d)`` rather than ``O(n d)``.
    """

    def __init__(self, x: FloatArray, order: IntArray, max_depth: int, min_leaf: int):
        self.x = x
        self.order = order
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self._goes_left = np.zeros(len(x), dtype=bool)

    def grow(self, r: FloatArray, w: FloatArray, rows: IntArray) -> Tree:
        self.r, self.w = r, w
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []
        if len(rows) == len(self.x):
            sorted_rows = self.order
        else:
            member = np.zeros(len(self.x), dtype=bool)
            member[rows] = True
            sorted_rows = self._partition(self.order, member)[0]
        self._node(sorted_rows, 0)
        return Tree(
            np.array(self.feature, dtype=np.int64),
            np.array(self.threshold, dtype=float),
            np.array(self.left, dtype=np.int64),
            np.array(self.right, dtype=np.int64),
            np.array(self.value, dtype=float),
        )

    @staticmethod
    def _partition(
        sorted_rows: IntArray, flag: np.ndarray
    ) -> tuple[IntArray, IntArray]:
        """Split every column of *sorted_rows* by ``flag[row]``, keeping the order"""
        mask = flag[sorted_rows].T
        cols = sorted_rows.T
        n_in = int(mask[0].sum())
        d = cols.shape[0]
        inside = cols[mask].reshape(d, n_in).T
        outside = cols[~mask].reshape(d, cols.shape[1] - n_in).T
        return inside, outside

    def _node(self, sorted_rows: IntArray, depth: int) -> int:
        idx = len(self.feature)
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        rows = sorted_rows[:, 0]
        w = self.w[rows]
        wsum = w.sum()
        self.value.append(float((w * self.r[rows]).sum() / wsum) if wsum > 0 else 0.0)

        if depth >= self.max_depth or len(rows) < 2 * self.min_leaf:
            return idx
        split = self._best_split(sorted_rows)
        if split is None:
            return idx
        feat, thr = split
        self._goes_left[rows] = self.x[rows, feat] <= thr
        left, right = self._partition(sorted_rows, self._goes_left)
        self.feature[idx] = feat
        self.threshold[idx] = thr
        self.left[idx] = self._node(left, depth + 1)
        self.right[idx] = self._node(right, depth + 1)
        return idx

    def _best_split(self, sorted_rows: IntArray) -> tuple[int, float] | None:
        m, d = sorted_rows.shape
        k = np.arange(1, m)
        sizes_ok = (k >= self.min_leaf) & (m - k >= self.min_leaf)
        if not sizes_ok.any():
            return None
        xs = self.x[sorted_rows, np.arange(d)]
        ws = self.w[sorted_rows]
        wr = ws * self.r[sorted_rows]
        cw = np.cumsum(ws, axis=0)[:-1]
        cwr = np.cumsum(wr, axis=0)[:-1]
        tw, twr = cw[-1] + ws[-1], cwr[-1] + wr[-1]
        ok = (xs[1:] > xs[:-1]) & sizes_ok[:, None]
        ok &= (cw > 0) & (tw - cw > 0)
        if not ok.any():
            return None
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = cwr**2 / cw + (twr - cwr) ** 2 / (tw - cw) - twr**2 / tw
        # feature-major, so ties go to the lowest feature, then the lowest cut
        gain = np.where(ok, gain, -np.inf).T
        j, i = np.unravel_index(int(np.argmax(gain)), gain.shape)
        if not gain[j, i] > 1e-12:
            return None
        return int(j), float((xs[i, j] + xs[i + 1, j]) / 2)


@register("gbt")
class BoostedTrees(RegressionModel):
    """Additive ensemble ``base + learning_rate * sum(tree(x))``.

    ``train_loss_`` holds the training loss after every boosting round; weighted squared
    error for regression, weighted log loss for probabilities.
    """

    base: float
    learning_rate: float
    trees: list[Tree]
    train_loss_: list[float]

    def __init__(
        self,
        base: float,
        learning_rate: float,
        trees: list[Tree],
        d: int,
        train_loss: list[float] | None = None,
    ):
        self.base = base
        self.learning_rate = learning_rate
        self.trees = trees
        self.d = d
        self.train_loss_ = train_loss or []

    def _predict(self, x: FloatArray) -> FloatArray:
        out = np.full(len(x), self.base)
        for tree in self.trees:
            out += self.learning_rate * tree.predict(x)
        return out

    def __str__(self) -> str:
        return f"<BoostedTrees: {len(self.trees)} trees, d={self.d}>"

    __repr__ = __str__

    def to_dict(self) -> dict[str, Any]:
        return {
            "base": self.base,
            "learning_rate": self.learning_rate,
            "d": self.d,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> BoostedTrees:
        return cls(
            float(d["base"]),
            float(d["learning_rate"]),
            [Tree.from_dict(t) for t in d["trees"]],
            int(d["d"]),
        )


def _boost(
    spec: LearnerSpec,
    x: FloatArray,
    y: FloatArray,
    w: FloatArray,
    logistic: bool,
) -> BoostedTrees:
    """Stagewise boosting. The logistic variant takes Newton steps, fitting each tree to
    the working response ``(y - p) / (p (1 - p))`` with weights ``w p (1 - p)``.
    """
    n = len(x)
    rng = make_rng(spec.seed)
    order = np.argsort(x, axis=0, kind="stable")
    grower = _TreeGrower(x, order, spec.max_depth, spec.min_leaf)
    n_sub = max(1, int(round(spec.subsample * n)))

    ybar = float(np.sum(w * y))
    base = float(logit(np.clip(ybar, 1e-6, 1 - 1e-6))) if logistic else ybar
    f = np.full(n, base)
    trees, losses = [], []
    for _ in range(spec.n_rounds):
        if logistic:
            p = expit(f)
            h = np.maximum(p * (1 - p), 1e-6)
            r, wt = (y - p) / h, w * h
        else:
            r, wt = y - f, w
        if n_sub == n:
            rows = np.arange(n)
        else:
            rows = np.sort(rng.choice(n, n_sub, replace=False))
        tree = grower.grow(r, wt, rows)
        f = f + spec.learning_rate * tree.predict(x)
        trees.append(tree)
        if logistic:
            p = np.clip(expit(f), 1e-15, 1 - 1e-15)
            losses.append(float(-np.sum(w * (y * np.log(p) + (1 - y) * np.log1p(-p)))))
        else:
            losses.append(float(np.sum(w * (y - f) ** 2)))
    return BoostedTrees(base, spec.learning_rate, trees, x.shape[1], losses)


def fit_regression(
    spec: LearnerSpec,
    features: FloatArray,
    targets: FloatArray,
    weights: FloatArray | None = None,
) -> RegressionModel:
    """Weighted regression of *targets* on *features*.

    Examples
    --------
    >>> x = np.array([[0.0], [1.0], [2.0]])
    >>> model = fit_regression(LearnerSpec("linear"), x, 1 + 2 * x[:, 0])
    >>> round(float(predict(model, [3.0])), 10)
    7.0
    """
    x, y, w = _check_inputs(features, targets, weights)
    if spec.kind == "gbt":
        return _boost(spec, x, y, w, logistic=False)
    coef = _penalized_lstsq(expand_features(spec.kind, x), y, w, spec.ridge_penalty)
    return LinearModel(spec.kind, coef, x.shape[1])


@overload
def predict(model: RegressionModel | ProbabilityModel, x: Sequence[float]) -> float:
    ...


@overload
def predict(
    model: RegressionModel | ProbabilityModel, x: FloatArray
) -> float | FloatArray:
    ...


def predict(model: RegressionModel | ProbabilityModel, x: Any) -> float | FloatArray:
    """Evaluate a fitted model at one point (a vector) or at every row of a matrix"""
    arr = np.asarray(x, dtype=float)
    out = model.predict(arr)
    return float(out[0]) if arr.ndim == 1 else out


@register("probability")
class ProbabilityModel:
    """Class probability ``P(label = 1 | x)``, clipped to ``[clip_eps, 1 - clip_eps]``.

    *scorer* predicts the log-odds.
    """

    scorer: RegressionModel
    clip_eps: float

    def __init__(self, scorer: RegressionModel, clip_eps: float):
        self.scorer = scorer
        self.clip_eps = clip_eps

    @property
    def d(self) -> int:
        return self.scorer.d

    @property
    def coef(self) -> FloatArray:
        """Log-odds coefficients of a linear or poly2 model"""
        if not isinstance(self.scorer, LinearModel):
            raise AttributeError("tree ensembles have no coefficients")
        return self.scorer.coef

    def predict(self, x: FloatArray) -> FloatArray:
        return np.clip(expit(self.scorer.predict(x)), self.clip_eps, 1 - self.clip_eps)

    def __str__(self) -> str:
        return f"<ProbabilityModel: {self.scorer}, clip={self.clip_eps}>"

    __repr__ = __str__

    def to_dict(self) -> dict[str, Any]:
        return {"scorer": encode(self.scorer), "clip_eps": self.clip_eps}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ProbabilityModel:
        return cls(decode(d["scorer"]), float(d["clip_eps"]))


def _irls(phi: FloatArray, t: FloatArray, w: FloatArray, penalty: float) -> FloatArray:
    """Penalized logistic regression, minimizing the weighted mean log loss plus
    ``penalty |coef|^2``
    """
    coef = np.zeros(phi.shape[1])
    for it in range(IRLS_MAX_ITER):
        eta = phi @ coef
        p = expit(eta)
        s = np.maximum(p * (1 - p), 1e-12)
        new = _penalized_lstsq(phi, eta + (t - p) / s, w * s, 2 * penalty)
        if not np.all(np.isfinite(new)):
            raise FitError("logistic regression diverged")
        step = float(np.max(np.abs(new - coef)))
        coef = new
        if step < IRLS_TOL:
            logger.debug("IRLS converged after %d iterations", it + 1)
            break
    else:
        logger.warning(
            "IRLS did not converge in %d iterations (last step %.3g); "
            "the classes may be separable, consider ridge_penalty > 0",
            IRLS_MAX_ITER,
            step,
        )
    return coef


def fit_probability(
    spec: LearnerSpec,
    features: FloatArray,
    labels: FloatArray,
    weights: FloatArray | None = None,
) -> ProbabilityModel:
    """Estimate ``P(label = 1 | x)``.

    Labels may be coded ``{0, 1}``, ``{-1, 1}`` or bool.
    """
    lab = np.asarray(labels).ravel()
    t = (lab > 0).astype(float)
    x, t, w = _check_inputs(features, t, weights)
    present = np.unique(t[w > 0])
    if len(present) < 2:
        only = lab[w > 0][0].item()
        raise FitError(
            f"labels contain a single class ({only}); both classes are required"
        )
    if spec.kind == "gbt":
        scorer: RegressionModel = _boost(spec, x, t, w, logistic=True)
    else:
        phi = expand_features(spec.kind, x)
        coef = _irls(phi, t, w, spec.ridge_penalty)
        scorer = LinearModel(spec.kind, coef, x.shape[1])
    return ProbabilityModel(scorer, spec.clip_eps)


@dataclass(eq=False)
class CrossFit:
    """Out-of-fold predictions plus one model per fold.

    ``predict`` at new points averages the fold models.
    """

    oof: FloatArray
    models: list[RegressionModel | ProbabilityModel]
    task: Task
    folds: IntArray = field(repr=False)

    def predict(self, x: FloatArray) -> FloatArray:
        xm = as_matrix(x)
        return np.mean([m.predict(xm) for m in self.models], axis=0)


def cross_fit(
    spec: LearnerSpec,
    features: FloatArray,
    targets: FloatArray,
    weights: FloatArray | None,
    folds: FoldAssignment | IntArray,
    task: Task = "regression",
    train_mask: np.ndarray | None = None,
    threads: int | None = 1,
) -> CrossFit:
    """Fit one model per fold on the other folds and predict the held-out rows.

    Parameters
    ----------
    spec: LearnerSpec
    features, targets, weights: arrays aligned by row
    folds: FoldAssignment or int array
        A FoldAssignment is pooled over its sources in ascending id order.
    task: "regression" or "probability"
    train_mask: bool array, optional
        Rows eligible for training. Out-of-fold predictions are still produced for every
        row, which lets per-arm models predict both arms of a held-out fold.
    threads: int
        Fold models are fitted concurrently on this many threads. Per-fold randomness is
        seeded by fold index, so results do not depend on scheduling.

    Raises
    ------
    FitError
        With ``fold`` set to the failing fold
    """
    x = as_matrix(features)
    y = np.asarray(targets).ravel()
    n = len(x)
    if isinstance(folds, FoldAssignment):
        fold = folds.pooled(sorted(folds.folds))
        n_folds = folds.n_folds
    else:
        fold = np.asarray(folds, dtype=np.int64).ravel()
        n_folds = int(fold.max()) + 1 if n else 0
    if len(fold) != n or len(y) != n:
        raise DimensionError(f"cross_fit inputs disagree on the number of rows ({n})")
    if n_folds < 2 or len(np.unique(fold)) != n_folds:
        raise ConfigurationError("folds must be 0..G-1 with G >= 2, all non-empty")
    if train_mask is None:
        mask = np.ones(n, dtype=bool)
    else:
        mask = np.asarray(train_mask, bool)
    w = None if weights is None else np.asarray(weights, dtype=float).ravel()

    def fit_fold(g: int) -> RegressionModel | ProbabilityModel:
        train = (fold != g) & mask
        if not train.any():
            raise FitError("empty training complement", fold=g)
        fold_spec = replace(spec, seed=derive_seed(spec.seed, g))
        wt = None if w is None else w[train]
        try:
            if task == "probability":
                return fit_probability(fold_spec, x[train], y[train], wt)
            return fit_regression(fold_spec, x[train], y[train], wt)
        except FitError as e:
            raise e.with_context(fold=g) from e

    models = thread_map(fit_fold, list(range(n_folds)), threads)
    oof = np.empty(n)
    for g, model in enumerate(models):
        held = fold == g
        oof[held] = model.predict(x[held])
    logger.debug("Cross-fitted %s %s on %d rows, %d folds", spec.kind, task, n, n_folds)
    return CrossFit(oof, models, task, fold)
