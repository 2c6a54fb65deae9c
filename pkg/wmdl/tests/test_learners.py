import logging

import numpy as np
import pytest

from wmdl.common import ConfigurationError, DimensionError, FitError
from wmdl.data import FoldAssignment
from wmdl.learners import (
    BoostedTrees,
    LearnerSpec,
    LinearModel,
    cross_fit,
    expand_features,
    fit_probability,
    fit_regression,
    predict,
)
from wmdl.utils import make_rng


@pytest.mark.parametrize(
    "kwargs",
    [
        {"kind": "forest"},
        {"ridge_penalty": -1.0},
        {"learning_rate": 0.0},
        {"max_depth": 0},
        {"n_rounds": 0},
        {"min_leaf": 0},
        {"subsample": 1.5},
        {"clip_eps": 0.5},
    ],
)
def test_learner_spec_errors(kwargs):
    with pytest.raises(ConfigurationError):
        LearnerSpec(**kwargs)


def test_expand_features():
    x = np.arange(6.0).reshape(2, 3)
    assert expand_features("linear", x).shape == (2, 4)
    assert expand_features("poly2", x).shape == (2, 10)
    with pytest.raises(ConfigurationError):
        expand_features("gbt", x)


def test_linear_matches_normal_equations():
    """Weighted least squares against the closed-form normal equations"""
    for seed in range(5):
        rng = make_rng(seed)
        x = rng.standard_normal((50, 3))
        y = rng.standard_normal(50)
        w = rng.uniform(0.1, 2.0, 50)
        model = fit_regression(LearnerSpec("linear"), x, y, w)
        phi = expand_features("linear", x)
        expected = np.linalg.solve(phi.T @ (w[:, None] * phi), phi.T @ (w * y))
        np.testing.assert_allclose(model.coef, expected, atol=1e-8)


def test_ridge_objective_is_normalized():
    rng = make_rng(1)
    x = rng.standard_normal((40, 2))
    y = rng.standard_normal(40)
    w = rng.uniform(0.5, 1.5, 40)
    lam = 0.3
    model = fit_regression(LearnerSpec("linear", ridge_penalty=lam), x, y, w)
    phi = expand_features("linear", x)
    wn = w / w.sum()
    gram = phi.T @ (wn[:, None] * phi) + lam * np.eye(3)
    expected = np.linalg.solve(gram, phi.T @ (wn * y))
    np.testing.assert_allclose(model.coef, expected, atol=1e-10)

    # scaling and replicating weights leave the fit unchanged, with or without penalty
    scaled = fit_regression(LearnerSpec("linear", ridge_penalty=lam), x, y, 7 * w)
    np.testing.assert_allclose(scaled.coef, model.coef, atol=1e-10)
    rep = fit_regression(
        LearnerSpec("linear", ridge_penalty=lam),
        np.vstack([x, x]),
        np.concatenate([y, y]),
        np.concatenate([w, w]),
    )
    np.testing.assert_allclose(rep.coef, model.coef, atol=1e-10)


def test_linear_exact_fit():
    x = np.linspace(-1, 1, 20)[:, None]
    model = fit_regression(LearnerSpec("poly2"), x, 1 - x[:, 0] + 3 * x[:, 0] ** 2)
    assert predict(model, [0.5]) == pytest.approx(1.25, abs=1e-10)
    out = predict(model, np.array([[0.0], [1.0]]))
    np.testing.assert_allclose(out, [1.0, 3.0], atol=1e-10)


def test_rank_deficient(caplog):
    x = np.ones((10, 2))
    x[:, 1] = np.arange(10)
    x = np.hstack([x, x[:, :1]])
    with caplog.at_level(logging.WARNING, logger="wmdl.learners"):
        model = fit_regression(LearnerSpec("linear"), x, np.arange(10.0))
    assert "Rank-deficient" in caplog.text
    assert np.all(np.isfinite(model.predict(x)))


def test_regression_input_errors():
    x = np.zeros((5, 2))
    with pytest.raises(FitError, match="all weights are zero"):
        fit_regression(LearnerSpec(), x, np.zeros(5), np.zeros(5))
    with pytest.raises(FitError):
        fit_regression(LearnerSpec(), x, np.zeros(5), -np.ones(5))
    with pytest.raises(DimensionError):
        fit_regression(LearnerSpec(), x, np.zeros(4))
    with pytest.raises(FitError):
        fit_regression(LearnerSpec(), np.zeros((0, 2)), np.zeros(0))
    model = fit_regression(LearnerSpec(), x, np.ones(5))
    with pytest.raises(DimensionError):
        model.predict(np.zeros((2, 3)))


def test_gbt_step_function():
    rng = make_rng(2)
    x = rng.uniform(-1, 1, (400, 2))
    y = (x[:, 0] > 0).astype(float)
    spec = LearnerSpec("gbt", n_rounds=100, learning_rate=0.2, max_depth=2, min_leaf=5)
    model = fit_regression(spec, x, y)
    assert isinstance(model, BoostedTrees)
    assert len(model.trees) == 100
    pred = model.predict(np.array([[-0.5, 0.0], [0.5, 0.0]]))
    np.testing.assert_allclose(pred, [0.0, 1.0], atol=0.05)

    # squared-error boosting never increases the training loss without subsampling
    loss = np.array(model.train_loss_)
    assert len(loss) == 100
    assert np.all(np.diff(loss) <= 1e-12)


def test_gbt_tree_shape():
    rng = make_rng(3)
    x = rng.uniform(-1, 1, (200, 3))
    y = x[:, 0] * x[:, 1]
    spec = LearnerSpec("gbt", n_rounds=5, max_depth=1, min_leaf=5)
    model = fit_regression(spec, x, y)
    for tree in model.trees:
        assert len(tree.feature) <= 3
        assert np.all(tree.feature[tree.feature >= 0] < 3)


def test_gbt_weights_normalized():
    rng = make_rng(4)
    x = rng.uniform(-1, 1, (100, 2))
    y = np.sin(3 * x[:, 0])
    w = rng.uniform(0.5, 2, 100)
    spec = LearnerSpec("gbt", n_rounds=20)
    a = fit_regression(spec, x, y, w)
    b = fit_regression(spec, x, y, 4 * w)
    np.testing.assert_allclose(a.predict(x), b.predict(x), atol=1e-12)


def test_gbt_subsample_seeded():
    rng = make_rng(5)
    x = rng.uniform(-1, 1, (200, 2))
    y = x[:, 0] + rng.standard_normal(200)
    spec = LearnerSpec("gbt", n_rounds=10, subsample=0.5, seed=1)
    a = fit_regression(spec, x, y)
    b = fit_regression(spec, x, y)
    c = fit_regression(LearnerSpec("gbt", n_rounds=10, subsample=0.5, seed=2), x, y)
    np.testing.assert_array_equal(a.predict(x), b.predict(x))
    assert not np.array_equal(a.predict(x), c.predict(x))


def _leaf_means(x, r, w, rows, depth, max_depth, min_leaf, out):
    """Exhaustive search over every feature and cut, one node at a time"""

    def score(ix):
        return np.sum(w[ix] * r[ix]) ** 2 / np.sum(w[ix])

    out[rows] = np.sum(w[rows] * r[rows]) / np.sum(w[rows])
    if depth >= max_depth or len(rows) < 2 * min_leaf:
        return
    best_gain, best = 1e-12, None
    for j in range(x.shape[1]):
        values = np.sort(x[rows, j])
        for k in range(min_leaf, len(rows) - min_leaf + 1):
            cut = (values[k - 1] + values[k]) / 2
            left = rows[x[rows, j] <= cut]
            right = rows[x[rows, j] > cut]
            gain = score(left) + score(right) - score(rows)
            if gain > best_gain:
                best_gain, best = gain, (left, right)
    if best is not None:
        for child in best:
            _leaf_means(x, r, w, child, depth + 1, max_depth, min_leaf, out)


@pytest.mark.parametrize("max_depth", [1, 3])
def test_gbt_tree_matches_exhaustive_search(max_depth):
    rng = make_rng(17)
    n = 80
    x = rng.uniform(-1, 1, (n, 3))
    y = np.sin(3 * x[:, 0]) + x[:, 1] * x[:, 2] + 0.1 * rng.standard_normal(n)
    w = rng.uniform(0.5, 2.0, n)
    spec = LearnerSpec(
        "gbt", n_rounds=1, learning_rate=1.0, max_depth=max_depth, min_leaf=5
    )
    model = fit_regression(spec, x, y, w)
    base = np.sum(w * y) / np.sum(w)
    expected = np.empty(n)
    _leaf_means(x, y - base, w, np.arange(n), 0, max_depth, 5, expected)
    np.testing.assert_allclose(model.predict(x) - base, expected, atol=1e-10)


def test_logistic_score_equations():
    """At the unpenalized optimum the weighted score vanishes"""
    rng = make_rng(6)
    x = rng.standard_normal((2000, 2))
    t = rng.uniform(size=2000) < 1 / (1 + np.exp(-(0.5 + x[:, 0] - x[:, 1])))
    w = rng.uniform(0.5, 1.5, 2000)
    model = fit_probability(LearnerSpec("linear", clip_eps=1e-9), x, t, w)
    phi = expand_features("linear", x)
    p = 1 / (1 + np.exp(-(phi @ model.coef)))
    score = phi.T @ (w * (t - p)) / w.sum()
    np.testing.assert_allclose(score, 0, atol=1e-8)
    np.testing.assert_allclose(model.coef, [0.5, 1, -1], atol=0.25)


def test_logistic_recovers_slope():
    rng = make_rng(16)
    x = rng.standard_normal((5000, 1))
    labels = rng.uniform(size=5000) < 1 / (1 + np.exp(-2 * x[:, 0]))
    model = fit_probability(LearnerSpec("linear", clip_eps=1e-9), x, labels)
    assert abs(model.coef[1] - 2) < 0.15
    assert abs(model.coef[0]) < 0.15


def test_probability_clipped_on_separable_data():
    x = np.linspace(-1, 1, 100)[:, None]
    labels = np.where(x[:, 0] > 0, 1, -1)
    specs = (LearnerSpec("linear", ridge_penalty=0.01), LearnerSpec("gbt", n_rounds=50))
    for spec in specs:
        model = fit_probability(spec, x, labels)
        p = model.predict(x)
        assert np.all(np.isfinite(model.scorer.predict(x)))
        assert np.all((p >= 0.01) & (p <= 0.99))
        assert p[-1] > 0.5 > p[0]
        assert p.max() <= 0.99


def test_probability_single_class():
    x = np.zeros((10, 1))
    with pytest.raises(FitError, match="single class"):
        fit_probability(LearnerSpec(), x, np.ones(10))
    # classes missing among rows with positive weight
    labels = np.array([1] * 5 + [0] * 5)
    w = np.array([1.0] * 5 + [0.0] * 5)
    with pytest.raises(FitError, match="single class"):
        fit_probability(LearnerSpec(), x, labels, w)


def test_probability_coef():
    x = np.linspace(-1, 1, 50)[:, None]
    labels = np.array([0, 1] * 25)
    assert fit_probability(LearnerSpec(), x, labels).coef.shape == (2,)
    gbt = fit_probability(LearnerSpec("gbt", n_rounds=2), x, labels)
    with pytest.raises(AttributeError):
        gbt.coef


def test_cross_fit_no_leakage():
    """Perturbing the target of a row leaves its out-of-fold prediction unchanged"""
    rng = make_rng(7)
    n = 200
    x = rng.standard_normal((n, 2))
    y = x[:, 0] + rng.standard_normal(n)
    folds = np.arange(n) % 2
    base = cross_fit(LearnerSpec("linear"), x, y, None, folds)
    for i in rng.choice(n, 100, replace=False):
        y2 = y.copy()
        y2[i] += 100.0
        oof = cross_fit(LearnerSpec("linear"), x, y2, None, folds).oof
        assert oof[i] == base.oof[i]
        other = folds != folds[i]
        assert not np.allclose(oof[other], base.oof[other])


def test_cross_fit_fold_assignment():
    rng = make_rng(8)
    x = rng.standard_normal((30, 1))
    y = 2 * x[:, 0]
    folds = FoldAssignment({1: np.arange(10) % 2, 2: np.arange(20) % 2}, 2)
    a = cross_fit(LearnerSpec(), x, y, None, folds)
    flat = np.concatenate([np.arange(10), np.arange(20)]) % 2
    b = cross_fit(LearnerSpec(), x, y, None, flat)
    np.testing.assert_array_equal(a.oof, b.oof)
    np.testing.assert_allclose(a.oof, y, atol=1e-10)
    assert len(a.models) == 2
    new = np.array([[1.0], [2.0]])
    expected = np.mean([m.predict(new) for m in a.models], axis=0)
    np.testing.assert_array_equal(a.predict(new), expected)


def test_cross_fit_train_mask():
    x = np.linspace(-1, 1, 40)[:, None]
    arm = np.arange(40) % 3 == 0
    y = np.where(arm, 1.0, -1.0)
    fit = cross_fit(LearnerSpec(), x, y, None, np.arange(40) % 2, train_mask=arm)
    # models trained on one arm predict every row, including the other arm's
    np.testing.assert_allclose(fit.oof, 1.0, atol=1e-10)


def test_cross_fit_leave_one_out():
    rng = make_rng(18)
    n, penalty = 10, 0.1
    x = rng.uniform(-1, 1, (n, 2))
    y = 1 + x @ np.array([2.0, -1.0]) + 0.1 * rng.standard_normal(n)
    spec = LearnerSpec("linear", ridge_penalty=penalty)
    fit = cross_fit(spec, x, y, None, np.arange(n))
    assert len(fit.models) == n

    phi = expand_features("linear", x)
    # every training set has n - 1 rows; the penalty is relative to the mean loss
    gram = phi.T @ phi + (n - 1) * penalty * np.eye(phi.shape[1])
    hat = phi @ np.linalg.solve(gram, phi.T)
    h = np.diag(hat)
    loo = (hat @ y - h * y) / (1 - h)
    np.testing.assert_allclose(fit.oof, loo, atol=1e-8)


def test_cross_fit_errors():
    x = np.zeros((10, 1))
    with pytest.raises(ConfigurationError):
        cross_fit(LearnerSpec(), x, np.zeros(10), None, np.zeros(10, dtype=int))
    with pytest.raises(DimensionError):
        cross_fit(LearnerSpec(), x, np.zeros(10), None, np.arange(9) % 2)

    folds = np.array([0] * 5 + [1] * 5)
    labels = np.array([1, 1, 1, 1, 1, 0, 1, 0, 1, 0])
    with pytest.raises(FitError) as info:
        cross_fit(LearnerSpec(), x, labels, None, folds, "probability")
    assert info.value.fold == 1
    assert "fold=1" in str(info.value)


def test_cross_fit_threads(check_thread_leaks):
    rng = make_rng(9)
    x = rng.uniform(-1, 1, (120, 2))
    y = x[:, 0] ** 2 + 0.1 * rng.standard_normal(120)
    spec = LearnerSpec("gbt", n_rounds=10, subsample=0.7)
    folds = np.arange(120) % 3
    a = cross_fit(spec, x, y, None, folds, threads=1)
    b = cross_fit(spec, x, y, None, folds, threads=3)
    np.testing.assert_array_equal(a.oof, b.oof)


def test_linear_model_str():
    model = LinearModel("poly2", np.zeros(6), 2)
    assert str(model) == repr(model) == "<LinearModel: poly2, d=2>"
