import numpy as np
import pytest

from wmdl.common import ConfigurationError, ConsistencyError
from wmdl.data import MultiSourceData, SourceData
from wmdl.nuisance import (
    NuisanceSet,
    SelectionPropensity,
    SourceNuisance,
    SourceOOF,
    oracle_nuisances,
)
from wmdl.tests.utils_test import function_nuisances, linear_source
from wmdl.weighting import (
    WeightSpec,
    batch_weights,
    constant_weight,
    information_term,
    information_weight,
    weight_diagnostics,
)


def _two_sources(n=200, shift=0.0):
    return MultiSourceData([linear_source(1, n), linear_source(2, n, shift=shift)])


def _sloped(x):
    return 0.2 + 0.3 * (x[:, 0] + 1)


def test_information_term_unit_variance():
    p = np.linspace(0.1, 0.9, 9)
    np.testing.assert_allclose(information_term(1.0, 1.0, p), p * (1 - p), atol=1e-12)
    assert information_term(1.0, 1.0, 0.5) == 0.25


def test_information_term_noise_and_imbalance():
    # noisier arms and unbalanced treatment both lower the information
    assert information_term(2.0, 2.0, 0.5) == 0.125
    assert information_term(1.0, 4.0, 0.5) < information_term(1.0, 1.0, 0.5)
    assert information_term(1.0, 1.0, 0.9) < information_term(1.0, 1.0, 0.5)
    # V+ / p + V- / (1 - p) = 4 / 0.8 + 1 / 0.2
    assert information_term(4.0, 1.0, 0.8) == pytest.approx(0.1)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"kind": "uniform"},
        {"kind": "transfer", "target_source": 1},
        {"kind": "information_aware", "target_source": 0},
        {"cap_quantile": 0.0},
        {"cap_quantile": 1.5},
    ],
)
def test_weight_spec_errors(kwargs):
    with pytest.raises(ConfigurationError):
        WeightSpec(**kwargs)


def test_weight_spec_target():
    assert WeightSpec().target == 1
    assert WeightSpec("constant").target == 1
    assert WeightSpec("transfer").target == 0
    assert WeightSpec(cap_quantile=None).cap_quantile is None


def test_information_weight_constant_selection():
    """With selection propensities equal to the source shares the transfer term is 1"""
    data = _two_sources()
    ns = function_nuisances(data, p=_sloped, v=lambda x: np.full(len(x), 0.5))
    x = data[2].x
    for s in (1, 2):
        comp = information_weight(s, x, ns)
        np.testing.assert_allclose(comp.transfer_term, 1.0, atol=1e-12)
        p = _sloped(x)
        np.testing.assert_allclose(comp.information_term, 2 * p * (1 - p), atol=1e-12)
        np.testing.assert_allclose(comp.combined, comp.information_term, atol=1e-12)


def test_information_weight_selection_ratio():
    data = MultiSourceData([linear_source(1, 100), linear_source(2, 300)])
    ns = function_nuisances(data, pi=lambda x: np.tile([0.2, 0.8], (len(x), 1)))
    x = data[1].x[:5]
    comp = information_weight(2, x, ns)
    # (P(S=2) / P(S=1)) * pi_1 / pi_2 = 3 * 0.2 / 0.8
    np.testing.assert_allclose(comp.transfer_term, 0.75)
    np.testing.assert_allclose(comp.combined, 0.75 * 0.25)
    np.testing.assert_array_equal(information_weight(1, x, ns).transfer_term, 1.0)


def test_information_weight_density_form():
    data = _two_sources()
    ns = function_nuisances(data)

    def f_target(x):
        return np.where(np.all(np.abs(x) <= 1, axis=1), 0.25, 0.0)

    def f_wide(x):
        return np.where(np.all(np.abs(x) <= 2, axis=1), 1 / 16, 0.0)

    densities = {1: f_target, 2: f_wide}
    x = np.array([[0.0, 0.0], [0.5, -0.5], [1.5, 0.0], [-1.2, 1.9]])
    comp = information_weight(2, x, ns, densities=densities)
    np.testing.assert_array_equal(comp.transfer_term, [4.0, 4.0, 0.0, 0.0])
    np.testing.assert_array_equal(comp.combined[2:], 0.0)

    with pytest.raises(ConfigurationError, match="source 2"):
        information_weight(2, x, ns, densities={1: f_target})


def test_constant_weight():
    comp = constant_weight(3, np.zeros((4, 2)))
    for values in (comp.transfer_term, comp.information_term, comp.combined):
        np.testing.assert_array_equal(values, np.ones(4))


def test_batch_weights_constant():
    data = _two_sources()
    batch = batch_weights(data, function_nuisances(data), WeightSpec("constant"))
    np.testing.assert_array_equal(batch.weights, 1.0)
    np.testing.assert_array_equal(batch.source, [1] * 200 + [2] * 200)
    assert len(batch) == 400
    assert batch.cap is None


def test_batch_weights_balanced_are_uniform():
    data = _two_sources()
    batch = batch_weights(data, function_nuisances(data), WeightSpec(cap_quantile=None))
    np.testing.assert_allclose(batch.raw, 0.25)
    np.testing.assert_allclose(batch.weights, 1.0, atol=1e-12)


def test_batch_weights_normalized_and_capped():
    data = _two_sources(n=500)
    ns = function_nuisances(
        data,
        p=_sloped,
        pi=lambda x: np.column_stack(
            [1 / (1 + np.exp(x[:, 0])), 1 / (1 + np.exp(-x[:, 0]))]
        ),
    )
    batch = batch_weights(data, ns, WeightSpec())
    assert batch.weights.mean() == pytest.approx(1.0, abs=1e-12)
    assert batch.cap == pytest.approx(np.quantile(batch.raw, 0.995))
    assert batch.n_capped == np.sum(batch.raw > batch.cap)
    assert 1 <= batch.n_capped <= 6
    # capped rows share the largest normalized weight
    top = batch.weights.max()
    np.testing.assert_allclose(batch.weights[batch.raw >= batch.cap], top)
    np.testing.assert_array_equal(batch.transfer_term[batch.source == 1], 1.0)

    uncapped = batch_weights(data, ns, WeightSpec(cap_quantile=None))
    assert uncapped.n_capped == 0
    np.testing.assert_allclose(
        uncapped.weights, uncapped.raw * len(uncapped.raw) / uncapped.raw.sum()
    )


def test_batch_weights_single_source():
    data = MultiSourceData([linear_source(1, 100)])
    ns = function_nuisances(data, p=_sloped)
    batch = batch_weights(data, ns, WeightSpec(cap_quantile=None))
    p = _sloped(data[1].x)
    expected = p * (1 - p)
    np.testing.assert_allclose(batch.weights, expected / expected.mean())


def test_batch_weights_transfer(transfer_data):
    with pytest.raises(ConfigurationError):
        data = _two_sources()
        batch_weights(data, function_nuisances(data), WeightSpec("transfer"))

    oracle = oracle_nuisances(transfer_data)
    batch = batch_weights(transfer_data, oracle, WeightSpec("transfer"))
    assert set(np.unique(batch.source)) == {1, 2}
    assert np.all(np.isfinite(batch.weights)) and np.all(batch.weights >= 0)
    assert batch.weights.mean() == pytest.approx(1.0)


def test_batch_weights_misaligned():
    ns = function_nuisances(_two_sources(n=100))
    with pytest.raises(ConsistencyError):
        batch_weights(_two_sources(n=120), ns, WeightSpec())


def test_weight_diagnostics():
    data = _two_sources()
    batch = batch_weights(data, function_nuisances(data, p=_sloped), WeightSpec())
    table = weight_diagnostics(batch, bins=5)
    assert len(table) == 10
    assert {"source", "n", "weight_mean", "transfer_mean", "information_mean"} <= set(
        table.columns
    )
    for s, group in table.groupby("source"):
        assert group["count"].sum() == 200
        assert (group["n"] == 200).all()


def _lookup(table):
    return lambda x: np.array([table[int(v)] for v in np.asarray(x)[:, 0]])


def _discrete_source(s, p, v_treated, v_control):
    zero = _lookup({-1: 0.0, 0: 0.0, 1: 0.0})
    p_marg, v_pos, v_neg = _lookup(p), _lookup(v_treated), _lookup(v_control)
    return lambda x: SourceNuisance(
        s,
        lambda x, z=None: zero(x),
        lambda x, z=None: p_marg(x),
        p_marg,
        {1: v_pos, -1: v_neg},
        {1: lambda x, z=None: zero(x), -1: lambda x, z=None: zero(x)},
        SourceOOF(
            zero(x),
            p_marg(x),
            p_marg(x),
            {1: v_pos(x), -1: v_neg(x)},
            {1: zero(x), -1: zero(x)},
        ),
    )


def test_batch_weights_discrete_enumeration():
    """Three covariate values, two sources, source-specific exact nuisances"""
    sources = []
    for s, reps in ((1, 2), (2, 3)):
        x = np.tile([-1.0, 0.0, 1.0], reps)[:, None]
        a = np.where(np.arange(len(x)) % 2 == 0, 1, -1)
        sources.append(SourceData(s, x, np.zeros((len(x), 0)), np.zeros(len(x)), a))
    data = MultiSourceData(sources)

    builders = {
        1: _discrete_source(
            1,
            p={-1: 0.5, 0: 0.4, 1: 0.7},
            v_treated={-1: 1.0, 0: 2.0, 1: 0.5},
            v_control={-1: 1.0, 0: 0.5, 1: 1.0},
        ),
        2: _discrete_source(
            2,
            p={-1: 0.3, 0: 0.5, 1: 0.6},
            v_treated={-1: 1.5, 0: 1.0, 1: 3.0},
            v_control={-1: 0.5, 0: 2.0, 1: 1.0},
        ),
    }
    pi_target = _lookup({-1: 0.2, 0: 0.5, 1: 0.6})

    def pi(x):
        first = pi_target(x)
        return np.column_stack([first, 1 - first])

    ns = NuisanceSet(
        sources={s: builders[s](data[s].x) for s in (1, 2)},
        selection=SelectionPropensity((1, 2), pi, {s: pi(data[s].x) for s in (1, 2)}),
        source_share={1: 6 / 15, 2: 9 / 15},
        clip_eps=0.01,
    )
    # source 1: 1 / (V+ / p + V- / (1 - p))
    # source 2: the same times (9 / 6) * pi_1 / pi_2
    expected = {
        (1, -1): 1 / 4,
        (1, 0): 6 / 35,
        (1, 1): 21 / 85,
        (2, -1): 21 / 320,
        (2, 0): 1 / 4,
        (2, 1): 3 / 10,
    }
    batch = batch_weights(data, ns, WeightSpec(cap_quantile=None))
    x = np.concatenate([data[1].x[:, 0], data[2].x[:, 0]]).astype(int)
    raw = np.array([expected[s, v] for s, v in zip(batch.source, x)])
    np.testing.assert_allclose(batch.raw, raw, rtol=0, atol=1e-12)
    np.testing.assert_allclose(
        batch.weights, raw * len(raw) / raw.sum(), rtol=0, atol=1e-12
    )
    assert batch.n_capped == 0
