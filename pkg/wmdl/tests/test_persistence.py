import json

import numpy as np
import pytest

from wmdl import persistence
from wmdl.common import SchemaError
from wmdl.estimators import EstimatorSpec, fit
from wmdl.learners import LearnerSpec, LinearModel
from wmdl.persistence import decode, dumps, load, loads, register, save


@pytest.mark.parametrize(
    "spec",
    [
        EstimatorSpec(
            nuisance_learner=LearnerSpec("linear"),
            final_learner=LearnerSpec("gbt", n_rounds=15, subsample=0.7, seed=3),
        ),
        EstimatorSpec(
            nuisance_learner=LearnerSpec("linear"),
            final_learner=LearnerSpec("poly2"),
            effect_mode="heterogeneous",
        ),
        EstimatorSpec(
            "x_learner",
            nuisance_learner=LearnerSpec("gbt", n_rounds=5),
            final_learner=LearnerSpec("gbt", n_rounds=5),
        ),
        EstimatorSpec(
            "s_learner",
            include_source_indicator=True,
            nuisance_learner=LearnerSpec("linear"),
        ),
    ],
)
def test_saved_estimate_predicts_identically(
    small_data, tmp_path, spec, check_fd_leaks
):
    est = fit(small_data, spec)
    path = tmp_path / "model.json"
    save(est, path, meta={"estimator": spec.method})
    back = load(path)
    assert (back.method, back.mode, back.target_source) == (
        est.method,
        est.mode,
        est.target_source,
    )
    assert back.source_levels == est.source_levels
    assert back.diagnostics == {}
    x = small_data[2].x
    s = 2 if est.mode == "heterogeneous" else None
    np.testing.assert_array_equal(back.predict_delta(x, s), est.predict_delta(x, s))
    assert json.loads(path.read_text())["meta"] == {"estimator": spec.method}


def test_document_layout():
    model = LinearModel("linear", np.array([0.1, 1 / 3]), 1)
    doc = json.loads(dumps(model))
    assert doc == {
        "format_version": persistence.FORMAT_VERSION,
        "model": {"type": "linear", "kind": "linear", "coef": [0.1, 1 / 3], "d": 1},
    }
    assert "meta" not in doc


@pytest.mark.parametrize(
    "text,match",
    [
        ("[1, 2", "not a JSON document"),
        ('{"model": {}}', "unsupported format_version"),
        ('{"format_version": 99, "model": {}}', "unsupported format_version"),
        ('{"format_version": 1, "model": {"type": "forest"}}', "unknown"),
        ('{"format_version": 1, "model": {"kind": "linear"}}', "unknown"),
        ('{"format_version": 1, "model": {"type": "linear", "kind": "linear"}}', "malformed"),
    ],
)
def test_load_errors(text, match):
    with pytest.raises(SchemaError, match=match):
        loads(text)


def test_register_conflict():
    with pytest.raises(ValueError, match="already registered"):

        @register("linear")
        class Other:
            pass

    assert decode({"type": "linear", "kind": "linear", "coef": [1.0], "d": 0}).d == 0
