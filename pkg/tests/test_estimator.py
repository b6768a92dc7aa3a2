import numpy as np
import pandas as pd
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from rtpower.core_types import ValidationError
from rtpower.estimator import CrossedMixedModel, check_trial_table
from rtpower.io import bundled_scenario
from rtpower.lmm import fit_lmm
from rtpower.simulate import simulate_trials


@pytest.fixture(scope="module")
def table():
    return simulate_trials(bundled_scenario("lab_phonological").with_sizes(15, 20), 3)


def test_matches_functional_fit(table):
    m = CrossedMixedModel().fit(table)
    ref = fit_lmm(table)
    assert m.coef_ == ref.estimates
    assert m.result_.deviance == ref.deviance


def test_params_and_clone():
    m = CrossedMixedModel(criterion="ML", n_restarts=1)
    assert m.get_params()["criterion"] == "ML"
    c = clone(m)
    assert c.get_params() == m.get_params()
    m.set_params(tol=1e-8)
    assert m.tol == 1e-8


def test_predict_fixed_and_random(table):
    m = CrossedMixedModel().fit(table)
    df = table.data
    fixed = m.predict(df, include_random=False)
    x = np.where(df["condition"] == "related", 0.5, -0.5)
    assert np.allclose(fixed, m.coef_["intercept"] + m.coef_["relatedness"] * x)
    full = m.predict(df)
    resid_full = df["rt_ms"] - full
    resid_fixed = df["rt_ms"] - fixed
    assert resid_full.var() < resid_fixed.var()
    assert 0 < m.score(df, df["rt_ms"]) < 1


def test_unseen_levels_get_fixed_prediction(table):
    m = CrossedMixedModel().fit(table)
    new = pd.DataFrame({"participant_id": ["new"], "item_id": ["unseen"], "condition": ["related"]})
    assert m.predict(new)[0] == pytest.approx(m.coef_["intercept"] + 0.5 * m.coef_["relatedness"])


def test_y_overrides_rt(table):
    y = table.data["rt_ms"].to_numpy() * 2
    m = CrossedMixedModel().fit(table, y)
    assert m.coef_["relatedness"] == pytest.approx(2 * fit_lmm(table).estimates["relatedness"], rel=1e-8)


def test_not_fitted():
    with pytest.raises(NotFittedError):
        CrossedMixedModel().predict(pd.DataFrame())


def test_validation_helper():
    with pytest.raises(ValidationError):
        check_trial_table([1, 2, 3])
    with pytest.raises(ValidationError, match="y has"):
        check_trial_table(pd.DataFrame({"participant_id": ["a"], "item_id": ["b"], "condition": ["related"],
                                        "rt_ms": [1.0]}), [1.0, 2.0])


def test_summary_and_wald(table):
    m = CrossedMixedModel().fit(table)
    assert "relatedness" in m.summary()
    assert m.wald_test()["t"] == m.result_.t_values["relatedness"]
