import json
import math
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rtpower.core_types import (
    ContrastCoding,
    FixedEffects,
    PowerCell,
    RandomStructure,
    Scenario,
    TrialTable,
    ValidationError,
    check_scenario,
    validate_scenario,
)
from rtpower.io import BUNDLED, bundled_scenario, bundled_scenario_path

EXPECTED = {
    "lab_semantic": (930.84, -59.59, (116.60, 30.20), -0.73, (77.87, 55.38), -0.22, 236.92),
    "lab_phonological": (884.01, 30.85, (112.42, 28.43), -0.11, (76.07, 64.28), -0.07, 223.56),
    "online_semantic": (1193.20, 34.37, (150.69, 11.88), 0.02, (76.45, 53.11), -0.44, 272.85),
    "online_phonological": (1177.61, -21.50, (145.71, 20.84), 0.21, (74.64, 62.33), -0.34, 264.69),
}


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_values(name):
    s = bundled_scenario(name)
    b0, brel, psd, pcorr, isd, icorr, res = EXPECTED[name]
    assert s.fixed["intercept"] == b0 and s.fixed["relatedness"] == brel
    assert s.by_participant.sds == psd and s.by_participant.corr[0][1] == pcorr
    assert s.by_item.sds == isd and s.by_item.corr[0][1] == icorr
    assert s.residual_sd == res
    assert (s.n_participants, s.n_items, s.obs_per_cell) == (45, 90, 1)
    assert validate_scenario(s) == []


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_round_trip_bit_identical(name):
    raw = json.loads(bundled_scenario_path(name).read_text())
    again = json.loads(json.dumps(Scenario.from_dict(raw).to_dict()))
    assert again == raw


def test_residual_sd_zero_single_violation(lab_phon):
    v = validate_scenario(lab_phon.with_residual_sd(0.0))
    assert len(v) == 1 and "residual_sd" in v[0]


def test_correlation_out_of_bounds_named(lab_phon):
    bad = replace(lab_phon.by_participant, corr=[[1, 1.2], [1.2, 1]])
    v = validate_scenario(replace(lab_phon, by_participant=bad))
    assert any("[-1, 1]" in m or "bound" in m for m in v), v


def test_validation_does_not_mutate(lab_phon):
    before = lab_phon.to_dict()
    validate_scenario(lab_phon.with_residual_sd(-1))
    assert lab_phon.to_dict() == before


def test_non_psd_correlation_rejected():
    rs = RandomStructure("item", ("intercept", "relatedness", "setting"), (1, 1, 1),
                         [[1, 0.9, -0.9], [0.9, 1, 0.9], [-0.9, 0.9, 1]])
    assert any("positive semi-definite" in m for m in rs.violations())


def test_zero_sds_valid():
    rs = RandomStructure.from_sds("participant", ("intercept", "relatedness"), (0.0, 0.0), 0.5)
    assert rs.violations() == []
    assert np.array_equal(rs.covariance, np.zeros((2, 2)))


def test_higher_dimensional_correlation_allowed():
    terms = ("intercept", "relatedness", "setting", "setting:relatedness")
    rs = RandomStructure.from_sds("item", terms, (1, 2, 3, 4), 0.2)
    assert rs.violations() == []


def test_dimension_mismatch():
    rs = RandomStructure("item", ("intercept",), (1.0, 2.0))
    assert any("dimension" in m for m in rs.violations())


def test_fixed_effects_needs_intercept():
    assert FixedEffects({"relatedness": 1.0}).violations()


def test_random_term_without_fixed_coefficient(lab_phon):
    s = replace(lab_phon, fixed=FixedEffects({"intercept": 900.0}))
    assert any("no fixed-effect coefficient" in m for m in validate_scenario(s))


def test_contrast_codes_must_differ(lab_phon):
    s = replace(lab_phon, contrasts=ContrastCoding(0.5, 0.5))
    assert any("related_code" in m for m in validate_scenario(s))


def test_sizes(lab_phon):
    v = validate_scenario(replace(lab_phon, n_participants=1, n_items=1, obs_per_cell=0))
    assert len(v) == 3


def test_check_scenario_raises_with_all_violations(lab_phon):
    with pytest.raises(ValidationError) as e:
        check_scenario(replace(lab_phon, residual_sd=0.0, n_items=1))
    assert len(e.value.violations) == 2


@given(st.integers(1, 500), st.data())
def test_power_cell_invariants(n_sim, data):
    n_conv = data.draw(st.integers(0, n_sim))
    n_sig = data.draw(st.integers(0, n_conv))
    c = PowerCell(10, 20, n_sim, n_conv, n_sig)
    if n_conv == 0:
        assert math.isnan(c.power)
    else:
        assert c.power == n_sig / n_conv
        assert c.mc_se == pytest.approx(math.sqrt(c.power * (1 - c.power) / n_conv), rel=1e-12)
    assert PowerCell.from_dict(c.to_dict()) == c
    nonsig = replace(c, failures="nonsig")
    assert nonsig.power == n_sig / n_sim


def _frame(**over):
    d = {
        "participant_id": ["p1", "p1", "p2", "p2"],
        "item_id": ["i1", "i1", "i1", "i1"],
        "condition": ["related", "unrelated", "related", "unrelated"],
        "rt_ms": [800.0, 850.0, 700.0, 760.0],
    }
    d.update(over)
    return pd.DataFrame(d)


def test_trial_table_basic():
    t = TrialTable(_frame())
    assert len(t) == 4 and t.participants == ["p1", "p2"]
    assert (t.data["replicate"] == 0).all()


def test_trial_table_rejects_case_mismatch():
    with pytest.raises(ValidationError, match="Related"):
        TrialTable(_frame(condition=["Related", "unrelated", "related", "unrelated"]))


def test_trial_table_rejects_nonpositive_rt():
    with pytest.raises(ValidationError, match="rows \\[3\\]"):
        TrialTable(_frame(rt_ms=[1.0, 2.0, -5.0, 3.0]))
    assert len(TrialTable(_frame(rt_ms=[1.0, 2.0, -5.0, 3.0]), require_positive_rt=False)) == 4


def test_trial_table_duplicates():
    with pytest.raises(ValidationError, match="duplicate"):
        TrialTable(_frame(condition=["related"] * 4))


def test_duplicates_allowed_across_settings():
    df = _frame(participant_id=["p1"] * 4, condition=["related", "unrelated"] * 2,
                setting=["lab", "lab", "online", "online"])
    assert len(TrialTable(df)) == 4


def test_trial_table_missing_column():
    with pytest.raises(ValidationError, match="rt_ms"):
        TrialTable(_frame().drop(columns="rt_ms"))


def test_correct_only_filters_errors():
    t = TrialTable(_frame(correct=[True, False, True, True]))
    assert len(t.correct_only()) == 3
