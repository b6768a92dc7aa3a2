import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rtpower.core_types import TrialTable, ValidationError
from rtpower.io import bundled_scenario
from rtpower.lmm import ModelSpec, build_design
from rtpower.simulate import simulate_trials
from rtpower.variability import (
    PerfectCorrelationError,
    compare_correlations,
    descriptive_slope_sd,
    location_scale_fit,
    split_half,
    variance_ratio_test,
)

from conftest import zero_random


def _halves_table(odd_means, even_means):
    rows = []
    for p, (o, e) in enumerate(zip(odd_means, even_means)):
        for k, (rt, cond) in enumerate([(o, "related"), (e, "related"), (o, "unrelated"), (e, "unrelated")]):
            rows.append((f"p{p}", f"i{k % 2}", cond, k + 1, rt))
    return TrialTable(pd.DataFrame(rows, columns=["participant_id", "item_id", "condition", "trial_index", "rt_ms"]))


def test_split_half_perfect_consistency():
    m = [700.0, 810.0, 900.0, 1020.0, 650.0]
    res = split_half(_halves_table(m, m))
    assert res.r == 1.0 and res.ci_low == 1.0 and res.ci_high == 1.0
    assert [r["odd_mean"] for r in res.per_participant] == sorted(m, key=lambda v: m.index(v))


def test_split_half_attenuation():
    s = zero_random(bundled_scenario("lab_phonological")).with_effect("relatedness", 0.0)
    s = s.with_sd("participant", "intercept", 100.0).with_residual_sd(200.0).with_sizes(500, 225)
    res = split_half(simulate_trials(s, 21))
    expected = 10000 / (10000 + 200**2 / 225)
    assert abs(res.r - expected) < 0.01


def test_split_half_excludes_errors():
    t = _halves_table([700, 800, 900, 1000], [710, 790, 905, 1001])
    df = t.data.copy()
    df["correct"] = True
    df.loc[0, "correct"] = False
    df.loc[0, "rt_ms"] = 99999.0
    assert split_half(TrialTable(df)).r == pytest.approx(split_half(t.subset(df.index != 0)).r, abs=1e-15)


def test_split_half_errors():
    t = _halves_table([1, 2, 3], [1, 2, 3])
    with pytest.raises(ValidationError, match="at least 4"):
        split_half(t)
    with pytest.raises(ValidationError, match="trial_index"):
        split_half(TrialTable(t.data.drop(columns="trial_index")))


@given(st.floats(-5000, 5000))
def test_split_half_global_shift_invariant(c):
    t = _halves_table([700, 810, 905, 1020, 650], [720, 790, 915, 1000, 640])
    a = split_half(t).r
    b = split_half(t.with_rt(t.data["rt_ms"] + c)).r
    assert abs(a - b) < 1e-12


def test_split_half_ci_order():
    res = split_half(_halves_table([700, 810, 905, 1020, 650, 880], [760, 790, 915, 940, 700, 860]))
    assert -1 <= res.ci_low <= res.r <= res.ci_high <= 1


def test_compare_correlations_examples():
    assert compare_correlations(0.5, 30, 0.5, 30) == {"z": 0.0, "p_two_sided": 1.0}
    r = compare_correlations(0.96, 45, 0.98, 45)
    z = (math.atanh(0.98) - math.atanh(0.96)) / math.sqrt(2 / 42)
    assert r["z"] == pytest.approx(z, abs=1e-12) and round(r["z"], 2) == 1.61
    assert r["p_two_sided"] == pytest.approx(0.107, abs=5e-4)
    r = compare_correlations(0.0, 100, 0.5, 100)
    assert round(r["z"], 2) == 3.83
    assert r["p_two_sided"] == pytest.approx(1.3e-4, abs=5e-6)


def test_compare_correlations_perfect():
    with pytest.raises(PerfectCorrelationError):
        compare_correlations(1.0, 45, 0.9, 45)
    with pytest.raises(ValidationError):
        compare_correlations(0.5, 3, 0.9, 45)


def test_variance_ratio_examples():
    r = variance_ratio_test(3.0, 45, 3.0, 45)
    assert r.f == 1.0 and r.p == pytest.approx(0.5, abs=1e-12)
    assert variance_ratio_test(math.sqrt(1.67), 45, 1.0, 45).p == pytest.approx(0.05, abs=0.015)
    assert variance_ratio_test(math.sqrt(0.54), 45, 1.0, 45).p == pytest.approx(0.98, abs=0.015)
    with pytest.raises(ValidationError):
        variance_ratio_test(0.0, 45, 1.0, 45)
    with pytest.raises(ValidationError):
        variance_ratio_test(1.0, 1, 1.0, 45)


@given(st.floats(0.1, 100), st.integers(2, 300), st.floats(0.1, 100), st.integers(2, 300))
def test_variance_ratio_swap(sd_a, n_a, sd_b, n_b):
    ab = variance_ratio_test(sd_a, n_a, sd_b, n_b)
    ba = variance_ratio_test(sd_b, n_b, sd_a, n_a)
    assert ab.f * ba.f == pytest.approx(1.0, rel=1e-12)
    assert ab.p + ba.p == pytest.approx(1.0, abs=1e-10)
    assert ab.f >= 0 and 0 <= ab.p <= 1


def _group(values, prefix):
    return TrialTable(pd.DataFrame({
        "participant_id": [f"{prefix}{k}" for k in range(len(values))],
        "item_id": "i1", "condition": "related", "rt_ms": values,
    }), require_positive_rt=False)


def test_location_scale_identical_groups():
    t = _group(np.random.default_rng(1).normal(900, 200, 500), "a")
    res = location_scale_fit(t, t, n_boot=200, seed=3)
    assert res["mean_diff"] == 0.0 and res["sd_diff"] == 0.0
    assert res["mean_ci"][0] <= 0 <= res["mean_ci"][1]
    assert res["sd_ci"][0] <= 0 <= res["sd_ci"][1]


def test_location_scale_recovers_differences():
    rng = np.random.default_rng(12)
    a = _group(rng.normal(900, 230, 15000), "a")
    b = _group(rng.normal(1180, 276, 15000), "b")
    res = location_scale_fit(a, b, n_boot=200, seed=1)
    assert abs(res["mean_diff"] - 280) < 9
    assert abs(res["sd_diff"] - 46) < 6
    assert res["mean_ci"][0] < res["mean_diff"] < res["mean_ci"][1]


def test_location_scale_deterministic_and_errors():
    rng = np.random.default_rng(0)
    a, b = _group(rng.normal(0, 1, 50), "a"), _group(rng.normal(1, 2, 60), "b")
    assert location_scale_fit(a, b, 200, 5) == location_scale_fit(a, b, 200, 5)
    with pytest.raises(ValidationError):
        location_scale_fit(a, b, n_boot=199)
    with pytest.raises(ValidationError, match="at least 2"):
        location_scale_fit(_group([1.0], "c"), b, n_boot=200)


def test_location_scale_mle_divisor_n():
    a, b = _group([1.0, 3.0], "a"), _group([0.0, 4.0], "b")
    res = location_scale_fit(a, b, n_boot=200, seed=0)
    assert res["sd_diff"] == 1.0 and res["mean_diff"] == 0.0


def test_descriptive_slope_sd_arithmetic():
    df = pd.DataFrame({
        "participant_id": ["a", "a", "b", "b"],
        "item_id": ["i1"] * 4,
        "condition": ["related", "unrelated"] * 2,
        "rt_ms": [810.0, 800.0, 930.0, 900.0],
    })
    res = descriptive_slope_sd(TrialTable(df))
    assert res["grand_mean"] == 20.0
    assert res["sd"] == pytest.approx(math.sqrt(200), abs=1e-12)


def test_descriptive_slope_sd_missing_condition():
    df = pd.DataFrame({"participant_id": ["a", "a", "zz"], "item_id": ["i1", "i1", "i1"],
                       "condition": ["related", "unrelated", "related"], "rt_ms": [1.0, 2.0, 3.0]})
    with pytest.raises(ValidationError, match="zz"):
        descriptive_slope_sd(TrialTable(df))


def test_descriptive_slope_sd_simulated():
    # item effects are common to every participant and cancel; the spread is residual * sqrt(2 / 90)
    s = bundled_scenario("online_phonological")
    s = s.with_sd("participant", "relatedness", 0.0).with_sd("item", "relatedness", 0.0).with_sizes(2000, 90)
    res = descriptive_slope_sd(simulate_trials(s, 8))
    expected = 264.69 * math.sqrt(2 / 90)
    assert abs(res["sd"] / expected - 1) < 0.05


@given(st.integers(0, 2**31))
def test_grand_mean_equals_ols_slope(seed):
    t = simulate_trials(bundled_scenario("lab_semantic").with_sizes(5, 4), seed)
    d = build_design(t, ModelSpec())
    beta = np.linalg.lstsq(d.X, d.y, rcond=None)[0]
    assert descriptive_slope_sd(t)["grand_mean"] == pytest.approx(beta[1], abs=1e-9)
