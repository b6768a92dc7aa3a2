import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rtpower.core_types import PowerCell, ValidationError
from rtpower.io import (
    DataIOError,
    Report,
    bundled_scenario,
    bundled_scenario_path,
    fmt_number,
    load_scenario,
    load_trials,
    power_rows,
    read_report,
    read_results_csv,
    save_scenario,
    write_report,
    write_trials,
)
from rtpower.simulate import simulate_trials

HEADER = "participant_id,item_id,condition,rt_ms\n"


def _csv(tmp_path, body, header=HEADER, name="t.csv"):
    p = tmp_path / name
    p.write_text(header + body)
    return p


def test_four_row_csv(tmp_path):
    p = _csv(tmp_path, "p1,i1,related,800\np1,i1,unrelated,820\np2,i1,related,750\np2,i1,unrelated,790\n")
    assert len(load_trials(p)) == 4


def test_negative_rt_cites_row(tmp_path):
    rows = [f"p{k},i1,related,{800 + k}" for k in range(1, 11)]
    rows[6] = "p7,i1,related,-12"
    with pytest.raises(ValidationError, match=r"row\(s\) \[7\]"):
        load_trials(_csv(tmp_path, "\n".join(rows) + "\n"))


def test_missing_and_unparseable_rt(tmp_path):
    p = _csv(tmp_path, "p1,i1,related,\np1,i1,unrelated,abc\np2,i1,related,800\n")
    with pytest.raises(ValidationError) as e:
        load_trials(p)
    msg = str(e.value)
    assert "unparseable number on row(s) [2]" in msg and "missing value on row(s) [1]" in msg


def test_missing_required_column(tmp_path):
    p = _csv(tmp_path, "p1,i1,800\n", header="participant_id,item_id,rt_ms\n")
    with pytest.raises(ValidationError, match="condition"):
        load_trials(p)


def test_duplicate_key(tmp_path):
    p = _csv(tmp_path, "p1,i1,related,800\np1,i1,related,820\n")
    with pytest.raises(ValidationError, match="duplicate"):
        load_trials(p)


def test_column_remapping(tmp_path):
    p = _csv(tmp_path, "s1,w1,related,800,3,1\ns1,w1,unrelated,810,4,0\n",
             header="subject,word,cond,latency,trial,acc\n")
    t = load_trials(p, {"participant_id": "subject", "item_id": "word", "condition": "cond",
                        "rt_ms": "latency", "trial_index": "trial", "correct": "acc"})
    assert t.data["correct"].tolist() == [True, False]
    assert t.data["trial_index"].tolist() == [3, 4]


def test_missing_file():
    with pytest.raises(DataIOError):
        load_trials("/nonexistent/trials.csv")


def test_simulate_round_trip(tmp_path):
    t = simulate_trials(bundled_scenario("online_semantic").with_sizes(7, 9), 31)
    write_trials(t, tmp_path / "sim.csv")
    assert load_trials(tmp_path / "sim.csv", require_positive_rt=False) == t


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_float_format_round_trips(x):
    assert float(fmt_number(x)) == x


def test_bundled_online_semantic():
    s = load_scenario(bundled_scenario_path("online_semantic"))
    assert s.by_participant.sds == (150.69, 11.88) and s.residual_sd == 272.85


def _scenario_dict():
    return json.loads(bundled_scenario_path("lab_phonological").read_text())


def test_scenario_corr_bound(tmp_path):
    d = _scenario_dict()
    d["by_item"]["corr"] = [[1, 1.2], [1.2, 1]]
    (tmp_path / "s.json").write_text(json.dumps(d))
    with pytest.raises(ValidationError, match=r"\[-1, 1\]"):
        load_scenario(tmp_path / "s.json")


def test_scenario_default_obs_per_cell(tmp_path):
    d = _scenario_dict()
    del d["obs_per_cell"]
    (tmp_path / "s.json").write_text(json.dumps(d))
    assert load_scenario(tmp_path / "s.json").obs_per_cell == 1


def test_scenario_unknown_keys_strict_and_lax(tmp_path):
    d = _scenario_dict()
    d["n_blocks"] = 5
    d["by_item"]["extra"] = 1
    (tmp_path / "s.json").write_text(json.dumps(d))
    with pytest.raises(ValidationError, match="n_blocks"):
        load_scenario(tmp_path / "s.json")
    with pytest.warns(UserWarning, match="by_item.extra"):
        s = load_scenario(tmp_path / "s.json", strict=False)
    assert s.residual_sd == 223.56


def test_scenario_save_load(tmp_path):
    s = bundled_scenario("lab_semantic")
    save_scenario(s, tmp_path / "x.json")
    assert load_scenario(tmp_path / "x.json") == s


def _cells(n):
    return [PowerCell(12 * (k // 3 + 1), (20, 40, 90)[k % 3], 500, 500 - k, 300 + k) for k in range(n)]


def test_power_csv_rows(tmp_path):
    r = Report("power", {"n_sim": 500}, power_rows(_cells(24)), base_seed=1)
    _, csv_path = write_report(r, tmp_path / "out")
    lines = csv_path.read_text().splitlines()
    assert len(lines) == 25
    assert lines[0] == "n_participants,n_items,n_sim,n_converged,n_significant,power,mc_se"
    rows = read_results_csv(csv_path)
    assert rows[5]["power"] == _cells(24)[5].power


def test_report_round_trip(tmp_path):
    cells = _cells(6) + [PowerCell(45, 90, 500, 480, 400, residual_sd=150.0)]
    r = Report("sweep", {"scenario": "x", "grid": [1, 2]}, power_rows(cells), details={"nan": math.nan},
               base_seed=7, timing={"elapsed_s": 0.1}, input_digests={"a": "sha256:00"})
    json_path, _ = write_report(r, tmp_path / "rep")
    back = read_report(json_path)
    assert back.results == r.results and back.request == r.request and back.base_seed == 7
    assert math.isnan(back.details["nan"])
    assert back.tool_version == r.tool_version and back.input_digests == r.input_digests


def test_empty_report(tmp_path):
    r = Report("power", {}, [])
    json_path, csv_path = write_report(r, tmp_path / "empty")
    assert json.loads(json_path.read_text())["results"] == []
    assert csv_path.read_text().count("\n") == 1


def test_write_is_atomic_no_temp_left(tmp_path):
    write_report(Report("power", {}, power_rows(_cells(3))), tmp_path / "a")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["a.csv", "a.json"]


def test_unwritable_destination(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DataIOError, match="file"):
        write_report(Report("power", {}, []), blocker / "sub" / "r")


def test_report_deterministic(tmp_path):
    r = Report("power", {"a": 1}, power_rows(_cells(4)), base_seed=3, timing={"elapsed_s": 1.0})
    a, _ = write_report(r, tmp_path / "x")
    b, _ = write_report(r, tmp_path / "y")
    assert a.read_bytes() == b.read_bytes()
