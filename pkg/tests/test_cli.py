import json

import pytest

from rtpower.cli import main, parse_args, reproduce_line
from rtpower.io import read_report


@pytest.fixture
def sim_csv(tmp_path):
    path = tmp_path / "sim.csv"
    assert main(["simulate", "--scenario", "lab_phonological", "--participants", "8", "--items", "10",
                 "--seed", "4", "--out", str(path)]) == 0
    return path


def test_simulate_prints_seed(tmp_path, capsys):
    path = tmp_path / "s.csv"
    assert main(["--seed", "12", "simulate", "--participants", "3", "--items", "4", "--out", str(path)]) == 0
    err = capsys.readouterr().err
    assert "seed=12" in err and "--seed 12" in err
    assert len(path.read_text().splitlines()) == 1 + 3 * 4 * 2


def test_global_flag_before_or_after_command():
    a = parse_args(["--seed", "5", "power"])
    b = parse_args(["power", "--seed", "5"])
    assert a.seed == b.seed == 5 and a.nsim == 500 and a.criterion == "reml"


def test_reproduce_line_reparses():
    args = parse_args(["power", "--participants", "12,24", "--items", "20", "--nsim", "7", "--failures", "nonsig"])
    line = reproduce_line(args).split()[1:]
    again = parse_args(line)
    assert vars(again) == vars(args)


def test_fit_json_and_table(sim_csv, tmp_path, capsys):
    out = tmp_path / "fit"
    code = main(["fit", str(sim_csv), "--nboot", "20", "--out", str(out), "--allow-nonpositive-rt"])
    assert code == 0
    stdout = capsys.readouterr().out
    assert "fixed effect" in stdout and "residual sd" in stdout
    rep = read_report(str(out) + ".json")
    assert rep.command == "fit" and rep.details["bootstrap"]["n_boot"] == 20
    assert [r["term"] for r in rep.results] == ["intercept", "relatedness"]
    assert str(sim_csv) in rep.input_digests


def test_fit_without_bootstrap(sim_csv, capsys):
    assert main(["fit", str(sim_csv), "--nboot", "0", "--allow-nonpositive-rt"]) == 0
    doc = capsys.readouterr().out.split("\n\n")[0]
    assert json.loads(doc[: doc.rindex("}") + 1])["details"]["bootstrap"] is None


def test_power_outputs(tmp_path):
    out = tmp_path / "pw"
    assert main(["power", "--participants", "12,24", "--items", "20", "--nsim", "5", "--out", str(out),
                 "--quiet"]) == 0
    lines = (tmp_path / "pw.csv").read_text().splitlines()
    assert len(lines) == 3
    rep = read_report(tmp_path / "pw.json")
    assert rep.request["n_sim"] == 5 and rep.base_seed == 0 and rep.tool_version


def test_sweep_outputs(tmp_path):
    out = tmp_path / "sw"
    assert main(["sweep", "--participants", "6", "--items", "8", "--residual-sds", "100,200", "--nsim", "3",
                 "--out", str(out), "--quiet"]) == 0
    assert len((tmp_path / "sw.csv").read_text().splitlines()) == 3


def test_validation_exit_code(capsys):
    assert main(["power", "--participants", "24,12", "--nsim", "2"]) == 1
    assert main(["power", "--nsim", "0"]) == 1
    assert main(["--bogus"]) == 1
    assert main(["simulate", "--scenario", "nope_not_here.json"]) == 3


def test_io_exit_code():
    assert main(["fit", "/nonexistent/file.csv"]) == 3


def test_negative_rt_rejected_by_default(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("participant_id,item_id,condition,rt_ms\np1,i1,related,-3\np1,i1,unrelated,5\n")
    assert main(["fit", str(bad), "--nboot", "0"]) == 1


def test_reliability_varcomp_compare(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    main(["simulate", "--scenario", "lab_semantic", "--participants", "10", "--items", "12", "--out", str(a)])
    main(["simulate", "--scenario", "online_semantic", "--participants", "10", "--items", "12", "--seed", "1",
          "--out", str(b)])
    flag = "--allow-nonpositive-rt"
    assert main(["reliability", str(a), str(b), flag, "--out", str(tmp_path / "rel")]) == 0
    rel = read_report(tmp_path / "rel.json")
    assert len(rel.results) == 2 and "comparison" in rel.details
    assert main(["varcomp", str(a), str(b), flag]) == 0
    assert main(["varcomp", "--stats", "1.2922", "45", "1", "45"]) == 0
    assert "0.046" in capsys.readouterr().out
    assert main(["compare", str(a), str(b), flag, "--nboot", "200", "--out", str(tmp_path / "cmp")]) == 0
    cmp = read_report(tmp_path / "cmp.json")
    assert cmp.results[0]["quantity"].startswith("mean difference")
    assert "interaction_fit" in cmp.details
    assert main(["varcomp", str(a)]) == 1
