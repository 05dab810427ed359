import json
import subprocess
import sys

import numpy as np
import pytest

from asalvc.cli import RunSpec, execute, main, run_checks
from asalvc.network import save_case, simple_case


@pytest.fixture
def case_files(tmp_path):
    one = tmp_path / "one.json"
    chain = tmp_path / "chain.json"
    save_case(simple_case([0], [0.01], [0.02], p_load=[-0.5], q_load=[-0.2]), one)
    save_case(simple_case([0, 1], [0.005, 0.005], [0.01, 0.01], p_load=[-0.01, -0.01],
                          q_load=[-0.005, -0.005], q_bound=0.1), chain)
    return one, chain


def test_synth_l_single_and_chain(case_files, tmp_path):
    one, chain = case_files
    for path, want in ((one, {"1": 0.02}), (chain, {"1": 0.02, "2": 0.03})):
        out = tmp_path / f"L_{path.stem}.json"
        assert main(["synth-l", str(path), "-o", str(out)]) == 0
        doc = json.loads(out.read_text())
        cert = doc.pop("_certificate")
        assert doc.keys() == want.keys()
        for k, v in want.items():
            assert doc[k] == pytest.approx(v, abs=1e-6)
        assert cert["min_eig_L_minus_A"] >= cert["tolerance"]


def test_check_report(case_files, capsys):
    _, chain = case_files
    assert main(["check", str(chain)]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "sigma_min(A) = " in out


def test_check_corrupted(case_files, capsys):
    _, chain = case_files
    main(["check", str(chain), "--corrupt-a"])
    line = next(ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("A symmetric"))
    assert "FAIL" in line


def test_run_checks_rows(case_files):
    from asalvc.network import load_case

    rows = run_checks(load_case(case_files[1]))
    assert all(ok for _, ok, _ in rows)
    assert {r[0] for r in rows} >= {"A symmetric", "A positive definite", "A matches path overlap", "phi A = I"}


def test_run_static_two_controllers(case_files, tmp_path):
    _, chain = case_files
    out = tmp_path / "run"
    assert main(["run", str(chain), "--controllers", "asalvc,gpdc", "--oracle", "--out", str(out)]) == 0
    assert (out / "trace_asalvc.csv").exists() and (out / "trace_gpdc.csv").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert "oracle_objective" in summary
    for name in ("asalvc", "gpdc"):
        s = summary["controllers"][name]
        assert s["iterations"] >= 1 and s["iterations_to_gap"] is not None
    assert summary["controllers"]["asalvc"]["iterations"] <= summary["controllers"]["gpdc"]["iterations"]


def test_run_from_spec_online(case_files, tmp_path):
    _, chain = case_files
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"case": str(chain), "scenario": "sudden_change",
                                "scenario_params": {"steps": 30}, "controllers": ["cdc", "asalvc"],
                                "out": str(tmp_path / "o")}))
    assert main(["run", "--spec", str(spec)]) == 0
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["plant"] == "nonlinear"
    assert summary["controllers"]["asalvc"]["steps"] == 30


def test_make_case_and_timeline(tmp_path):
    case = tmp_path / "feeder.json"
    tl = tmp_path / "tl.csv"
    assert main(["make-case", "-n", "10", "--seed", "3", "--capacity-kva", "50", "-o", str(case)]) == 0
    assert main(["make-timeline", str(case), "--steps", "12", "--dt", "600", "--pv-peak", "0.3",
                 "-o", str(tl)]) == 0
    assert tl.read_text().splitlines()[0].startswith("time_s,p_load_")
    summary, traces = execute(RunSpec(case=case, timeline=tl, controllers=["asalvc"], out=tmp_path / "x"))
    assert traces["asalvc"].steps == 12
    assert summary["controllers"]["asalvc"]["capacity_violation_count"] == 0


def test_missing_case_exit_code(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["run", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err
    assert main(["check", str(missing)]) == 2


def test_bad_inputs_exit_code(case_files, tmp_path, monkeypatch):
    one, _ = case_files
    assert main(["run", str(one), "--controllers", "magic"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"buses": []}')
    assert main(["check", str(bad)]) == 2
    monkeypatch.setenv("ASALVC_THREADS", "many")
    assert main(["run", str(one), "--out", str(tmp_path / "r")]) == 2


def test_plant_failure_exit_code(tmp_path):
    case = tmp_path / "heavy.json"
    save_case(simple_case([0], [0.01], [0.02], p_load=[-1000.0], q_bound=0.1), case)
    assert main(["run", str(case), "--plant", "nonlinear", "--controllers", "cdc",
                 "--out", str(tmp_path / "r")]) == 1


def test_threads_env(case_files, tmp_path, monkeypatch):
    _, chain = case_files
    monkeypatch.setenv("ASALVC_THREADS", "3")
    summary, traces = execute(RunSpec(case=chain, controllers=["cdc", "ddc", "gpdc", "sgpdc", "asalvc", "none"],
                                      out=tmp_path / "t"))
    assert set(summary["controllers"]) == {"cdc", "ddc", "gpdc", "sgpdc", "asalvc", "none"}
    np.testing.assert_array_equal(traces["none"].q, 0.0)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "asalvc", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("run", "synth-l", "check", "make-case", "make-timeline"):
        assert cmd in res.stdout
