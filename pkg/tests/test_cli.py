import json
import subprocess
import sys

import pytest
import yaml

from junctionlab.artifacts import read_csv
from junctionlab.cli import build_parser, main, reference_markdown
from junctionlab.model import canonical_spec, dump_spec


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_homogenize_prints_values_and_writes_outputs(tmp_path, capsys):
    code, out, _ = _run(capsys, "homogenize", "--spec", "M-two-type", "--out", tmp_path)
    assert code == 0
    assert "A0 = -0.8" in out
    names = set(_files(tmp_path))
    assert {"hamiltonians.csv", "hamiltonians.manifest.json", "hamiltonians.svg", "velocities.csv",
            "effective.json", "homogenize-report.json"} <= names
    header, data = read_csv(tmp_path / "hamiltonians.csv")
    assert header == ["k", "p", "H"]
    assert data[:, 2].min() == pytest.approx(-0.8, abs=1e-6)
    man = json.loads((tmp_path / "hamiltonians.manifest.json").read_text())
    assert man["spec_hash"] == canonical_spec("M-two-type").digest()
    assert "numpy" in man["versions"]


def test_missing_spec_exits_with_usage_code(tmp_path, capsys):
    code, _, err = _run(capsys, "homogenize", "--spec", tmp_path / "nope.yaml", "--out", tmp_path / "o")
    assert code == 2
    assert "nope.yaml" in err


def test_malformed_spec_reports_the_line(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("name: x\nroads: 1\ndelta_min: [1.0\ne_max: 3\n")
    code, _, err = _run(capsys, "homogenize", "--spec", bad, "--out", tmp_path / "o")
    assert code == 2
    assert "bad.yaml:4" in err


def test_invariant_failure_removes_partial_outputs(tmp_path, capsys):
    # a fast type whose top speed exceeds the others' breaks the saturation assumptions
    d = yaml.safe_load(dump_spec(canonical_spec("M-two-type")))
    d["types"][1]["profiles"]["incoming"]["values"] = [0.0, 3.0]
    spec = tmp_path / "fast.yaml"
    spec.write_text(yaml.safe_dump(d))
    out = tmp_path / "o"
    code, _, err = _run(capsys, "homogenize", "--spec", spec, "--out", out)
    assert code == 1
    assert "invariant" in err
    assert not out.exists() or not any(out.iterdir())


def test_simulate_is_byte_identical_across_reruns(tmp_path, capsys):
    args = ["simulate", "--spec", "M-sym-2roads", "--horizon", "10", "--replicates", "2", "--window", "-40", "30",
            "--seed", "5", "--stream"]
    assert _run(capsys, *args, "--out", tmp_path / "a")[0] == 0
    assert _run(capsys, *args, "--out", tmp_path / "b")[0] == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert a == b
    assert {"theta.csv", "theta.manifest.json", "theta.svg", "trajectory.bin"} <= set(a)
    man = json.loads(a["theta.manifest.json"])
    assert man["seed"] == 5 and len(man["replicate_seeds"]) == 2


def test_worker_count_does_not_change_results(tmp_path, capsys):
    args = ["estimate-limiter", "--spec", "M-two-type", "--law", "free-road", "--horizon", "20",
            "--replicates", "8"]
    assert _run(capsys, *args, "--workers", "1", "--out", tmp_path / "a")[0] == 0
    assert _run(capsys, *args, "--workers", "2", "--out", tmp_path / "b")[0] == 0
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
    est = json.loads((tmp_path / "a" / "limiter.json").read_text())
    assert est["A0"] == pytest.approx(-0.8)
    assert est["A0"] <= est["reported"] <= 0


def test_solve_macro_uses_limiter_file(tmp_path, capsys):
    lf = tmp_path / "limiter.json"
    lf.write_text(json.dumps({"reported": -0.5}))
    code, out, _ = _run(capsys, "solve-macro", "--limiter-file", lf, "--dx", "0.05", "--out", tmp_path / "o")
    assert code == 0 and "A = -0.500000" in out
    man = json.loads((tmp_path / "o" / "nu.manifest.json").read_text())
    assert man["A"] == -0.5 and man["linf_error_vs_closed"] <= 0.1


def test_config_file_supplies_defaults(tmp_path, capsys):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("dx: 0.1\nhorizon: 0.5\n")
    code, out, _ = _run(capsys, "--config", cfg, "solve-macro", "--out", tmp_path / "o")
    assert code == 0 and "dx = 0.1" in out
    man = json.loads((tmp_path / "o" / "nu.manifest.json").read_text())
    assert man["parameters"]["horizon"] == 0.5
    # flags beat the file
    code, out, _ = _run(capsys, "--config", cfg, "solve-macro", "--dx", "0.05", "--out", tmp_path / "p")
    assert "dx = 0.05" in out
    cfg.write_text("- not a mapping\n")
    assert _run(capsys, "--config", cfg, "solve-macro", "--out", tmp_path / "q")[0] == 2


def test_diagnostics_subset(tmp_path, capsys):
    code, out, _ = _run(capsys, "diagnostics", "--which", "propagation", "corrector", "--replicates", "2",
                        "--depth", "100", "--corrector-n", "500", "--out", tmp_path)
    assert code == 0
    _, data = read_csv(tmp_path / "corrector_slopes.csv")
    assert data.shape[1] == 4
    assert json.loads((tmp_path / "diagnostics.json").read_text())["corrector"]["increments_ok"]


def test_no_command_is_a_usage_error(capsys):
    assert _run(capsys)[0] == 2


def test_reference_lists_every_subcommand_and_flag():
    ref = reference_markdown(build_parser())
    for name in ("homogenize", "simulate", "estimate-limiter", "solve-macro", "compare", "diagnostics"):
        assert f"## {name}" in ref
    for flag in ("--spec", "--law", "--seed", "--workers", "--out", "--limiter-file", "--stream"):
        assert flag in ref


def test_console_script_entry_point():
    r = subprocess.run([sys.executable, "-m", "junctionlab.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "junctionlab" in r.stdout
