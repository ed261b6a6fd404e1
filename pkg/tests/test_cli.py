import json
import subprocess
import sys

import numpy as np
import pytest

from optrerand.cli import main, validate_design
from optrerand.design_space import decode_assignment
from optrerand.io import load_design


@pytest.fixture
def xfile(tmp_path):
    X = np.random.default_rng(1).standard_normal((20, 2))
    p = tmp_path / "x.csv"
    p.write_text("a,b\n" + "\n".join(f"{float(u)!r},{float(v)!r}" for u, v in X) + "\n")
    return p


@pytest.fixture
def design_file(tmp_path, xfile):
    out = tmp_path / "d.json"
    assert main(["design", "--x", str(xfile), "--S", "400", "--seed", "3", "--out", str(out)]) == 0
    return out


def test_design_and_validate(design_file, capsys):
    capsys.readouterr()
    assert main(["validate", "--design", str(design_file)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(ln.startswith("PASS") for ln in lines)
    assert any("criterion_recomputed" in ln for ln in lines)


def test_validate_catches_tampering(design_file, tmp_path, capsys):
    d = json.loads(design_file.read_text())
    d["result"]["a_star"] *= 0.5
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(d))
    assert main(["validate", "--design", str(bad)]) == 2
    assert "FAIL threshold_matches" in capsys.readouterr().out


def test_assign_is_in_design(design_file, capsys):
    capsys.readouterr()
    assert main(["assign", "--design", str(design_file), "--seed", "5"]) == 0
    line = capsys.readouterr().out.strip()
    W = load_design(design_file).result.W_star
    w = decode_assignment(line, 20)
    assert any(np.array_equal(w, r) for r in W)


def test_test_subcommand(design_file, tmp_path, capsys):
    design = load_design(design_file).result
    w = design.W_star[0]
    y = 2.0 * w + np.random.default_rng(0).standard_normal(20)
    (tmp_path / "y.txt").write_text("\n".join(repr(float(v)) for v in y) + "\n")
    (tmp_path / "w.txt").write_text("".join("+" if v > 0 else "-" for v in w) + "\n")
    capsys.readouterr()
    rc = main(["test", "--design", str(design_file), "--y", str(tmp_path / "y.txt"),
               "--w", str(tmp_path / "w.txt"), "--R", "200", "--ci"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["reject"] and out["R_used"] == 200
    assert out["ci"][0] <= out["estimate"] <= out["ci"][1]


def test_bad_input_exit_2(tmp_path, capsys):
    p = tmp_path / "x.csv"
    p.write_text("1\nNA\n3\n4\n")
    assert main(["design", "--x", str(p)]) == 2
    assert "row 2" in capsys.readouterr().err
    assert main(["validate", "--design", str(tmp_path / "missing.json")]) == 2


def test_singular_exit_3(tmp_path, capsys):
    p = tmp_path / "x.csv"
    rows = [(i, 2 * i) for i in range(1, 11)]
    p.write_text("\n".join(f"{a},{b}" for a, b in rows) + "\n")
    assert main(["design", "--x", str(p), "--S", "100"]) == 3
    assert "numerical" in capsys.readouterr().err


def test_simulate_writes_tables(tmp_path):
    cfg = tmp_path / "sim.json"
    cfg.write_text(json.dumps({"n": 12, "p": 2, "S": 200, "outer_draws": 100, "inner_draws": 100}))
    out = tmp_path / "out"
    assert main(["simulate", "strategy-comparison", "--config", str(cfg), "--out-dir", str(out)]) == 0
    assert (out / "summary.json").exists()
    assert any(p.suffix == ".csv" for p in out.iterdir())


def test_simulate_bad_config(tmp_path):
    cfg = tmp_path / "sim.json"
    cfg.write_text(json.dumps({"n": 11}))
    assert main(["simulate", "tail-agreement", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 2


def test_module_entry_point(design_file):
    r = subprocess.run([sys.executable, "-m", "optrerand.cli", "validate", "--design", str(design_file)],
                       capture_output=True, text=True)
    assert r.returncode == 0


def test_validate_design_api(design_file):
    checks = validate_design(load_design(design_file).result)
    assert {name for name, _, _ in checks} >= {"forced_balance", "mirror_closed", "distinct"}
