import json
import subprocess
import sys

import pytest

from hcjump.cli import read_paths, run_command


@pytest.fixture
def cell(tmp_path, box1d_toml):
    out = tmp_path / "cell.json"
    assert run_command(["solve-cell", "--config", str(box1d_toml), "--out", str(out)]) == 0
    return out


def test_validate_ok(tmp_path, box1d_toml):
    out = tmp_path / "v.json"
    assert run_command(["validate", "--config", str(box1d_toml), "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["checks"]["passed"] and len(rep["checks"]["checks"]) >= 5
    assert rep["connectivity"]["connected"]


def test_unknown_subcommand(capsys):
    assert run_command(["frobnicate"]) == 64
    assert "usage" in capsys.readouterr().err
    assert run_command([]) == 64


def test_validation_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text('[geometry]\ndim = 1\n\n[kernel]\nfamily = "box"\nradius = 1.0\ncenter = 0.5\n')
    assert run_command(["validate", "--config", str(p), "--json-diagnostics"]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "EmptyPhase"


def test_disconnected_exit_code(tmp_path, box1d_toml):
    p = tmp_path / "half.toml"
    p.write_text(box1d_toml.read_text().replace("radius = 1.0", "radius = 0.5"))
    assert run_command(["solve-cell", "--config", str(p), "--out", str(tmp_path / "c.json")]) == 2


def test_numerical_guard_exit_code(tmp_path, box1d_toml):
    assert run_command(["converge", "--config", str(box1d_toml), "--nodes", "16",
                        "--out", str(tmp_path / "c.json")]) == 3


def test_io_exit_code(tmp_path):
    assert run_command(["validate", "--config", str(tmp_path / "missing.toml")]) == 4


def test_solve_cell_outputs(cell):
    data = json.loads(cell.read_text())
    assert data["theta"]["theta"][0][0] == pytest.approx(1 / 12, abs=1e-3)
    assert abs(data["compatibility"]["phi"][0]) <= 1e-10
    man = json.loads((cell.parent / "cell.json.manifest.json").read_text())
    for f in data["files"].values():
        assert f in man["outputs"]
    assert man["subcommand"] == "solve-cell" and len(man["config_hash"]) == 64


def test_simulation_pipeline(tmp_path, box1d_toml, cell):
    eps_csv, lim_csv = tmp_path / "e.csv", tmp_path / "l.csv"
    assert run_command(["simulate-eps", "--config", str(box1d_toml), "--paths", "300", "--eps", "0.1",
                        "--times", "0.5,1", "--out", str(eps_csv)]) == 0
    assert run_command(["simulate-limit", "--cell", str(cell), "--paths", "300", "--horizon", "1",
                        "--times", "0.5,1", "--seed", "3", "--out", str(lim_csv)]) == 0
    a, b = read_paths(eps_csv), read_paths(lim_csv)
    assert a.x.shape == (300, 2, 1) and b.x.shape == (300, 2, 1)
    law = tmp_path / "law.json"
    assert run_command(["law-test", "--eps-paths", str(eps_csv), "--limit-paths", str(lim_csv),
                        "--times", "0.5,1", "--bootstrap", "20", "--out", str(law)]) == 0
    rows = json.loads(law.read_text())["rows"]
    assert [r["t"] for r in rows] == [0.5, 1.0]
    header = lim_csv.read_text().splitlines()[0]
    assert header == "path,t,x1,phase,xi1"


def test_threads_give_identical_csv(tmp_path, box1d_toml):
    outs = []
    for th in ("1", "4"):
        p = tmp_path / f"e{th}.csv"
        assert run_command(["simulate-eps", "--config", str(box1d_toml), "--paths", "700",
                            "--threads", th, "--out", str(p)]) == 0
        outs.append(p.read_bytes())
    assert outs[0] == outs[1]


def test_memory_and_spectrum(tmp_path, cell):
    mem = tmp_path / "mem.csv"
    assert run_command(["memory", "--cell", str(cell), "--T", "1", "--out", str(mem)]) == 0
    summary = json.loads((tmp_path / "mem.csv.summary.json").read_text())
    assert max(summary["max_relative_difference"].values()) <= 1e-3
    spec = tmp_path / "spec.json"
    assert run_command(["spectrum", "--cell", str(cell), "--samples", "50", "--out", str(spec)]) == 0
    rep = json.loads(spec.read_text())
    assert rep["lambda1"] == pytest.approx(0.5, abs=1e-3)


def test_console_script(tmp_path, box1d_toml):
    res = subprocess.run([sys.executable, "-m", "hcjump.cli", "validate", "--config", str(box1d_toml)],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert json.loads(res.stdout)["checks"]["passed"]
