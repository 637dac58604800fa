import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from grbffd import PointCloud
from grbffd import cli
from grbffd.exceptions import SolverError
from grbffd.verification import CSV_COLUMNS


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_config(path, **overrides):
    cfg = {
        "manifold": "ellipse1d",
        "N": [200, 400],
        "trials": 2,
        "mode": "random",
        "methods": [{"method": "gmls"}, {"method": "grbffd"}],
        "K": {"policy": "fixed", "k": 20},
        "output_dir": str(path.parent / "out"),
    }
    cfg.update(overrides)
    path.write_text(json.dumps(cfg, indent=2))
    return path


def test_run_writes_outputs(tmp_path):
    cfg = write_config(tmp_path / "run.json", eigenvalues={"count": 3, "shift": 10})
    assert cli.main(["run", str(cfg)]) == 0
    out = tmp_path / "out"
    with open(out / "convergence.csv") as fh:
        assert fh.readline().strip().split(",") == list(CSV_COLUMNS)
    rows = read_csv(out / "convergence.csv")
    assert len(rows) == 2 * 2 * 2
    assert [(r["method"], r["N"], r["trial"], r["seed"]) for r in rows] == [
        (m, str(N), str(t), str(t)) for m in ("GMLS-1/K", "gRBF-FD") for N in (200, 400) for t in (0, 1)]
    eig = read_csv(out / "eigenvalues.csv")
    assert len(eig) == 8 * 3 and abs(float(eig[0]["real"])) < 1e-8
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["methods"][1]["K"] == {"policy": "fixed", "k": 20}
    assert manifest["methods"][0]["delta"] == 1e-6


def test_rerun_and_manifest_are_reproducible(tmp_path):
    cfg = write_config(tmp_path / "run.json")
    assert cli.main(["run", str(cfg)]) == 0
    assert cli.main(["run", str(cfg), "--out", str(tmp_path / "again")]) == 0
    assert cli.main(["run", str(tmp_path / "out" / "manifest.json"), "--out", str(tmp_path / "manifest")]) == 0

    def numeric(path):
        return [{k: v for k, v in r.items() if k != "wall_time_s"} for r in read_csv(path)]

    first = numeric(tmp_path / "out" / "convergence.csv")
    assert numeric(tmp_path / "again" / "convergence.csv") == first
    assert numeric(tmp_path / "manifest" / "convergence.csv") == first


@pytest.mark.parametrize("override,line", [({"methods": []}, "methods"), ({"manifold": "torus"}, "manifold"),
                                           ({"N": [400, "x"]}, "N"), ({"K": {"policy": "fixed"}}, "K"),
                                           ({"trials": 0}, "trials"), ({"colour": 1}, "colour")])
def test_invalid_config_exit_2(tmp_path, capsys, override, line):
    cfg = write_config(tmp_path / "bad.json", **override)
    assert cli.main(["run", str(cfg)]) == 2
    err = capsys.readouterr().err
    expected = next(i for i, s in enumerate(cfg.read_text().splitlines(), 1) if f'"{line}"' in s)
    assert f"bad.json:{expected}:" in err


def test_malformed_json_exit_2(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text('{\n  "manifold": "ellipse1d",\n  "N": [400,]\n}\n')
    assert cli.main(["run", str(path)]) == 2
    assert "broken.json:3:" in capsys.readouterr().err


def test_k_not_above_m_exit_2(tmp_path):
    cfg = write_config(tmp_path / "bad.json", K={"policy": "fixed", "k": 5})
    assert cli.main(["run", str(cfg)]) == 2


def test_numerical_failure_exit_3(tmp_path, capsys, monkeypatch):
    def boom(*args, **kwargs):
        raise SolverError("GMRES stalled", residual=1e-3)

    monkeypatch.setattr(cli, "run_trial", boom)
    cfg = write_config(tmp_path / "run.json")
    assert cli.main(["run", str(cfg)]) == 3
    err = capsys.readouterr().err
    assert "method=GMLS-1/K" in err and "N=200" in err and "trial=0" in err


def test_sample_assemble_solve(tmp_path, capsys):
    cloud, op, stats = tmp_path / "c.npz", tmp_path / "L.mtx", tmp_path / "stencils.csv"
    assert cli.main(["sample", "--manifold", "ellipse1d", "--n", "400", "--mode", "well_sampled", "--out", str(cloud)]) == 0
    assert PointCloud.load(cloud).N == 400
    assert cli.main(["assemble", "--cloud", str(cloud), "--method", "gmls", "--k-fixed", "30",
                     "--out", str(op), "--stats", str(stats)]) == 0
    rows = read_csv(stats)
    assert len(rows) == 400 and rows[0]["K"] == "30" and float(rows[0]["d_k_max"]) > 0
    sol = tmp_path / "F.csv"
    assert cli.main(["solve", "--cloud", str(cloud), "--operator", str(op), "--out", str(sol)]) == 0
    line = capsys.readouterr().out
    fe = float(line.split("FE=")[1].split()[0])
    assert fe <= 1e-2
    F = np.array([float(r["F"]) for r in read_csv(sol)])
    f = np.array([float(r["f"]) for r in read_csv(sol)])
    assert np.abs(F - f).max() < 1e-3


def test_solve_size_mismatch_exit_2(tmp_path):
    a, b, op = tmp_path / "a.npz", tmp_path / "b.npz", tmp_path / "L.mtx"
    cli.main(["sample", "--n", "300", "--out", str(a)])
    cli.main(["sample", "--n", "200", "--out", str(b)])
    cli.main(["assemble", "--cloud", str(a), "--k-fixed", "20", "--out", str(op)])
    assert cli.main(["solve", "--cloud", str(b), "--operator", str(op)]) == 2


def test_converge_and_diagnose(tmp_path, capsys):
    out = tmp_path / "sweep"
    assert cli.main(["converge", "--manifold", "ellipse1d", "--n", "200,400,800", "--method", "gmls,grbffd",
                     "--k-fixed", "20", "--trials", "2", "--no-norm", "--out", str(out)]) == 0
    capsys.readouterr()
    assert cli.main(["diagnose", "slopes", "--csv", str(out / "convergence.csv")]) == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert [r["method"] for r in rows] == ["GMLS-1/K", "gRBF-FD"]
    assert all(float(r["FE_slope"]) < -1 and float(r["IE_stderr"]) >= 0 for r in rows)
    assert cli.main(["diagnose", "errorbars", "--csv", str(out / "convergence.csv")]) == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert len(rows) == 6 and all(r["trials"] == "2" and float(r["FE_std"]) > 0 for r in rows)


def test_diagnose_suites(tmp_path, capsys):
    assert cli.main(["diagnose", "reproduction", "--manifold", "rbc2d", "--n", "2000", "--k0", "40",
                     "--trials", "10"]) == 0
    row = next(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert float(row["max_defect_scaled"]) <= 1e-7
    out = tmp_path / "reg.csv"
    assert cli.main(["diagnose", "regularization", "--n", "1600", "--out", str(out)]) == 0
    assert len(read_csv(out)) == 17
    assert cli.main(["diagnose", "diameters", "--manifold", "flat_torus3d", "--ns", "2000,4000", "--k0", "20",
                     "--trials", "1"]) == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 3
    assert cli.main(["diagnose", "slopes"]) == 2


def test_eigs(capsys):
    assert cli.main(["eigs", "--manifold", "ellipse1d", "--n", "400", "--k0", "20", "--count", "4"]) == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert len(rows) == 4 and abs(float(rows[0]["real"])) < 1e-8
    assert all(float(r["real"]) <= 1e-8 for r in rows)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "grbffd", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "converge" in res.stdout
    res = subprocess.run([sys.executable, "-m", "grbffd", "sample", "--n", "10", "--out", "x.npz", "--mode", "grid"],
                         capture_output=True, text=True)
    assert res.returncode == 2
