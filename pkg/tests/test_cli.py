import json
import subprocess
import sys

import numpy as np
import pytest

from strata_rand.cli import run
from strata_rand.core import StrataLayout, StratifiedDataset, write_dataset


@pytest.fixture
def data_csv(tmp_path):
    rng = np.random.default_rng(0)
    lay = StrataLayout((6,) * 10)
    z = rng.normal(size=(lay.n, 2))
    ds = StratifiedDataset(lay, rng.normal(size=lay.n), rng.normal(size=lay.n), z)
    path = tmp_path / "data.csv"
    write_dataset(ds, path)
    return path


@pytest.fixture
def scalar_csv(tmp_path):
    rng = np.random.default_rng(1)
    lay = StrataLayout((4, 3, 4))
    ds = StratifiedDataset(lay, rng.normal(size=lay.n), rng.normal(size=lay.n), rng.normal(size=lay.n))
    path = tmp_path / "scalar.csv"
    write_dataset(ds, path)
    return path


def test_verify_coupling(capsys):
    assert run(["verify", "--suite", "coupling", "--max-stratum", "3"]) == 0
    out = capsys.readouterr().out
    assert "coupling [2, 3]" in out and "3/3 checks passed" in out


def test_verify_constants(capsys):
    assert run(["verify", "--suite", "constants"]) == 0


def test_verify_random_suites_need_seed(capsys):
    assert run(["verify", "--suite", "moments"]) == 2
    assert run(["verify", "--suite", "moments", "--seed", "1", "--instances", "5"]) == 0


def test_test_am_json(data_csv, capsys):
    assert run(["test-am", "--input", str(data_csv), "--beta0", "0", "--score", "normal",
                "--variant", "star", "--seed", "3"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["method"] == "AM-chi2-star" and rep["details"]["k"] == 2 and rep["seed"] == 3


def test_mc_needs_seed(data_csv, capsys):
    assert run(["test-am", "--input", str(data_csv), "--mode", "mc"]) == 2
    assert "--seed" in capsys.readouterr().err


def test_unknown_flag(capsys):
    assert run(["verify", "--frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err


def test_missing_file_is_error(tmp_path, capsys):
    assert run(["test-ir", "--input", str(tmp_path / "nope.csv")]) == 1


def test_test_ir_csv_and_out(scalar_csv, tmp_path, capsys):
    out = tmp_path / "r.csv"
    assert run(["test-ir", "--input", str(scalar_csv), "--mode", "exact", "--format", "csv",
                "--out", str(out), "--min-effective", "0"]) == 0
    header, row = out.read_text().strip().split("\n")
    fields = dict(zip(header.split(","), row.split(",")))
    assert fields["method"] == "IR-wilcoxon-identity"
    assert 0 < float(fields["p_exact"]) <= 1
    assert not list(tmp_path.glob(".tmp-*"))


def test_mc_reports_byte_identical(data_csv, tmp_path):
    paths = [tmp_path / "a.json", tmp_path / "b.json"]
    for p in paths:
        assert run(["test-am", "--input", str(data_csv), "--mode", "mc", "--reps", "299", "--seed", "5",
                    "--out", str(p)]) == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_diagnose_dataset(data_csv, capsys):
    assert run(["diagnose", "--input", str(data_csv), "--score", "wilcoxon", "--seed", "1"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["diagnostics"]["sigma_n_sq"] == pytest.approx(1.0)
    assert rep["lambda_min"] > 0
    assert set(rep["diagnostics"]["lindeberg"]) == {"0.01", "0.05", "0.1", "0.5"}


def test_diagnose_zero_array(tmp_path, capsys):
    path = tmp_path / "a.json"
    path.write_text(json.dumps({"blocks": [[[0, 0], [0, 0]], [[0.0]]]}))
    assert run(["diagnose", "--array", str(path)]) == 1
    assert "degenerate" in capsys.readouterr().err


def test_diagnose_array_flags_singletons(tmp_path, capsys):
    path = tmp_path / "a.json"
    path.write_text(json.dumps({"blocks": [[[0.25, -0.25], [-0.25, 0.25]], [[0.0]]]}))
    assert run(["diagnose", "--array", str(path)]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["diagnostics"]["sigma_n_sq"] == pytest.approx(0.25)
    assert "warning" in rep


def test_diagnose_finite_population(data_csv, capsys):
    assert run(["diagnose", "--input", str(data_csv), "--finite-pop", "--n1", "3"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["finite_pop"]["match"] is True


def test_simulate_round_trip(tmp_path, capsys):
    table, data = tmp_path / "t.csv", tmp_path / "d.csv"
    args = ["simulate", "--r", "2", "--reps", "40", "--seed", "9", "--out", str(table), "--dataset-out", str(data)]
    assert run(args) == 0
    first = table.read_bytes(), data.read_bytes()
    assert run(args) == 0
    assert (table.read_bytes(), data.read_bytes()) == first
    assert run(["diagnose", "--input", str(data), "--score", "normal", "--seed", "1"]) == 0
    assert run(["simulate", "--reps", "10"]) == 2


def test_threads_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("STRATA_RAND_THREADS", "2")
    out = tmp_path / "t2.csv"
    assert run(["simulate", "--r", "25", "--reps", "60", "--seed", "2", "--out", str(out)]) == 0
    ref = tmp_path / "t1.csv"
    assert run(["simulate", "--r", "25", "--reps", "60", "--seed", "2", "--out", str(ref), "--threads", "1"]) == 0
    assert out.read_bytes() == ref.read_bytes()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "strata_rand", "verify", "--suite", "constants"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "6/6 checks passed" in res.stdout
