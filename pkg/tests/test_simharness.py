import csv
import math

import numpy as np
import pytest
from scipy import stats as sps

from strata_rand.errors import DomainError
from strata_rand.simharness import (CSV_COLUMNS, SimConfig, cell_design, draw_instruments, generate_design,
                                    rejection_table, run_cell, simulate_replication, stream, table_text,
                                    write_table)


def test_coarse_grid_has_few_strata():
    d = generate_design(SimConfig(), np.random.default_rng(0), k=1, r=80)
    assert d.S <= 5 and d.layout.n == 400


def test_fine_grid_counts():
    cfg = SimConfig()
    for seed in range(5):
        d = cell_design(SimConfig(seed=seed), 1, 2)
        assert 150 <= d.S <= 190
        assert 5 <= d.max_ns <= 10
    assert cfg.full_scale().ks == (1, 3)


def test_design_deterministic():
    a, b = cell_design(SimConfig(seed=4), 3, 10), cell_design(SimConfig(seed=4), 3, 10)
    assert np.array_equal(a.z, b.z) and a.layout == b.layout
    c = cell_design(SimConfig(seed=5), 3, 10)
    assert not np.array_equal(a.z, c.z)


def test_instruments_shared_across_grids():
    a, b = cell_design(SimConfig(), 1, 2), cell_design(SimConfig(), 1, 80)
    assert np.array_equal(np.sort(a.z[:, 0]), np.sort(b.z[:, 0]))


def test_replication_deterministic():
    cfg = SimConfig()
    d = cell_design(cfg, 1, 5)
    assert simulate_replication(d, cfg, stream(1, 2)) == simulate_replication(d, cfg, stream(1, 2))


def test_instrument_covariance_is_identity():
    z = draw_instruments(400_000, 2, np.random.default_rng(1))
    assert np.allclose(np.cov(z.T), np.eye(2), atol=0.02)
    # heavier than Gaussian: t_5 excess kurtosis is 6
    assert sps.kurtosis(z[:, 0]) > 3


@pytest.mark.parametrize("rho", [0.0, 0.5])
def test_error_dependence(rho):
    cfg = SimConfig(n=100_000, rs=(1000,), rho=rho)
    d = cell_design(cfg, 1, 1000)
    ds = simulate_replication(d, cfg, stream(3, 0))
    v = ds.d - ds.z[:, 0] * math.sqrt(cfg.lambda_strength / cfg.n)
    r = sps.spearmanr(ds.y, v).statistic
    if rho == 0:
        assert abs(r) < 0.01
    else:
        assert r > 0.1


def test_rejects_empty_grid():
    with pytest.raises(DomainError):
        SimConfig(n=10, rs=(20,))
    with pytest.raises(DomainError):
        SimConfig(replications=0)


def test_thread_count_does_not_change_counts():
    cfg = SimConfig(replications=300, rs=(10,))
    one = run_cell(cfg, 1, 10, threads=1, chunk=100)
    two = run_cell(cfg, 1, 10, threads=2, chunk=100)
    assert one.rejections == two.rejections


def test_no_first_stage_still_size_correct():
    cfg = SimConfig(replications=1000, rs=(10,), lambda_strength=0.0, seed=21)
    rows = rejection_table(cfg)
    for row in rows:
        if row["stat"] in ("BN*", "BW*"):
            assert 3.0 <= row["rejection_pct"] <= 7.0, row


def test_table_output(tmp_path):
    cfg = SimConfig(replications=50, rs=(25, 80))
    rows = rejection_table(cfg)
    assert [r["stat"] for r in rows[:4]] == ["BN*", "BW*", "BN", "BW"]
    path = tmp_path / "t.csv"
    write_table(rows, path)
    with open(path, newline="") as fh:
        read = list(csv.DictReader(fh))
    assert list(read[0]) == CSV_COLUMNS and len(read) == 8
    text = table_text(rows)
    assert "k=1,r=80" in text and text.splitlines()[-1].startswith("S")


@pytest.mark.slow
def test_legacy_rates_improve_with_stratum_size():
    rows = rejection_table(SimConfig())
    for stat in ("BN", "BW"):
        rates = [r["rejection_pct"] for r in rows if r["stat"] == stat]
        assert all(b >= a - 1.5 for a, b in zip(rates, rates[1:])), (stat, rates)
