import json
import math

import numpy as np
import pytest

from objgp.correlation import CorrelationFamily, FactorModel, build_factor
from objgp.coverage import (
    MAX_EXCLUDED_FRACTION, StudyConfig, StudyFailedError, Truth, aggregate, equally_spaced_grid,
    mean_factors, propriety_probe, replication_seeds, run_replication, run_study,
    simulate_dataset, worker_count,
)
from objgp.data import GpDataset
from objgp.kron import KroneckerFactors, kron_expand

TINY = StudyConfig(truth=Truth(), grid_sizes=(4, 4), replications=3, iterations=150, burn_in=20)


def truth_covariance(truth, grid):
    mats = [build_factor(FactorModel(f, p, x)) for f, p, x in zip(truth.families, grid.factors, truth.xi)]
    return truth.sigma_sq * kron_expand(KroneckerFactors(tuple(mats)))


def test_truth_beta_to_range():
    t = Truth(beta=(4.0, 9.0), alpha=(2.0, 2.0))
    np.testing.assert_allclose(t.xi, [2.0, 3.0])
    # exp(-beta d^alpha) and exp(-(xi d)^alpha) agree
    fam = t.families[0]
    assert fam.corr(0.3, t.xi[0]) == pytest.approx(np.exp(-4.0 * 0.3**2), rel=1e-14)


def test_truth_validation():
    with pytest.raises(ValueError, match="alpha"):
        Truth(alpha=(1.5, 2.5))
    with pytest.raises(ValueError, match="one entry"):
        Truth(beta=(1.0,), alpha=(1.0, 1.0))
    with pytest.raises(ValueError, match="mean"):
        Truth(mean="quadratic")


def test_mean_structures():
    g = equally_spaced_grid((3, 2), (0.0, 1.0), (1.0, 2.0))
    c, s, p = (mean_factors(t, g) for t in ("constant", "x1_slope", "coordinate_product"))
    np.testing.assert_array_equal(c[0], np.ones(3))
    np.testing.assert_array_equal(s[0], [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(s[1], np.ones(2))
    np.testing.assert_array_equal(p[1], [1.0, 2.0])


def test_simulation_is_deterministic():
    g = equally_spaced_grid((3, 3))
    a, b = simulate_dataset(Truth(), g, 4), simulate_dataset(Truth(), g, 4)
    np.testing.assert_array_equal(a.y, b.y)
    assert not np.array_equal(a.y, simulate_dataset(Truth(), g, 5).y)


def test_tiny_variance_gives_mean():
    g = equally_spaced_grid((3, 3))
    t = Truth(sigma_sq=1e-20, theta=2.5)
    np.testing.assert_allclose(simulate_dataset(t, g, 0).y, 2.5, atol=1e-8)


def test_simulated_covariance_matches_truth():
    g = equally_spaced_grid((3, 3))
    t = Truth()
    ys = np.array([simulate_dataset(t, g, s).y for s in range(5000)])
    cov = np.cov(ys.T)
    expected = truth_covariance(t, g)
    assert np.linalg.norm(cov - expected) / np.linalg.norm(expected) < 0.05
    np.testing.assert_allclose(ys.mean(axis=0), t.theta, atol=0.1)


def test_simulation_needs_matching_grid():
    with pytest.raises(ValueError, match="one factor"):
        simulate_dataset(Truth(), equally_spaced_grid((3, 3, 3)), 0)


def test_replication_seeds_are_derived_not_sequential():
    a = replication_seeds(0, 7, 4)
    assert a == replication_seeds(0, 7, 4)
    assert a != replication_seeds(0, 8, 4) and a != replication_seeds(1, 7, 4)
    assert len(a[1]) == 4 and len(set(a[1])) == 4


def test_study_config_validation():
    with pytest.raises(ValueError, match="replications"):
        StudyConfig(replications=0)
    with pytest.raises(ValueError, match="unknown prior"):
        StudyConfig(priors=("flat",))
    with pytest.raises(ValueError, match="one entry per factor"):
        StudyConfig(grid_sizes=(5,))


def _record(rep, covered, length=1.0, status="ok"):
    if status != "ok":
        return {"rep": rep, "status": status, "reason": "x", "priors": {}}
    entry = {name: {"covered": covered, "length": length} for name in ("sigma_sq", "theta", "beta_1")}
    entry["acceptance_rate"] = 0.3
    return {"rep": rep, "status": "ok", "reason": "", "priors": {"reference": entry}}


def test_aggregate_standard_error_formula():
    recs = [_record(i, i % 4 != 0, length=float(i)) for i in range(20)]
    rep = aggregate(recs, ("reference",), 20)
    row = rep.row("reference", "sigma_sq")
    assert row.coverage == 0.75
    assert row.std_dev == math.sqrt(0.75 * 0.25 / 20)
    assert row.expected_length == pytest.approx(9.5)


def test_aggregate_single_replication():
    for covered in (True, False):
        row = aggregate([_record(0, covered)], ("reference",), 1).row("reference", "theta")
        assert row.coverage in (0.0, 1.0) and row.std_dev == 0.0


def test_aggregate_is_order_independent():
    recs = [_record(i, bool(i % 3), float(i)) for i in range(9)] + [_record(9, False, status="failed")]
    a = aggregate(recs, ("reference",), 10)
    b = aggregate(recs[::-1], ("reference",), 10)
    assert a.rows == b.rows and a.excluded == 1


def test_report_outputs(tmp_path):
    rep = aggregate([_record(0, True)], ("reference",), 1)
    path = tmp_path / "c.csv"
    rep.to_csv(path, header_comment="config_hash=1")
    lines = path.read_text().splitlines()
    assert lines[0] == "# config_hash=1"
    assert lines[1] == "prior,parameter,coverage,expected_length,std_dev,excluded"
    assert "reference" in rep.to_text()


def test_one_replication_smoke():
    cfg = StudyConfig(grid_sizes=(4, 4), replications=1, iterations=120, burn_in=20)
    rep = run_study(cfg, workers=1)
    assert rep.replications == 1
    for row in rep.rows:
        assert row.coverage in (0.0, 1.0) and row.std_dev == 0.0
    assert set(rep.acceptance) == set(cfg.priors)


def test_replication_record_layout():
    rec = run_replication(TINY, 0)
    assert rec["status"] == "ok"
    assert set(rec["priors"]) == set(TINY.priors)
    assert rec == run_replication(TINY, 0)


def test_resume_reproduces_uninterrupted_run(tmp_path):
    full = run_study(TINY, work_dir=tmp_path / "a", workers=1)
    part = tmp_path / "b"
    run_study(TINY, work_dir=part, workers=1)
    (part / "rep_00001.json").unlink()
    stored = json.loads((part / "rep_00000.json").read_text())
    resumed = run_study(TINY, work_dir=part, resume=True, workers=1)
    assert resumed.rows == full.rows
    assert json.loads((part / "rep_00000.json").read_text()) == stored


def test_resume_refuses_other_configuration(tmp_path):
    run_study(StudyConfig(grid_sizes=(4, 4), replications=1, iterations=60, burn_in=10),
              work_dir=tmp_path, workers=1)
    with pytest.raises(ValueError, match="different study"):
        run_study(StudyConfig(grid_sizes=(4, 4), replications=1, iterations=70, burn_in=10),
                  work_dir=tmp_path, resume=True, workers=1)


def test_parallel_matches_serial():
    a = run_study(TINY, workers=1)
    b = run_study(TINY, workers=2)
    assert a.rows == b.rows


def test_exclusion_cap(tmp_path, monkeypatch):
    import objgp.coverage as cov

    def failing(cfg, rep):
        return _record(rep, True, status="failed") if rep == 0 else _record(rep, True)

    monkeypatch.setattr(cov, "run_replication", failing)
    cfg = StudyConfig(priors=("reference",), replications=10)
    assert 1 > MAX_EXCLUDED_FRACTION * 10
    with pytest.raises(StudyFailedError, match="1 of 10"):
        run_study(cfg, workers=1)
    ok = run_study(StudyConfig(priors=("reference",), replications=40), workers=1)
    assert ok.excluded == 1


def test_worker_count(monkeypatch):
    monkeypatch.setenv("OBJGP_WORKERS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("OBJGP_WORKERS", "zero")
    with pytest.raises(ValueError, match="integer"):
        worker_count()


@pytest.fixture(scope="module")
def probe_data():
    return simulate_dataset(Truth(), equally_spaced_grid((4, 4)), 5)


def test_propriety_probe_finite_and_stable(probe_data):
    res = propriety_probe(probe_data, "reference", 1.0, points=15)
    assert np.isfinite(res.log_mass) and res.mass_estimate > 0
    assert 0.9 <= res.refinement_ratio <= 1.1


def test_propriety_probe_rejects_three_factors():
    g = equally_spaced_grid((2, 2, 2))
    d = GpDataset(np.arange(8.0), mean_factors("constant", g), g,
                  (CorrelationFamily("power_exponential", 1.5),))
    with pytest.raises(NotImplementedError):
        propriety_probe(d, "reference")


def test_propriety_probe_argument_checks(probe_data):
    with pytest.raises(ValueError, match="PriorSpec"):
        propriety_probe(probe_data, "empirical_bayes")
    with pytest.raises(ValueError, match="3 grid points"):
        propriety_probe(probe_data, "reference", points=2)
