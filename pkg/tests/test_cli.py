import json

import numpy as np
import pytest
from scipy import integrate

from objgp.cli import load_dataset, main
from objgp.config import ConfigError, default_config_text, load_config
from objgp.mcmc import read_chain_csv
from objgp.mle import ScoringControls, fisher_scoring
from objgp.priors import DegenerateInformationError, PriorSpec, xi_log_prior

SMALL = """
[data]
grid_sizes = 4, 4
[mcmc]
iterations = 220
burn_in = 20
kde_points = 64
[study]
replications = 2
[prior_eval]
points = 4
"""


def write_cfg(tmp_path, extra="", base=SMALL, name="run.ini"):
    p = tmp_path / name
    p.write_text(base + extra)
    return str(p)


def merged(tmp_path, sections, name="run.ini"):
    """Config text built from ``{section: {key: value}}`` on top of the small defaults."""
    cfg = load_config(write_cfg(tmp_path, name="base.ini"))
    cfg = cfg.with_overrides({(s, k): v for s, kv in sections.items() for k, v in kv.items()})
    p = tmp_path / name
    cfg.write(p)
    return str(p)


# -- configuration -------------------------------------------------------------

def test_defaults_materialised():
    cfg = load_config()
    assert cfg["mcmc"]["iterations"] == 3000 and cfg["mcmc"]["c"] is None
    assert cfg["truth"]["beta"] == (3.2, 3.6)
    assert "[mcmc]" in cfg.text and "iterations = 3000" in cfg.text
    assert default_config_text() == cfg.text


def test_unknown_key_and_section_rejected(tmp_path):
    with pytest.raises(ConfigError, match="mcmc.iters"):
        load_config(write_cfg(tmp_path, "[mcmc]\niters = 5\n", base=""))
    with pytest.raises(ConfigError, match=r"\[sampler\]"):
        load_config(write_cfg(tmp_path, "[sampler]\nx = 1\n", base=""))


def test_bad_values_name_the_field(tmp_path):
    with pytest.raises(ConfigError, match="mcmc.iterations"):
        load_config(write_cfg(tmp_path, "[mcmc]\niterations = lots\n", base=""))
    with pytest.raises(ConfigError, match="data.grid_sizes"):
        load_config(write_cfg(tmp_path, "[data]\ngrid_sizes = 1, 4\n", base=""))
    with pytest.raises(ConfigError, match="spec_version"):
        load_config(write_cfg(tmp_path, "[meta]\nspec_version = 9\n", base=""))


def test_hash_tracks_resolved_values(tmp_path):
    a = load_config(write_cfg(tmp_path, "[mcmc]\nseed = 1   # comment\n", base=""))
    b = load_config(write_cfg(tmp_path, "[mcmc]\nseed=1\n", base="", name="b.ini"))
    c = load_config(write_cfg(tmp_path, "[mcmc]\nseed = 2\n", base="", name="c.ini"))
    assert a.hash == b.hash != c.hash
    assert a.with_overrides({("mcmc", "seed"): 2}).hash == c.hash


def test_missing_config_file(tmp_path, capsys):
    missing = tmp_path / "nope.ini"
    assert main(["fit", "--config", str(missing), "--out-dir", str(tmp_path)]) == 1
    assert str(missing) in capsys.readouterr().err


# -- fit -------------------------------------------------------------------------

def test_fit_writes_result_and_resolved_config(tmp_path):
    cfg_path = write_cfg(tmp_path)
    out = tmp_path / "out"
    assert main(["fit", "--config", cfg_path, "--out-dir", str(out)]) == 0
    fit = json.loads((out / "fit.json").read_text())
    cfg = load_config(cfg_path)
    assert fit["config_hash"] == cfg.hash and fit["converged"]
    assert (out / "config.resolved.ini").read_text() == cfg.text
    direct = fisher_scoring(load_dataset(cfg), controls=ScoringControls(max_iter=1000))
    np.testing.assert_allclose(fit["xi_hat"], direct.xi_hat, rtol=1e-12)


def test_fit_nonconvergence_exit_code(tmp_path):
    cfg_path = merged(tmp_path, {"study": {"scoring_max_iter": 2}})
    assert main(["fit", "--config", cfg_path, "--out-dir", str(tmp_path)]) == 2
    assert not json.loads((tmp_path / "fit.json").read_text())["converged"]


def test_missing_data_file_names_path(tmp_path, capsys):
    cfg_path = merged(tmp_path, {"data": {"source": "files", "dir": str(tmp_path / "absent")}})
    assert main(["fit", "--config", cfg_path, "--out-dir", str(tmp_path)]) == 1
    assert str(tmp_path / "absent" / "response.csv") in capsys.readouterr().err


def test_simulate_then_fit_from_files(tmp_path):
    base = write_cfg(tmp_path)
    data_dir = tmp_path / "data"
    assert main(["simulate", "--config", base, "--out-dir", str(data_dir)]) == 0
    assert (data_dir / "factor_1.csv").read_text().startswith("# config_hash=")
    files = merged(tmp_path, {"data": {"source": "files", "dir": str(data_dir)}}, name="files.ini")
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["fit", "--config", base, "--out-dir", str(a)]) == 0
    assert main(["fit", "--config", files, "--out-dir", str(b)]) == 0
    fa = json.loads((a / "fit.json").read_text())
    fb = json.loads((b / "fit.json").read_text())
    np.testing.assert_allclose(fb["xi_hat"], fa["xi_hat"], rtol=1e-10)


def test_location_table_input(tmp_path):
    data_dir = tmp_path / "loc"
    data_dir.mkdir()
    g = np.array([[a, b] for a in np.linspace(0, 1, 4) for b in np.linspace(0, 1, 4)])
    rng = np.random.default_rng(0)
    np.savetxt(data_dir / "locations.csv", g, delimiter=",")
    np.savetxt(data_dir / "response.csv", 1 + 0.1 * rng.standard_normal(16))
    cfg = load_config(merged(tmp_path, {"data": {"source": "files", "dir": str(data_dir)},
                                        "model": {"groups": "0;1"}}))
    d = load_dataset(cfg)
    assert not d.structured and d.r == 2 and d.n == 16


def test_force_dense_gives_same_fit(tmp_path):
    cfg_path = write_cfg(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["fit", "--config", cfg_path, "--out-dir", str(a)]) == 0
    assert main(["fit", "--config", cfg_path, "--out-dir", str(b), "--force-dense"]) == 0
    fa = json.loads((a / "fit.json").read_text())
    fb = json.loads((b / "fit.json").read_text())
    assert fb["loglik"] == pytest.approx(fa["loglik"], rel=1e-8)
    np.testing.assert_allclose(fb["xi_hat"], fa["xi_hat"], rtol=1e-6)


# -- sample ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def sampled(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("sample")
    cfg_path = write_cfg(tmp)
    runs = []
    for name in ("a", "b"):
        out = tmp / name
        assert main(["sample", "--config", cfg_path, "--out-dir", str(out), "--seed", "7",
                     "--prior", "reference,empirical_bayes"]) == 0
        runs.append(out)
    return runs


def test_sample_is_seed_deterministic(sampled):
    a, b = sampled
    ca, cb = read_chain_csv(a / "chain_reference.csv"), read_chain_csv(b / "chain_reference.csv")
    np.testing.assert_array_equal(ca["sigma_sq"], cb["sigma_sq"])
    assert "seed = 7" in (a / "config.resolved.ini").read_text()


def test_kde_tables_integrate_to_one(sampled):
    for path in sampled[0].glob("kde_*.csv"):
        arr = np.loadtxt(path, delimiter=",", comments="#", skiprows=2)
        assert integrate.trapezoid(arr[:, 1], arr[:, 0]) == pytest.approx(1.0, abs=0.02), path.name


def test_empirical_bayes_overlay(sampled):
    path = sampled[0] / "kde_empirical_bayes_xi_1.csv"
    lines = path.read_text().splitlines()
    assert lines[1] == "x,density,prior_density"
    arr = np.loadtxt(path, delimiter=",", skiprows=2)
    assert np.all(arr[:, 2] >= 0)
    assert not (sampled[0] / "kde_reference_xi_1.csv").read_text().splitlines()[1].endswith("prior_density")


def test_sample_summary(sampled):
    s = json.loads((sampled[0] / "sample_summary.json").read_text())
    for kind in ("reference", "empirical_bayes"):
        assert 0 < s["chains"][kind]["acceptance_rate"] < 1
        assert np.isfinite(s["chains"][kind]["summary"]["sigma_sq"]["mean"])


def test_unknown_prior_is_input_error(tmp_path, capsys):
    assert main(["sample", "--config", write_cfg(tmp_path), "--out-dir", str(tmp_path),
                 "--prior", "flat"]) == 1
    assert "prior.kinds" in capsys.readouterr().err


# -- prior-eval and coverage -----------------------------------------------------

def test_prior_eval_matches_direct_calls(tmp_path):
    cfg_path = write_cfg(tmp_path)
    assert main(["prior-eval", "--config", cfg_path, "--out-dir", str(tmp_path),
                 "--prior", "reference,jeffreys_rule"]) == 0
    lines = (tmp_path / "prior_eval.csv").read_text().splitlines()
    assert lines[1] == "xi_1,xi_2,log_reference,log_jeffreys_rule"
    arr = np.loadtxt(tmp_path / "prior_eval.csv", delimiter=",", skiprows=2)
    assert arr.shape == (16, 4)
    d = load_dataset(load_config(cfg_path))
    for row in arr:
        try:
            expected = xi_log_prior(PriorSpec.reference(), d, row[:2])
        except DegenerateInformationError:
            assert np.isnan(row[2])  # singular information is written as NaN
            continue
        assert row[2] == pytest.approx(expected, rel=1e-9)
    assert np.isfinite(arr[:, 2]).sum() >= 4


def test_prior_eval_empty_grid(tmp_path):
    cfg_path = merged(tmp_path, {"prior_eval": {"points": 0}})
    assert main(["prior-eval", "--config", cfg_path, "--out-dir", str(tmp_path)]) == 1


def test_prior_eval_grid_cap(tmp_path, caplog):
    cfg_path = merged(tmp_path, {"prior_eval": {"points": 10, "max_points": 20}})
    assert main(["prior-eval", "--config", cfg_path, "--out-dir", str(tmp_path),
                 "--prior", "reference"]) == 0
    arr = np.loadtxt(tmp_path / "prior_eval.csv", delimiter=",", skiprows=2)
    assert arr.shape[0] == 16
    assert any("max_points" in r.message for r in caplog.records)


def test_coverage_command(tmp_path):
    cfg_path = merged(tmp_path, {"mcmc": {"iterations": 80, "burn_in": 10}})
    out = tmp_path / "cov"
    assert main(["coverage", "--config", cfg_path, "--out-dir", str(out), "--prior", "reference"]) == 0
    lines = (out / "coverage.csv").read_text().splitlines()
    assert lines[0].startswith("# config_hash=")
    assert lines[1] == "prior,parameter,coverage,expected_length,std_dev,excluded"
    assert len(lines) == 2 + 3
    assert sorted(p.name for p in (out / "replications").glob("rep_*.json")) == [
        "rep_00000.json", "rep_00001.json"]
    assert main(["coverage", "--config", cfg_path, "--out-dir", str(out), "--prior", "reference",
                 "--resume"]) == 0


def test_simulation_rejects_other_families(tmp_path, capsys):
    cfg_path = merged(tmp_path, {"model": {"families": "matern"}})
    assert main(["simulate", "--config", cfg_path, "--out-dir", str(tmp_path)]) == 1
    assert "model.families" in capsys.readouterr().err


def test_console_script_parser():
    with pytest.raises(SystemExit):
        main(["unknown-command"])
