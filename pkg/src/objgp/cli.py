"""Command-line entry point: ``objgp {fit,sample,prior-eval,coverage,simulate}``.

Exit status is 0 on success, 1 for input errors (bad configuration, missing
or malformed data) and 2 for numerical failures (non-convergence, matrices
that are not positive definite).
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np
from scipy import stats

from .config import ConfigError, RunConfig, load_config
from .correlation import CorrelationFamily
from .coverage import (
    StudyConfig, StudyFailedError, Truth, equally_spaced_grid, mean_factors, run_study,
    simulate_dataset,
)
from .data import DesignGrid, GpDataset
from .mcmc import ChainControls, proposal_covariance, run_chain, summarize
from .mle import MleResult, ScoringControls, fisher_scoring
from .priors import KINDS, DegenerateInformationError, PriorSpec, xi_log_prior

logger = logging.getLogger("objgp")

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 1, 2


class NumericalFailure(RuntimeError):
    pass


# -- data ------------------------------------------------------------------

def _families(cfg: RunConfig, r: int) -> tuple[CorrelationFamily, ...]:
    tags = cfg["model"]["families"]
    alphas = cfg["model"]["roughness"]
    if len(tags) not in (1, r) or len(alphas) not in (1, r):
        raise ConfigError(f"model.families and model.roughness need 1 or {r} entries")
    tags = tags * r if len(tags) == 1 else tags
    alphas = alphas * r if len(alphas) == 1 else alphas
    return tuple(CorrelationFamily(t, a) for t, a in zip(tags, alphas))


def _truth(cfg: RunConfig) -> Truth:
    r = len(cfg["data"]["grid_sizes"])
    fams = _families(cfg, r)
    if any(f.tag != "power_exponential" for f in fams):
        raise ConfigError("model.families: simulation supports power_exponential only")
    beta = cfg["truth"]["beta"]
    if len(beta) != r:
        raise ConfigError(f"truth.beta needs {r} entries, one per grid factor")
    return Truth(cfg["truth"]["sigma_sq"], beta, tuple(f.roughness for f in fams),
                 cfg["truth"]["theta"], cfg["model"]["mean"])


def _synthetic_grid(cfg: RunConfig) -> DesignGrid:
    d = cfg["data"]
    r = len(d["grid_sizes"])
    for key in ("grid_low", "grid_high"):
        if len(d[key]) not in (1, r):
            raise ConfigError(f"data.{key} needs 1 or {r} entries")
    return equally_spaced_grid(d["grid_sizes"], d["grid_low"], d["grid_high"])


def _read_table(path: Path) -> np.ndarray:
    if not path.is_file():
        raise FileNotFoundError(f"data file not found: {path}")
    try:
        arr = np.loadtxt(path, delimiter=",", ndmin=2, comments="#")
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{path}: non-finite entries")
    return arr


def _dense_mean(tag: str, locs: np.ndarray, groups) -> np.ndarray:
    if tag == "constant":
        return np.ones((locs.shape[0], 1))
    if tag == "x1_slope":
        return locs[:, :1].copy()
    if tag == "coordinate_product":
        return np.prod(np.column_stack([locs[:, g[0]] for g in groups]), axis=1)[:, None]
    raise ConfigError(f"model.mean: unknown mean structure {tag!r}")


def load_dataset(cfg: RunConfig, force_dense: bool = False) -> GpDataset:
    """Dataset described by ``cfg``: simulated, factor files, or a location table."""
    if cfg["data"]["source"] == "synthetic":
        data = simulate_dataset(_truth(cfg), _synthetic_grid(cfg), cfg["data"]["seed"])
        return data.as_dense() if force_dense else data
    root = Path(cfg["data"]["dir"])
    if cfg.source and not root.is_absolute():
        root = Path(cfg.source).parent / root
    y = _read_table(root / "response.csv")
    if y.shape[1] != 1:
        raise ValueError(f"{root / 'response.csv'}: expected a single column, got {y.shape[1]}")
    y = y[:, 0]
    if (root / "locations.csv").exists():
        locs = _read_table(root / "locations.csv")
        groups = cfg["model"]["groups"] or None
        grid = DesignGrid.dense(locs, groups)
        x = _dense_mean(cfg["model"]["mean"], grid.locations, grid.groups)
        return GpDataset(y, x, grid, _families(cfg, grid.r), force_dense=force_dense)
    factors = []
    for k in itertools.count(1):
        p = root / f"factor_{k}.csv"
        if not p.exists():
            break
        factors.append(_read_table(p))
    if not factors:
        raise FileNotFoundError(f"no factor_1.csv or locations.csv in {root}")
    grid = DesignGrid.grid(*factors)
    x = mean_factors(cfg["model"]["mean"], grid)
    return GpDataset(y, x, grid, _families(cfg, grid.r), force_dense=force_dense)


def write_dataset(data: GpDataset, out_dir: Path, header: str) -> list[Path]:
    """Write ``factor_k.csv`` files (or ``locations.csv``) and ``response.csv``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if data.grid.is_grid:
        for k, f in enumerate(data.grid.factors, start=1):
            p = out_dir / f"factor_{k}.csv"
            np.savetxt(p, f, delimiter=",", fmt="%.17g", header=header)
            written.append(p)
    else:
        p = out_dir / "locations.csv"
        np.savetxt(p, data.grid.locations, delimiter=",", fmt="%.17g", header=header)
        written.append(p)
    p = out_dir / "response.csv"
    np.savetxt(p, data.y, delimiter=",", fmt="%.17g", header=header)
    written.append(p)
    return written


# -- helpers -----------------------------------------------------------------

def _header(cfg: RunConfig) -> str:
    return f"config_hash={cfg.hash}"


def _prior_kinds(cfg: RunConfig, override: str | None) -> tuple[str, ...]:
    kinds = tuple(k.strip() for k in override.split(",")) if override else cfg["prior"]["kinds"]
    bad = [k for k in kinds if k not in KINDS]
    if bad:
        raise ConfigError(f"prior.kinds: unknown prior(s) {bad}; allowed: {', '.join(KINDS)}")
    return kinds


def _prior(kind: str, mle: MleResult, cfg: RunConfig, q: int) -> PriorSpec:
    if kind == "empirical_bayes":
        return PriorSpec.empirical_bayes_from_estimates(
            mle.sigma_sq_hat, mle.xi_hat, cfg["prior"]["eb_multiplier"])
    return PriorSpec.formal(kind, q)


def _fit(data: GpDataset, cfg: RunConfig) -> MleResult:
    mle = fisher_scoring(data, controls=ScoringControls(max_iter=cfg["study"]["scoring_max_iter"]))
    if not mle.converged:
        raise NumericalFailure(f"maximum likelihood did not converge: {mle.message}")
    return mle


def _write_json(path: Path, payload: dict, cfg: RunConfig) -> None:
    path.write_text(json.dumps({"config_hash": cfg.hash, **payload}, indent=2) + "\n")


def kde_table(draws: np.ndarray, points: int) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian KDE on a grid padded by four bandwidths on each side."""
    draws = np.asarray(draws, dtype=float)
    spread = draws.std()
    if spread == 0.0:
        raise NumericalFailure("cannot smooth a constant sample")
    kde = stats.gaussian_kde(draws)
    bw = np.sqrt(kde.covariance[0, 0])
    grid = np.linspace(draws.min() - 4 * bw, draws.max() + 4 * bw, points)
    return grid, kde(grid)


def eb_overlay(name: str, grid: np.ndarray, prior: PriorSpec) -> np.ndarray | None:
    """Density of the empirical-Bayes prior for one chain column, if it has one."""
    pos = grid > 0
    out = np.zeros_like(grid)
    if name == "sigma_sq":
        # exponential precision with rate b induces b / s^2 * exp(-b / s) on s = sigma_sq
        b = prior.precision_rate
        s = grid[pos]
        out[pos] = b / s**2 * np.exp(-b / s)
        return out
    if name.startswith("xi_"):
        rate = prior.xi_rates[int(name.split("_")[1]) - 1]
        out[pos] = rate * np.exp(-rate * grid[pos])
        return out
    return None


# -- commands ----------------------------------------------------------------

def cmd_fit(cfg: RunConfig, out_dir: Path, args) -> int:
    data = load_dataset(cfg, args.force_dense)
    mle = fisher_scoring(data, controls=ScoringControls(max_iter=cfg["study"]["scoring_max_iter"]))
    _write_json(out_dir / "fit.json", mle.to_dict(), cfg)
    print(f"sigma_sq_hat = {mle.sigma_sq_hat:.6g}, xi_hat = {np.array2string(mle.xi_hat, precision=6)}, "
          f"converged = {mle.converged} ({mle.message})")
    if not mle.converged:
        raise NumericalFailure(f"maximum likelihood did not converge: {mle.message}")
    return EXIT_OK


def cmd_sample(cfg: RunConfig, out_dir: Path, args) -> int:
    data = load_dataset(cfg, args.force_dense)
    kinds = _prior_kinds(cfg, args.prior)
    mle = _fit(data, cfg)
    m = cfg["mcmc"]
    proposal = proposal_covariance(mle, m["d"], m["c"])
    summary = {"mle": {"sigma_sq_hat": mle.sigma_sq_hat, "xi_hat": mle.xi_hat.tolist()}, "chains": {}}
    for kind in kinds:
        prior = _prior(kind, mle, cfg, data.q)
        controls = ChainControls(m["iterations"], m["burn_in"], m["seed"], m["d"], m["c"],
                                 m["step2_literal"])
        chain = run_chain(data, prior, controls, proposal=proposal, mle=mle)
        chain.to_csv(out_dir / f"chain_{kind}.csv", {"config_hash": cfg.hash}, _header(cfg))
        for name, vals in chain.columns().items():
            grid, dens = kde_table(vals, m["kde_points"])
            cols, names = [grid, dens], ["x", "density"]
            overlay = eb_overlay(name, grid, prior) if kind == "empirical_bayes" else None
            if overlay is not None:
                cols.append(overlay)
                names.append("prior_density")
            np.savetxt(out_dir / f"kde_{kind}_{name}.csv", np.column_stack(cols), delimiter=",",
                       fmt="%.10g", header=f"# {_header(cfg)}\n" + ",".join(names), comments="")
        summary["chains"][kind] = {"acceptance_rate": chain.acceptance_rate,
                                   "diagnostics": chain.diagnostics,
                                   "summary": summarize(chain)}
        print(f"{kind:<16} acceptance {chain.acceptance_rate:.3f}")
    _write_json(out_dir / "sample_summary.json", summary, cfg)
    return EXIT_OK


def cmd_prior_eval(cfg: RunConfig, out_dir: Path, args) -> int:
    data = load_dataset(cfg, args.force_dense)
    kinds = _prior_kinds(cfg, args.prior)
    pe = cfg["prior_eval"]
    points = pe["points"]
    if points < 1:
        raise ConfigError("prior_eval.points: the evaluation grid is empty")
    if points**data.r > pe["max_points"]:
        capped = max(1, int(np.floor(pe["max_points"] ** (1.0 / data.r))))
        logger.warning("prior-eval grid of %d^%d points exceeds max_points=%d; using %d per axis",
                       points, data.r, pe["max_points"], capped)
        points = capped
    axis = np.exp(np.linspace(pe["log_xi_min"], pe["log_xi_max"], points))
    specs = {}
    for kind in kinds:
        if kind == "empirical_bayes":
            specs[kind] = _prior(kind, _fit(data, cfg), cfg, data.q)
        else:
            specs[kind] = PriorSpec.formal(kind, data.q)
    rows = []
    for xi in itertools.product(axis, repeat=data.r):
        xi = np.array(xi)
        row = list(xi)
        for kind in kinds:
            try:
                row.append(xi_log_prior(specs[kind], data, xi))
            except (DegenerateInformationError, np.linalg.LinAlgError):
                row.append(np.nan)
        rows.append(row)
    names = [f"xi_{k + 1}" for k in range(data.r)] + [f"log_{k}" for k in kinds]
    np.savetxt(out_dir / "prior_eval.csv", np.array(rows), delimiter=",", fmt="%.12g",
               header=f"# {_header(cfg)}\n" + ",".join(names), comments="")
    print(f"evaluated {len(kinds)} prior(s) at {len(rows)} points")
    return EXIT_OK


def study_config(cfg: RunConfig, kinds) -> StudyConfig:
    d, m, s = cfg["data"], cfg["mcmc"], cfg["study"]
    return StudyConfig(
        truth=_truth(cfg), grid_sizes=d["grid_sizes"], grid_low=d["grid_low"],
        grid_high=d["grid_high"], priors=tuple(kinds), replications=s["replications"],
        iterations=m["iterations"], burn_in=m["burn_in"], dof=m["d"], scale_mult=m["c"],
        eb_multiplier=cfg["prior"]["eb_multiplier"], gamma=s["gamma"],
        master_seed=s["master_seed"], scoring_max_iter=s["scoring_max_iter"],
    )


def cmd_coverage(cfg: RunConfig, out_dir: Path, args) -> int:
    study = study_config(cfg, _prior_kinds(cfg, args.prior))
    report = run_study(study, work_dir=out_dir / "replications", resume=args.resume)
    report.to_csv(out_dir / "coverage.csv", _header(cfg))
    text = report.to_text()
    (out_dir / "coverage.txt").write_text(f"# {_header(cfg)}\n{text}\n")
    print(text)
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, out_dir: Path, args) -> int:
    data = simulate_dataset(_truth(cfg), _synthetic_grid(cfg), cfg["data"]["seed"])
    for p in write_dataset(data, out_dir, _header(cfg)):
        print(p)
    return EXIT_OK


COMMANDS = {
    "fit": (cmd_fit, None),
    "sample": (cmd_sample, ("mcmc", "seed")),
    "prior-eval": (cmd_prior_eval, None),
    "coverage": (cmd_coverage, ("study", "master_seed")),
    "simulate": (cmd_simulate, ("data", "seed")),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="objgp", description="Objective Bayesian analysis of separable Gaussian processes.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI configuration file (defaults are used when omitted)")
        p.add_argument("--seed", type=int, help="override the seed this command uses")
        p.add_argument("--out-dir", default=".", help="directory for outputs (created if needed)")
        p.add_argument("--prior", help="comma-separated prior kinds, overriding prior.kinds")
        p.add_argument("--force-dense", action="store_true",
                       help="use explicit n x n matrices instead of Kronecker algebra")
        p.add_argument("--resume", action="store_true",
                       help="coverage: reuse finished replications in the output directory")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    fn, seed_key = COMMANDS[args.command]
    try:
        cfg = load_config(args.config)
        if args.seed is not None and seed_key is not None:
            cfg = cfg.with_overrides({seed_key: args.seed})
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg.write(out_dir / "config.resolved.ini")
        return fn(cfg, out_dir, args)
    # LinAlgError subclasses ValueError, so the numerical clause comes first
    except (NumericalFailure, StudyFailedError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
