"""Frequentist coverage of posterior credible intervals by simulation.

Datasets are drawn from a known truth on a product grid, one chain is run per
dataset and prior, and the fraction of equal-tailed intervals covering the
truth is reported together with the mean interval length.

The truth is given in the ``beta`` form of the power-exponential family,
``exp(-beta * d**alpha)``, which maps to the range form by
``xi = beta ** (1 / alpha)``.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate

from .correlation import CorrelationFamily
from .data import DesignGrid, GpDataset
from .kron import NotPositiveDefiniteError, cholesky_jitter, kron_matvec
from .likelihood import log_integrated_theta_sigma
from .mcmc import ChainControls, ProposalError, proposal_covariance, run_chain, summarize_draws
from .mle import ScoringControls, fisher_scoring
from .priors import FORMAL_KINDS, KINDS, DegenerateInformationError, PriorSpec, xi_log_prior

logger = logging.getLogger(__name__)

WORKERS_ENV = "OBJGP_WORKERS"
MAX_EXCLUDED_FRACTION = 0.05
MEAN_TAGS = ("constant", "x1_slope", "coordinate_product")
REPORT_COLUMNS = ("prior", "parameter", "coverage", "expected_length", "std_dev", "excluded")
#: Parameters whose intervals are scored, in report order.
PARAMETERS = ("sigma_sq", "theta", "beta_1")
DATA_STREAM = 2


class StudyFailedError(RuntimeError):
    pass


@dataclass(frozen=True)
class Truth:
    sigma_sq: float = 1.5
    beta: tuple[float, ...] = (3.2, 3.6)
    alpha: tuple[float, ...] = (1.5, 1.7)
    theta: float = 1.0
    mean: str = "constant"

    def __post_init__(self):
        beta = tuple(float(b) for b in self.beta)
        alpha = tuple(float(a) for a in self.alpha)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        if len(beta) != len(alpha):
            raise ValueError("beta and alpha must have one entry per factor")
        if not self.sigma_sq > 0.0 or not all(b > 0.0 for b in beta):
            raise ValueError("sigma_sq and beta must be positive")
        if not all(0.0 < a <= 2.0 for a in alpha):
            raise ValueError("alpha must lie in (0, 2]")
        if self.mean not in MEAN_TAGS:
            raise ValueError(f"mean must be one of {MEAN_TAGS}, got {self.mean!r}")

    @property
    def r(self) -> int:
        return len(self.beta)

    @property
    def xi(self) -> np.ndarray:
        return np.array(self.beta) ** (1.0 / np.array(self.alpha))

    @property
    def families(self) -> tuple[CorrelationFamily, ...]:
        return tuple(CorrelationFamily("power_exponential", a) for a in self.alpha)

    def regression_factors(self, grid: DesignGrid) -> tuple[np.ndarray, ...]:
        return mean_factors(self.mean, grid)


def mean_factors(tag: str, grid: DesignGrid) -> tuple[np.ndarray, ...]:
    """Per-factor regression vectors for a named mean structure.

    ``constant`` is ``1``, ``x1_slope`` is ``x_1`` (first coordinate of the
    first factor) and ``coordinate_product`` is the product of the first
    coordinate of every factor.
    """
    if tag not in MEAN_TAGS:
        raise ValueError(f"mean must be one of {MEAN_TAGS}, got {tag!r}")
    xs = [np.ones(nk) for nk in grid.dims]
    if tag == "x1_slope":
        xs[0] = grid.factors[0][:, 0].copy()
    elif tag == "coordinate_product":
        xs = [f[:, 0].copy() for f in grid.factors]
    return tuple(xs)


def equally_spaced_grid(sizes=(5, 5), low=0.0, high=1.0) -> DesignGrid:
    """Product grid; ``low`` and ``high`` are scalars or one value per factor."""
    lows = np.broadcast_to(np.asarray(low, dtype=float), (len(sizes),))
    highs = np.broadcast_to(np.asarray(high, dtype=float), (len(sizes),))
    return DesignGrid.grid(*[np.linspace(lo, hi, m) for lo, hi, m in zip(lows, highs, sizes)])


@dataclass
class StudyConfig:
    truth: Truth = field(default_factory=Truth)
    grid_sizes: tuple[int, ...] = (5, 5)
    grid_low: tuple[float, ...] = (0.0,)
    grid_high: tuple[float, ...] = (1.0,)
    priors: tuple[str, ...] = KINDS
    replications: int = 300
    iterations: int = 3000
    burn_in: int = 100
    dof: float = 3.0
    scale_mult: float | None = None
    eb_multiplier: float = 10.0
    #: Fisher scoring converges linearly; some datasets need more than 200 steps.
    scoring_max_iter: int = 1000
    gamma: float = 0.05
    master_seed: int = 0

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if len(self.grid_sizes) != self.truth.r:
            raise ValueError("grid_sizes must have one entry per factor of the truth")
        bad = [p for p in self.priors if p not in KINDS]
        if bad:
            raise ValueError(f"unknown prior kind(s) {bad}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")

    @property
    def grid(self) -> DesignGrid:
        return equally_spaced_grid(self.grid_sizes, self.grid_low, self.grid_high)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["truth"] = asdict(self.truth)
        return d


def simulate_dataset(truth: Truth, design: DesignGrid, seed) -> GpDataset:
    """Draw ``y ~ N(X theta, sigma_sq * Sigma(xi))`` on a product grid."""
    if not design.is_grid or design.r != truth.r:
        raise ValueError("the design must be a product grid with one factor per truth entry")
    if isinstance(seed, np.random.Generator):
        rng = seed
    else:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([DATA_STREAM, int(seed)])))
    lowers = []
    for k, (fam, dist, x) in enumerate(zip(truth.families, design.factor_distances, truth.xi)):
        s = fam.corr(dist, x)
        np.fill_diagonal(s, 1.0)
        lowers.append(cholesky_jitter(s, index=k))
    xs = truth.regression_factors(design)
    mean = truth.theta * kron_matvec([x[:, None] for x in xs], np.ones(1))
    z = rng.standard_normal(design.n)
    y = mean + np.sqrt(truth.sigma_sq) * kron_matvec(lowers, z)
    return GpDataset(y=y, x=xs, grid=design, families=truth.families)


def replication_seeds(master_seed: int, rep: int, n_priors: int) -> tuple[int, list[int]]:
    """Dataset seed and one chain seed per prior, derived from ``(master_seed, rep)``."""
    ss = np.random.SeedSequence([1, int(master_seed), int(rep)])
    words = ss.generate_state(n_priors + 1, dtype=np.uint32)
    return int(words[0]), [int(w) for w in words[1:]]


def _prior_for(kind: str, mle, cfg: StudyConfig, q: int) -> PriorSpec:
    if kind == "empirical_bayes":
        return PriorSpec.empirical_bayes_from_estimates(mle.sigma_sq_hat, mle.xi_hat, cfg.eb_multiplier)
    return PriorSpec.formal(kind, q)


def run_replication(cfg: StudyConfig, rep: int) -> dict:
    """Simulate one dataset and score the intervals of every prior."""
    data_seed, chain_seeds = replication_seeds(cfg.master_seed, rep, len(cfg.priors))
    record = {"rep": rep, "status": "ok", "reason": "", "priors": {}}
    truth = cfg.truth
    targets = {"sigma_sq": truth.sigma_sq, "theta": truth.theta, "beta_1": truth.beta[0]}
    try:
        data = simulate_dataset(truth, cfg.grid, data_seed)
        mle = fisher_scoring(data, controls=ScoringControls(max_iter=cfg.scoring_max_iter))
        if not mle.converged:
            raise ProposalError(f"ML fit did not converge: {mle.message}")
        proposal = proposal_covariance(mle, cfg.dof, cfg.scale_mult)
        for kind, seed in zip(cfg.priors, chain_seeds):
            prior = _prior_for(kind, mle, cfg, data.q)
            controls = ChainControls(cfg.iterations, cfg.burn_in, seed, cfg.dof, cfg.scale_mult)
            chain = run_chain(data, prior, controls, proposal=proposal, mle=mle)
            draws = {
                "sigma_sq": chain.sigma_sq,
                "theta": chain.theta[:, 0],
                "beta_1": chain.xi[:, 0] ** truth.alpha[0],
            }
            out = {"acceptance_rate": chain.acceptance_rate}
            for name in PARAMETERS:
                s = summarize_draws(draws[name], cfg.gamma)
                out[name] = {"covered": bool(s["lower"] <= targets[name] <= s["upper"]),
                             "length": s["length"]}
            record["priors"][kind] = out
    except (NotPositiveDefiniteError, DegenerateInformationError, np.linalg.LinAlgError,
            FloatingPointError, AssertionError) as exc:
        record.update(status="failed", reason=f"{type(exc).__name__}: {exc}", priors={})
    return record


@dataclass
class CoverageRow:
    prior: str
    parameter: str
    coverage: float
    expected_length: float
    std_dev: float
    excluded: int


@dataclass
class CoverageReport:
    rows: list[CoverageRow]
    replications: int
    excluded: int
    acceptance: dict[str, float] = field(default_factory=dict)

    def row(self, prior: str, parameter: str) -> CoverageRow:
        for r in self.rows:
            if r.prior == prior and r.parameter == parameter:
                return r
        raise KeyError((prior, parameter))

    def to_csv(self, path, header_comment: str | None = None) -> None:
        with open(path, "w") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            fh.write(",".join(REPORT_COLUMNS) + "\n")
            for r in self.rows:
                fh.write(f"{r.prior},{r.parameter},{r.coverage!r},{r.expected_length!r},"
                         f"{r.std_dev!r},{r.excluded}\n")

    def to_text(self) -> str:
        lines = [f"{'prior':<16}{'parameter':<10}{'coverage':>9}{'length':>10}{'std.dev':>9}",
                 "-" * 54]
        for r in self.rows:
            lines.append(f"{r.prior:<16}{r.parameter:<10}{r.coverage:>9.3f}"
                         f"{r.expected_length:>10.3f}{r.std_dev:>9.3f}")
        lines.append(f"replications: {self.replications}, excluded: {self.excluded}")
        return "\n".join(lines)


def aggregate(records: list[dict], priors, replications: int) -> CoverageReport:
    """Combine per-replication records; order of ``records`` does not matter."""
    records = sorted(records, key=lambda r: r["rep"])
    ok = [r for r in records if r["status"] == "ok"]
    excluded = len(records) - len(ok)
    rows, acceptance = [], {}
    for kind in priors:
        if ok:
            acceptance[kind] = float(np.mean([r["priors"][kind]["acceptance_rate"] for r in ok]))
        for name in PARAMETERS:
            cov = np.array([r["priors"][kind][name]["covered"] for r in ok], dtype=float)
            lens = np.array([r["priors"][kind][name]["length"] for r in ok])
            p = float(cov.mean()) if cov.size else float("nan")
            rows.append(CoverageRow(
                kind, name, p, float(lens.mean()) if lens.size else float("nan"),
                float(np.sqrt(p * (1.0 - p) / cov.size)) if cov.size else float("nan"),
                excluded,
            ))
    return CoverageReport(rows, replications, excluded, acceptance)


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def _run_and_store(cfg: StudyConfig, rep: int, work_dir: str | None) -> dict:
    record = run_replication(cfg, rep)
    if work_dir is not None:
        path = Path(work_dir) / f"rep_{rep:05d}.json"
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(record))
        tmp.replace(path)
    return record


def run_study(cfg: StudyConfig, work_dir=None, resume: bool = False,
              workers: int | None = None) -> CoverageReport:
    """Run every replication (reusing stored ones when ``resume``) and aggregate.

    Each replication is written to ``work_dir/rep_NNNNN.json`` as soon as it
    finishes, so an interrupted study can be resumed with identical results.
    """
    workers = worker_count() if workers is None else max(1, int(workers))
    records: dict[int, dict] = {}
    if work_dir is not None:
        work_dir = Path(work_dir)
        work_dir.mkdir(parents=True, exist_ok=True)
        stamp = work_dir / "study.json"
        cfg_json = json.dumps(cfg.to_dict(), sort_keys=True)
        if resume and stamp.exists():
            if stamp.read_text() != cfg_json:
                raise ValueError(f"{work_dir} holds replications of a different study configuration")
            for rep in range(cfg.replications):
                p = work_dir / f"rep_{rep:05d}.json"
                if p.exists():
                    records[rep] = json.loads(p.read_text())
        stamp.write_text(cfg_json)
    todo = [rep for rep in range(cfg.replications) if rep not in records]
    logger.info("coverage study: %d replications to run, %d reused", len(todo), len(records))
    wd = None if work_dir is None else str(work_dir)
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for rec in pool.map(_run_and_store, [cfg] * len(todo), todo, [wd] * len(todo)):
                records[rec["rep"]] = rec
    else:
        for rep in todo:
            records[rep] = _run_and_store(cfg, rep, wd)
    report = aggregate(list(records.values()), cfg.priors, cfg.replications)
    if report.excluded > MAX_EXCLUDED_FRACTION * cfg.replications:
        raise StudyFailedError(
            f"{report.excluded} of {cfg.replications} replications failed "
            f"(more than {MAX_EXCLUDED_FRACTION:.0%})"
        )
    return report


# -- posterior propriety -----------------------------------------------------

@dataclass
class ProprietyResult:
    mass_estimate: float
    refinement_ratio: float
    log_mass: float


def _log_mass(data: GpDataset, spec: PriorSpec, a: float, axes) -> float:
    """Log of the trapezoid integral over ``log xi`` (Jacobian ``xi`` included)."""
    mesh = np.meshgrid(*axes, indexing="ij")
    vals = np.full(mesh[0].shape, -np.inf)
    for idx in np.ndindex(vals.shape):
        log_xi = np.array([m[idx] for m in mesh])
        xi = np.exp(log_xi)
        try:
            v = (log_integrated_theta_sigma(data, xi, a)
                 + xi_log_prior(spec, data, xi) + float(np.sum(log_xi)))
        except (np.linalg.LinAlgError, FloatingPointError):
            continue
        if np.isfinite(v):
            vals[idx] = v
    top = np.max(vals)
    if not np.isfinite(top):
        raise np.linalg.LinAlgError("the integrand is not finite anywhere on the grid")
    w = np.exp(vals - top)
    for ax in reversed(axes):
        w = integrate.trapezoid(w, ax, axis=-1)
    return float(np.log(w) + top)


def propriety_probe(data: GpDataset, prior_kind: str, a: float = 1.0,
                    log_bounds=(-6.0, 6.0), points: int = 41,
                    spec: PriorSpec | None = None) -> ProprietyResult:
    """Integrate the marginal posterior of ``xi`` on a log grid and refine it once.

    Only ``r <= 2`` is supported.  ``refinement_ratio`` compares the mass on a
    grid with twice the resolution to the mass on the base grid.
    """
    if data.r > 2:
        raise NotImplementedError("the propriety probe supports at most two range parameters")
    if spec is None:
        if prior_kind not in FORMAL_KINDS:
            raise ValueError("pass an explicit PriorSpec for the empirical-Bayes prior")
        spec = PriorSpec.formal(prior_kind, data.q)
    if points < 3:
        raise ValueError("at least 3 grid points are needed")
    lo, hi = log_bounds
    coarse = [np.linspace(lo, hi, points)] * data.r
    fine = [np.linspace(lo, hi, 2 * points - 1)] * data.r
    m1 = _log_mass(data, spec, a, coarse)
    m2 = _log_mass(data, spec, a, fine)
    return ProprietyResult(float(np.exp(m2)), float(np.exp(m2 - m1)), m2)
