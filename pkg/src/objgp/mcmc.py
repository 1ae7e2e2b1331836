"""Metropolis-within-Gibbs sampler for ``(theta, sigma_sq, xi)``.

Each sweep draws ``theta`` from its Gaussian full conditional, ``sigma_sq``
from its inverse-gamma full conditional, and then updates ``xi`` as a block
by a Metropolis step on ``log xi`` with a multivariate-t random-walk
proposal.  The proposal scale is ``c**2`` times the inverse of the
conditional information of ``log xi`` given ``log sigma_sq`` at the ML
estimate.

Random streams
--------------
Stream layout version 1: a chain seed ``s`` is expanded by
``SeedSequence([1, s])`` and spawned into three children, used in order for
the ``theta``, ``sigma_sq`` and ``xi`` steps.  Each child drives a Philox
counter-based bit generator.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .data import GpDataset
from .likelihood import covariance_state, full_loglik_from_state
from .mle import MleResult
from .priors import DegenerateInformationError, PriorSpec, xi_log_prior

logger = logging.getLogger(__name__)

STREAM_VERSION = 1
DEFAULT_DOF = 3


def chain_streams(seed: int, n_streams: int = 3) -> list[np.random.Generator]:
    children = np.random.SeedSequence([STREAM_VERSION, int(seed)]).spawn(n_streams)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


class ProposalError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class ProposalSpec:
    """Multivariate-t random walk on ``log xi``.

    ``v_hat`` is the conditional information of ``log xi`` given
    ``log sigma_sq``; the proposal scale matrix is ``scale_mult**2 * inv(v_hat)``.
    """

    v_hat: np.ndarray
    dof: float = DEFAULT_DOF
    scale_mult: float | None = None

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.v_hat, dtype=float))
        object.__setattr__(self, "v_hat", v)
        if not self.dof >= 1:
            raise ValueError("degrees of freedom must be at least 1")
        if self.scale_mult is None:
            object.__setattr__(self, "scale_mult", 2.4 / np.sqrt(v.shape[0]))
        if self.scale_mult < 0:
            raise ValueError("scale multiplier must be nonnegative")

    @property
    def r(self) -> int:
        return self.v_hat.shape[0]

    @property
    def scale_matrix(self) -> np.ndarray:
        return self.scale_mult**2 * np.linalg.inv(self.v_hat)

    @property
    def scale_chol(self) -> np.ndarray:
        if self.scale_mult == 0.0:
            return np.zeros_like(self.v_hat)
        return np.linalg.cholesky(self.scale_matrix)


def log_scale_information(info: np.ndarray, sigma_sq: float, xi) -> np.ndarray:
    """Information of ``(log sigma_sq, log xi)`` from that of ``(sigma_sq, xi)``."""
    jac = np.concatenate([[sigma_sq], np.asarray(xi, dtype=float)])
    return info * np.outer(jac, jac)


def proposal_covariance(
    mle: MleResult, dof: float = DEFAULT_DOF, scale_mult: float | None = None
) -> ProposalSpec:
    if mle.info is None:
        raise ProposalError("the ML fit has no positive definite information; re-run the MLE")
    info = log_scale_information(mle.info.matrix, mle.sigma_sq_hat, mle.xi_hat)
    u = info[0, 0]
    v = info[1:, 0]
    a = info[1:, 1:]
    v_hat = a - np.outer(v, v) / u
    try:
        np.linalg.cholesky(v_hat)
    except np.linalg.LinAlgError as exc:
        raise ProposalError("conditional information is not positive definite; re-run the MLE") from exc
    return ProposalSpec(v_hat=v_hat, dof=dof, scale_mult=scale_mult)


def multivariate_t_draw(rng: np.random.Generator, loc, scale_chol, dof: float) -> np.ndarray:
    """Scale mixture: ``loc + z / sqrt(w / dof)`` with ``z ~ N(0, LL')``, ``w ~ chi2(dof)``."""
    loc = np.asarray(loc, dtype=float)
    z = rng.standard_normal(loc.shape) @ np.asarray(scale_chol).T
    w = rng.chisquare(dof, size=loc.shape[:-1])
    return loc + z / np.sqrt(w / dof)[..., None]


def log_t_random_walk(log_target, log_x, cur_logp, scale_chol, dof, rng):
    """One Metropolis step on ``log x`` for a density ``log_target`` in ``x``.

    Works on a single state of shape ``(r,)`` or a batch ``(m, r)``.  The
    t kernel is symmetric in ``log x``, so the Hastings ratio reduces to
    the Jacobian ``prod(x_new) / prod(x_old)``.  Non-finite proposal
    densities are rejected.  Returns ``(log_x, logp, accepted, nonfinite)``.
    """
    log_x = np.asarray(log_x, dtype=float)
    prop = multivariate_t_draw(rng, log_x, scale_chol, dof)
    with np.errstate(over="ignore", under="ignore"):
        x = np.exp(prop)
    outside = ~np.all(np.isfinite(x) & (x > 0.0), axis=-1)
    if np.all(outside):
        new_logp = np.full(np.shape(outside), -np.inf)
    else:
        # rows that left the representable range are evaluated at the current state, then masked
        safe = np.where(np.asarray(outside)[..., None], np.exp(log_x), x)
        new_logp = np.where(outside, -np.inf, np.asarray(log_target(safe), dtype=float))
    nonfinite = ~np.isfinite(new_logp)
    log_ratio = new_logp - cur_logp + prop.sum(axis=-1) - log_x.sum(axis=-1)
    log_ratio = np.where(nonfinite, -np.inf, log_ratio)
    u = rng.uniform(size=np.shape(log_ratio))
    accept = np.log(u) < log_ratio
    new_x = np.where(np.asarray(accept)[..., None], prop, log_x)
    new_cur = np.where(accept, new_logp, cur_logp)
    return new_x, new_cur, accept, nonfinite


# -- Gibbs steps -----------------------------------------------------------

def draw_theta(st, sigma_sq: float, rng: np.random.Generator) -> np.ndarray:
    chol = np.linalg.cholesky(st.xtsx)
    z = rng.standard_normal(chol.shape[0])
    return st.theta_hat + np.sqrt(sigma_sq) * linalg.solve_triangular(chol.T, z, lower=False)


def sigma2_conditional(st, theta, prior: PriorSpec, literal: bool = False) -> tuple[float, float]:
    """Shape and rate of the inverse-gamma full conditional of ``sigma_sq``.

    ``literal=True`` uses ``y' S^-1 y`` in place of the residual form, for
    comparison only.
    """
    shape = 0.5 * st.n + prior.a_exponent - 1.0
    if not shape > 0.0:
        raise ValueError(f"inverse-gamma shape {shape} is not positive")
    e = st.data.y if literal else st.data.y - st.mean(theta)
    rate = 0.5 * st.quad(e) + (prior.precision_rate or 0.0)
    if not rate > 0.0:
        raise ValueError("inverse-gamma rate is not positive: degenerate data")
    return shape, rate


def draw_sigma2(st, theta, prior: PriorSpec, rng: np.random.Generator, literal: bool = False) -> float:
    shape, rate = sigma2_conditional(st, theta, prior, literal)
    return rate / rng.gamma(shape)


def step_theta(data: GpDataset, xi, sigma_sq: float, rng: np.random.Generator) -> np.ndarray:
    return draw_theta(covariance_state(data, xi), sigma_sq, rng)


def step_sigma2(data: GpDataset, xi, theta, prior: PriorSpec, rng: np.random.Generator,
                literal: bool = False) -> float:
    return draw_sigma2(covariance_state(data, xi), theta, prior, rng, literal)


class _XiTarget:
    """Log full conditional of ``xi`` at fixed ``(theta, sigma_sq)``; keeps the last state."""

    def __init__(self, data, prior, theta, sigma_sq):
        self.data, self.prior, self.theta, self.sigma_sq = data, prior, theta, sigma_sq
        self.state = None

    def __call__(self, xi):
        self.state = self.log_prior = None
        try:
            st = covariance_state(self.data, xi)
            loglik = full_loglik_from_state(st, self.theta, self.sigma_sq)
            log_prior = xi_log_prior(self.prior, self.data, xi, state=st)
        except (np.linalg.LinAlgError, DegenerateInformationError, ValueError, FloatingPointError):
            return -np.inf
        self.state, self.log_prior = st, log_prior
        return loglik + log_prior


def step_xi(data: GpDataset, xi, theta, sigma_sq: float, prior: PriorSpec,
            prop: ProposalSpec, rng: np.random.Generator, cur_state=None):
    """Block Metropolis update of ``xi``; returns ``(xi_new, accepted, state_new)``."""
    xi = np.asarray(xi, dtype=float)
    st = cur_state if cur_state is not None else covariance_state(data, xi)
    cur = full_loglik_from_state(st, theta, sigma_sq) + xi_log_prior(prior, data, xi, state=st)
    target = _XiTarget(data, prior, theta, sigma_sq)
    log_x, _, accept, _ = log_t_random_walk(target, np.log(xi), cur, prop.scale_chol, prop.dof, rng)
    if accept:
        return np.exp(log_x), True, target.state
    return xi, False, st


# -- chains ----------------------------------------------------------------

@dataclass
class ChainControls:
    iterations: int = 3000
    burn_in: int = 100
    seed: int = 0
    dof: float = DEFAULT_DOF
    scale_mult: float | None = None
    step2_literal: bool = False


@dataclass
class Chain:
    theta: np.ndarray
    sigma_sq: np.ndarray
    xi: np.ndarray
    accepted: np.ndarray
    seed: int
    burn_in: int
    prior: PriorSpec
    controls: ChainControls | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (np.all(np.isfinite(self.theta)) and np.all(np.isfinite(self.sigma_sq))
                and np.all(np.isfinite(self.xi))):
            raise AssertionError("non-finite value in chain")
        if np.any(self.sigma_sq <= 0.0) or np.any(self.xi <= 0.0):
            raise AssertionError("chain left the parameter space")

    def __len__(self) -> int:
        return self.sigma_sq.shape[0]

    @property
    def accept_count(self) -> int:
        return int(np.sum(self.accepted))

    @property
    def acceptance_rate(self) -> float:
        return self.accept_count / len(self) if len(self) else 0.0

    def columns(self) -> dict[str, np.ndarray]:
        cols = {f"theta_{j + 1}": self.theta[:, j] for j in range(self.theta.shape[1])}
        cols["sigma_sq"] = self.sigma_sq
        cols.update({f"xi_{k + 1}": self.xi[:, k] for k in range(self.xi.shape[1])})
        return cols

    def to_csv(self, path, metadata: dict | None = None, header_comment: str | None = None) -> None:
        """Write draws as CSV plus a ``<name>.meta`` key-value sidecar."""
        path = Path(path)
        cols = self.columns()
        names = ["iter", *cols, "accepted"]
        start = self.burn_in + 1
        iters = np.arange(start, start + len(self))
        with open(path, "w") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            fh.write(",".join(names) + "\n")
            for i in range(len(self)):
                vals = [str(iters[i])] + [repr(float(c[i])) for c in cols.values()]
                vals.append(str(int(self.accepted[i])))
                fh.write(",".join(vals) + "\n")
        meta = {"seed": self.seed, "burn_in": self.burn_in, "prior": self.prior.kind,
                "a_exponent": self.prior.a_exponent, "stored": len(self),
                "acceptance_rate": self.acceptance_rate, "rng_stream_version": STREAM_VERSION}
        if self.controls is not None:
            meta.update({f"control.{k}": v for k, v in vars(self.controls).items()})
        meta.update(self.diagnostics)
        meta.update(metadata or {})
        with open(path.with_suffix(".meta"), "w") as fh:
            for k, v in meta.items():
                fh.write(f"{k} = {v}\n")


def read_chain_csv(path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.startswith("#")]
    names = lines[0].strip().split(",")
    arr = np.loadtxt(lines[1:], delimiter=",", ndmin=2).reshape(-1, len(names))
    return {name: arr[:, j] for j, name in enumerate(names)}


def read_metadata(path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for line in fh:
            if "=" in line:
                k, v = line.split("=", 1)
                out[k.strip()] = v.strip()
    return out


def run_chain(data: GpDataset, prior: PriorSpec, controls: ChainControls,
              start: tuple | None = None, proposal: ProposalSpec | None = None,
              mle: MleResult | None = None) -> Chain:
    """Run the sampler; deterministic given ``controls.seed``.

    ``start`` is ``(theta, sigma_sq, xi)``; by default the ML estimates are
    used, as is the proposal built from the ML information.
    """
    if proposal is None or start is None:
        if mle is None:
            from .mle import fisher_scoring

            mle = fisher_scoring(data)
        if proposal is None:
            proposal = proposal_covariance(mle, controls.dof, controls.scale_mult)
        if start is None:
            start = (mle.theta_hat, mle.sigma_sq_hat, mle.xi_hat)
    if controls.iterations <= controls.burn_in:
        raise ValueError("iterations must exceed burn-in")
    rng_theta, rng_sigma, rng_xi = chain_streams(controls.seed)
    theta = np.asarray(start[0], dtype=float).reshape(-1)
    sigma_sq = float(start[1])
    log_xi = np.log(np.asarray(start[2], dtype=float))
    st = covariance_state(data, np.exp(log_xi))
    cur_prior = xi_log_prior(prior, data, np.exp(log_xi), state=st)
    scale_chol = proposal.scale_chol
    dof = proposal.dof
    n_keep = controls.iterations - controls.burn_in
    out_theta = np.empty((n_keep, data.q))
    out_sigma = np.empty(n_keep)
    out_xi = np.empty((n_keep, data.r))
    out_acc = np.zeros(n_keep, dtype=bool)
    nonfinite = 0
    total_accept = 0
    for it in range(controls.iterations):
        theta = draw_theta(st, sigma_sq, rng_theta)
        sigma_sq = draw_sigma2(st, theta, prior, rng_sigma, controls.step2_literal)
        cur = full_loglik_from_state(st, theta, sigma_sq) + cur_prior
        target = _XiTarget(data, prior, theta, sigma_sq)
        log_xi_new, _, acc, bad = log_t_random_walk(target, log_xi, cur, scale_chol, dof, rng_xi)
        nonfinite += int(bad)
        if acc:
            total_accept += 1
            log_xi, st, cur_prior = log_xi_new, target.state, target.log_prior
        j = it - controls.burn_in
        if j >= 0:
            out_theta[j] = theta
            out_sigma[j] = sigma_sq
            out_xi[j] = np.exp(log_xi)
            out_acc[j] = acc
    return Chain(
        theta=out_theta, sigma_sq=out_sigma, xi=out_xi, accepted=out_acc,
        seed=controls.seed, burn_in=controls.burn_in, prior=prior, controls=controls,
        diagnostics={"nonfinite_rejections": nonfinite,
                     "overall_acceptance_rate": total_accept / controls.iterations},
    )


def summarize(chain: Chain, gamma: float = 0.05) -> dict[str, dict[str, float]]:
    """Posterior mean and equal-tailed ``(1 - gamma)`` interval per parameter."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    if len(chain) == 0:
        raise ValueError("cannot summarise an empty chain")
    return {name: summarize_draws(vals, gamma) for name, vals in chain.columns().items()}


def summarize_draws(draws, gamma: float = 0.05) -> dict[str, float]:
    draws = np.asarray(draws, dtype=float)
    if draws.size == 0:
        raise ValueError("cannot summarise an empty sample")
    lo, hi = np.quantile(draws, [gamma / 2.0, 1.0 - gamma / 2.0])
    return {"mean": float(draws.mean()), "lower": float(lo), "upper": float(hi),
            "length": float(hi - lo)}
