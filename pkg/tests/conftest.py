import numpy as np
import pytest
from scipy import integrate

from objgp.correlation import FAMILIES, CorrelationFamily
from objgp.data import DesignGrid, GpDataset
from objgp.likelihood import gls_auxiliaries, log_integrated_theta, log_likelihood

ROUGHNESS_RANGE = {
    "spherical": (1.0, 1.0),
    "power_exponential": (0.5, 1.9),
    "rational_quadratic": (0.5, 2.0),
    "matern": (0.6, 2.6),
}


def random_family(rng, tag=None):
    tag = tag or FAMILIES[rng.integers(len(FAMILIES))]
    lo, hi = ROUGHNESS_RANGE[tag]
    return CorrelationFamily(tag, rng.uniform(lo, hi))


def random_dataset(rng, dims, families=None, slope=False, spread=1.0):
    """Structured dataset on a random product grid with a random response."""
    factors = [np.sort(rng.uniform(0.0, spread, size=m)) for m in dims]
    grid = DesignGrid.grid(*factors)
    fams = families or tuple(random_family(rng) for _ in dims)
    if slope:
        x = tuple(f[:, 0] + rng.uniform(0.5, 1.5) for f in grid.factors)
    else:
        x = tuple(np.ones(m) for m in dims)
    y = rng.standard_normal(grid.n)
    return GpDataset(y=y, x=x, grid=grid, families=fams)


def safe_xi(rng, data):
    """Range values that keep every factor comfortably positive definite.

    Spherical ranges stay below the inverse of the factor's span, so no pair
    of points falls on the compact-support edge.
    """
    out = []
    for fam, f in zip(data.families, data.grid.factors):
        span = np.ptp(f[:, 0]) or 1.0
        if fam.tag == "spherical":
            out.append(rng.uniform(0.05, 0.6) / span)
        else:
            out.append(rng.uniform(0.5, 4.0) / span)
    return np.array(out)


def explicit_sigma(data, xi):
    """Full correlation matrix built entry by entry from the expanded table."""
    locs, groups = data.grid.expanded()
    n = locs.shape[0]
    sigma = np.ones((n, n))
    for fam, g, x in zip(data.families, groups, xi):
        pts = locs[:, list(g)]
        d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
        part = fam.corr(d, x)
        np.fill_diagonal(part, 1.0)
        sigma = sigma * part
    return sigma


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def theta_quadrature(d, sigma_sq, xi):
    """Log of the likelihood integrated over a scalar mean coefficient by adaptive quadrature."""
    aux = gls_auxiliaries(d, xi)
    center = aux.theta_hat[0]
    sd = np.sqrt(sigma_sq / aux.xtsx[0, 0])
    peak = log_likelihood(d, [center], sigma_sq, xi)
    val, _ = integrate.quad(lambda t: np.exp(log_likelihood(d, [t], sigma_sq, xi) - peak),
                            center - 15 * sd, center + 15 * sd, epsabs=0, epsrel=1e-11)
    return peak + np.log(val)


def sigma_quadrature(d, xi, a):
    """Log of the theta-integrated likelihood times ``sigma_sq^-a``, integrated over ``log sigma_sq``."""
    shape = 0.5 * (d.n - d.q) + a - 1.0
    mode = np.log(gls_auxiliaries(d, xi).s_sq / (2.0 * shape))

    def f(t):
        return log_integrated_theta(d, np.exp(t), xi) - a * t + t

    peak = f(mode)
    val, _ = integrate.quad(lambda t: np.exp(f(t) - peak), mode - 30, mode + 30,
                            epsabs=0, epsrel=1e-11, limit=200)
    return peak + np.log(val)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
