"""Isotropic correlation families, their range derivatives and factor matrices.

Every family is written as ``rho(d; xi) = rho0(d * xi)`` where ``xi > 0`` is the
range parameter (large ``xi`` means fast decay) and ``d`` a Euclidean distance.
The roughness ``alpha`` is fixed at construction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import special
from scipy.spatial.distance import pdist, squareform

from .kron import cholesky_jitter

logger = logging.getLogger(__name__)

FAMILIES = ("spherical", "power_exponential", "rational_quadratic", "matern")
MATERN_ORIGIN = 1e-10


@dataclass(frozen=True)
class CorrelationFamily:
    tag: str
    roughness: float = 1.0

    def __post_init__(self):
        if self.tag not in FAMILIES:
            raise ValueError(f"unknown correlation family {self.tag!r}; expected one of {FAMILIES}")
        alpha = float(self.roughness)
        object.__setattr__(self, "roughness", alpha)
        if self.tag == "power_exponential" and not 0.0 < alpha <= 2.0:
            raise ValueError(f"power_exponential roughness must lie in (0, 2], got {alpha}")
        if self.tag in ("rational_quadratic", "matern") and not alpha > 0.0:
            raise ValueError(f"{self.tag} roughness must be positive, got {alpha}")

    def corr(self, d, xi):
        """Correlation at distance(s) ``d`` for range ``xi``; vectorised over ``d``."""
        d = np.asarray(d, dtype=float)
        u = d * xi
        a = self.roughness
        if self.tag == "power_exponential":
            with np.errstate(over="ignore"):
                return np.exp(-(u**a))
        if self.tag == "rational_quadratic":
            return (1.0 + u * u) ** (-a)
        if self.tag == "spherical":
            return np.where(u < 1.0, 1.0 - 1.5 * u + 0.5 * u**3, 0.0)
        # matern
        small = u < MATERN_ORIGIN
        us = np.where(small, 1.0, u)
        with np.errstate(invalid="ignore", over="ignore"):
            val = us**a * special.kv(a, us) / (2.0 ** (a - 1.0) * special.gamma(a))
        val = np.where(np.isfinite(val), val, 0.0)
        return np.where(small, 1.0, val)

    def corr_deriv(self, d, xi):
        """Analytic derivative of :meth:`corr` with respect to ``xi``."""
        d = np.asarray(d, dtype=float)
        u = d * xi
        a = self.roughness
        if self.tag == "power_exponential":
            # past exp(-800) the correlation is exactly zero; capping keeps inf * 0 out
            with np.errstate(over="ignore"):
                ua = np.minimum(u**a, 800.0)
            return -a * ua / xi * np.exp(-ua)
        if self.tag == "rational_quadratic":
            return -2.0 * a * d * u * (1.0 + u * u) ** (-a - 1.0)
        if self.tag == "spherical":
            if np.any(u == 1.0):
                logger.warning("spherical derivative at the kink d*xi = 1; using the left derivative")
            return np.where(u <= 1.0, 1.5 * d * (u * u - 1.0), 0.0)
        # matern: d/du [u^a K_a(u)] = -u^a K_{a-1}(u)
        pos = u > 0.0
        us = np.where(pos, u, 1.0)
        with np.errstate(invalid="ignore", over="ignore"):
            val = -d * us**a * special.kv(a - 1.0, us) / (2.0 ** (a - 1.0) * special.gamma(a))
        val = np.where(np.isfinite(val), val, 0.0)
        return np.where(pos, val, 0.0)


def _as_points(locations) -> np.ndarray:
    pts = np.asarray(locations, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2:
        raise ValueError("locations must be a 1-D or 2-D array")
    return pts


def distance_matrix(locations) -> np.ndarray:
    pts = _as_points(locations)
    return squareform(pdist(pts))


@dataclass(frozen=True)
class FactorModel:
    """One separable factor: a family, its locations and a range value."""

    family: CorrelationFamily
    locations: np.ndarray
    range: float

    def __post_init__(self):
        pts = _as_points(self.locations)
        object.__setattr__(self, "locations", pts)
        if pts.shape[0] < 2:
            raise ValueError(f"a factor needs at least 2 locations, got {pts.shape[0]}")
        dist = distance_matrix(pts)
        off = dist[~np.eye(len(pts), dtype=bool)]
        if np.any(off == 0.0):
            raise ValueError("factor locations must be pairwise distinct")
        if not self.range > 0.0:
            raise ValueError(f"range parameter must be positive, got {self.range}")

    @property
    def distances(self) -> np.ndarray:
        return distance_matrix(self.locations)


def build_factor(fm: FactorModel) -> np.ndarray:
    sigma = fm.family.corr(fm.distances, fm.range)
    np.fill_diagonal(sigma, 1.0)
    return sigma


def build_factor_deriv(fm: FactorModel) -> np.ndarray:
    dot = fm.family.corr_deriv(fm.distances, fm.range)
    np.fill_diagonal(dot, 0.0)
    return dot


def check_positive_definite(fm: FactorModel) -> np.ndarray:
    """Build the factor and return its Cholesky factor (raises if not PD)."""
    return cholesky_jitter(build_factor(fm))


@dataclass(frozen=True)
class ExpansionFactors:
    """Leading-order small-range expansion ``S = 11' + nu(xi) (D + o(1))``."""

    nu_exponent: float
    D: np.ndarray
    F: np.ndarray
    G: np.ndarray
    H: np.ndarray | None

    def nu(self, xi):
        return np.asarray(xi, dtype=float) ** self.nu_exponent


def expansion_leading(fm: FactorModel, x_k=None) -> ExpansionFactors:
    """Leading-order expansion for the power-exponential family with ``alpha < 2``.

    ``x_k`` is the factor's regression vector; ``H`` is only defined (and only
    returned) when it is not a constant vector.
    """
    fam = fm.family
    if fam.tag != "power_exponential":
        raise NotImplementedError(
            f"expansion is only derived for power_exponential, not {fam.tag}"
        )
    a = fam.roughness
    if a >= 2.0:
        raise NotImplementedError(
            "expansion needs roughness < 2: with alpha = 2 and more than three "
            "equally spaced points the leading matrix D is singular"
        )
    D = -(fm.distances**a)
    n = D.shape[0]
    try:
        dinv = np.linalg.inv(D)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("leading matrix D is singular") from exc
    if np.linalg.cond(D) > 1e12:
        raise np.linalg.LinAlgError("leading matrix D is numerically singular")
    one = np.ones(n)
    d1 = dinv @ one
    s = one @ d1
    F = np.outer(d1, d1) / s**2
    G = dinv - np.outer(d1, d1) / s
    H = None
    if x_k is not None:
        x = np.asarray(x_k, dtype=float)
        if not np.allclose(x, x[0]):
            gx = G @ x
            H = np.outer(gx, gx) / (x @ gx)
    return ExpansionFactors(nu_exponent=a, D=D, F=F, G=G, H=H)
