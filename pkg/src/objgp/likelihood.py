"""Full and integrated likelihoods of a Gaussian process with separable correlation.

Two evaluation paths share one interface.  :class:`StructuredState` works
factor by factor and never forms an ``n x n`` matrix; it needs a product grid
and a Kronecker mean structure.  :class:`DenseState` builds the covariance
from the explicit location table and works for any design.

All values are natural logarithms with their normalising constants included:

* ``log_likelihood`` is the exact Gaussian log-density;
* ``log_integrated_theta`` is the exact log of the likelihood integrated
  over the regression coefficients against Lebesgue measure;
* ``log_integrated_theta_sigma`` is the exact log of the previous quantity
  integrated over the variance against ``sigma_sq ** -a``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, reduce
from typing import Callable

import numpy as np
from scipy import linalg, special

from .data import GpDataset
from .kron import FactorCholesky, cholesky_jitter, kron_matvec

LOG_2PI = np.log(2.0 * np.pi)


class DegenerateDataError(ValueError):
    """The response lies in the column space of the regression design."""


class RankDeficientError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class TraceSet:
    """Traces of a family of matrices ``M_1..M_r``.

    ``cross[i, j] = tr(M_i M_j)``; its diagonal equals ``tr_sq``.
    """

    tr: np.ndarray
    tr_sq: np.ndarray
    cross: np.ndarray

    def permuted(self, order) -> "TraceSet":
        order = np.asarray(order)
        return TraceSet(self.tr[order], self.tr_sq[order], self.cross[np.ix_(order, order)])


def _check_xi(data: GpDataset, xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float).reshape(-1)
    if xi.shape[0] != data.r:
        raise ValueError(f"expected {data.r} range parameters, got {xi.shape[0]}")
    if not np.all(xi > 0.0):
        raise ValueError(f"range parameters must be positive, got {xi}")
    return xi


def _outer_all(vecs) -> np.ndarray:
    """Kronecker product of vectors, i.e. their outer product flattened in C order."""
    return reduce(np.multiply.outer, vecs).reshape(-1)


class StructuredState:
    """Covariance quantities at one ``xi`` for a Kronecker-structured dataset."""

    structured = True

    def __init__(self, data: GpDataset, xi):
        self.data = data
        self.xi = _check_xi(data, xi)
        self.dims = data.grid.dims
        self.n, self.q, self.r = data.dims
        self.sigmas = []
        for fam, dist, x in zip(data.families, data.grid.factor_distances, self.xi):
            s = fam.corr(dist, x)
            np.fill_diagonal(s, 1.0)
            self.sigmas.append(s)
        self.chol = FactorCholesky(
            tuple(cholesky_jitter(s, index=k) for k, s in enumerate(self.sigmas))
        )
        self.xk = data.kron_x
        self.sxk = [inv @ x for inv, x in zip(self.sigma_invs, self.xk)]
        self.ck = np.array([x @ sx for x, sx in zip(self.xk, self.sxk)])
        if not np.all(self.ck > 0.0):
            raise RankDeficientError("X' S^-1 X is not positive")

    # -- basic algebra -------------------------------------------------
    @cached_property
    def logdet_sigma(self) -> float:
        return self.chol.logdet()

    @cached_property
    def logdet_xtsx(self) -> float:
        return float(np.sum(np.log(self.ck)))

    @cached_property
    def xtsx(self) -> np.ndarray:
        return np.array([[np.prod(self.ck)]])

    @cached_property
    def x_dense(self) -> np.ndarray:
        return _outer_all(self.xk)

    @cached_property
    def sinv_x(self) -> np.ndarray:
        return _outer_all(self.sxk)

    def solve(self, v: np.ndarray) -> np.ndarray:
        return self.chol.solve(v)

    def quad(self, v: np.ndarray) -> float:
        z = self.chol.half_solve(v)
        return float(z @ z)

    def mean(self, theta) -> np.ndarray:
        return self.x_dense * float(np.asarray(theta).reshape(-1)[0])

    def lower_matvec(self, z) -> np.ndarray:
        return self.chol.lower_matvec(z)

    @cached_property
    def theta_hat(self) -> np.ndarray:
        t = self.data.y.reshape(self.dims)
        for sx in reversed(self.sxk):
            t = t @ sx
        return np.array([float(t) / np.prod(self.ck)])

    @cached_property
    def residual(self) -> np.ndarray:
        return self.data.y - self.mean(self.theta_hat)

    @cached_property
    def s_sq(self) -> float:
        return self.quad(self.residual)

    def q_apply(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        return self.solve(v) - self.sinv_x * (self.sinv_x @ v) / np.prod(self.ck)

    # -- derivatives ---------------------------------------------------
    @cached_property
    def sigma_dots(self) -> list[np.ndarray]:
        dots = []
        for fam, dist, x in zip(self.data.families, self.data.grid.factor_distances, self.xi):
            s = fam.corr_deriv(dist, x)
            np.fill_diagonal(s, 0.0)
            dots.append(s)
        return dots

    @cached_property
    def sigma_invs(self) -> list[np.ndarray]:
        return [inv.T @ inv for inv in self.chol.inverse_lower_factors]

    def sigma_dot_apply(self, k: int, v) -> np.ndarray:
        mats = list(self.sigmas)
        mats[k] = self.sigma_dots[k]
        return kron_matvec(mats, v)

    @cached_property
    def _factor_traces(self):
        t1, t2, b1, m = [], [], [], []
        for dot, inv, sx, c in zip(self.sigma_dots, self.sigma_invs, self.sxk, self.ck):
            a = dot @ inv
            dsx = dot @ sx
            t1.append(a.trace())
            t2.append(np.vdot(a, a.T))
            b1.append(sx @ dsx / c)
            # sx' A S_dot sx with A = S_dot S^-1 and S_dot symmetric
            m.append(dsx @ inv @ dsx / c)
        return np.array(t1), np.array(t2), np.array(b1), np.array(m)

    def _cofactor_sizes(self) -> tuple[np.ndarray, np.ndarray]:
        dims = np.array(self.dims, dtype=float)
        n_k = self.n / dims
        n_ij = self.n / np.outer(dims, dims)
        return n_k, n_ij

    def u_traces(self) -> TraceSet:
        t1, t2, _, _ = self._factor_traces
        n_k, n_ij = self._cofactor_sizes()
        cross = n_ij * np.outer(t1, t1)
        tr_sq = n_k * t2
        np.fill_diagonal(cross, tr_sq)
        return TraceSet(n_k * t1, tr_sq, cross)

    def w_traces(self) -> TraceSet:
        t1, t2, b1, m = self._factor_traces
        n_k, n_ij = self._cofactor_sizes()
        # Phi_k has rank one, so tr (S_dot_k Phi_k)^2 = b1_k^2
        tr_sq = n_k * t2 + b1**2 - 2.0 * m
        cross = n_ij * np.outer(t1, t1) - np.outer(b1, b1)
        np.fill_diagonal(cross, tr_sq)
        return TraceSet(n_k * t1 - b1, tr_sq, cross)

    def per_factor_xtsx(self) -> np.ndarray:
        return self.ck


class DenseState:
    """Covariance quantities at one ``xi`` from explicit ``n x n`` matrices."""

    structured = False

    def __init__(self, data: GpDataset, xi):
        self.data = data
        self.xi = _check_xi(data, xi)
        self.n, self.q, self.r = data.dims
        self._parts = []
        self._dparts = []
        for fam, dist, x in zip(data.families, data.grid.group_distances, self.xi):
            part = fam.corr(dist, x)
            np.fill_diagonal(part, 1.0)
            dpart = fam.corr_deriv(dist, x)
            np.fill_diagonal(dpart, 0.0)
            self._parts.append(part)
            self._dparts.append(dpart)
        self.sigma = reduce(np.multiply, self._parts)
        self.lower = cholesky_jitter(self.sigma)
        self.x = data.dense_x
        self.sinv_x = self.solve(self.x)
        xtsx = self.x.T @ self.sinv_x
        try:
            self._xtsx_chol = linalg.cholesky(xtsx, lower=True)
        except np.linalg.LinAlgError as exc:
            raise RankDeficientError("X' S^-1 X is singular") from exc
        self.xtsx = xtsx

    def solve(self, v):
        return linalg.cho_solve((self.lower, True), v, check_finite=False)

    def quad(self, v) -> float:
        z = linalg.solve_triangular(self.lower, v, lower=True, check_finite=False)
        return float(z @ z)

    def mean(self, theta) -> np.ndarray:
        return self.x @ np.asarray(theta, dtype=float).reshape(-1)

    def lower_matvec(self, z) -> np.ndarray:
        return self.lower @ z

    @cached_property
    def logdet_sigma(self) -> float:
        return float(2.0 * np.sum(np.log(np.diag(self.lower))))

    @cached_property
    def logdet_xtsx(self) -> float:
        return float(2.0 * np.sum(np.log(np.diag(self._xtsx_chol))))

    @cached_property
    def theta_hat(self) -> np.ndarray:
        return linalg.cho_solve((self._xtsx_chol, True), self.sinv_x.T @ self.data.y)

    @cached_property
    def residual(self) -> np.ndarray:
        return self.data.y - self.mean(self.theta_hat)

    @cached_property
    def s_sq(self) -> float:
        return self.quad(self.residual)

    @cached_property
    def sigma_inv(self) -> np.ndarray:
        return self.solve(np.eye(self.n))

    @cached_property
    def P(self) -> np.ndarray:
        gain = linalg.cho_solve((self._xtsx_chol, True), self.sinv_x.T)
        return np.eye(self.n) - self.x @ gain

    @cached_property
    def Q(self) -> np.ndarray:
        return self.sigma_inv @ self.P

    def q_apply(self, v) -> np.ndarray:
        return self.Q @ v

    @cached_property
    def sigma_dots(self) -> list[np.ndarray]:
        dots = []
        for k in range(self.r):
            mats = list(self._parts)
            mats[k] = self._dparts[k]
            dots.append(reduce(np.multiply, mats))
        return dots

    def sigma_dot_apply(self, k: int, v) -> np.ndarray:
        return self.sigma_dots[k] @ v

    @staticmethod
    def _traces(mats) -> TraceSet:
        r = len(mats)
        cross = np.empty((r, r))
        for i in range(r):
            for j in range(i, r):
                cross[i, j] = cross[j, i] = np.sum(mats[i] * mats[j].T)
        return TraceSet(np.array([np.trace(m) for m in mats]), np.diag(cross).copy(), cross)

    @cached_property
    def w_matrices(self) -> list[np.ndarray]:
        return [dot @ self.Q for dot in self.sigma_dots]

    @cached_property
    def u_matrices(self) -> list[np.ndarray]:
        return [dot @ self.sigma_inv for dot in self.sigma_dots]

    def w_traces(self) -> TraceSet:
        return self._traces(self.w_matrices)

    def u_traces(self) -> TraceSet:
        return self._traces(self.u_matrices)


def covariance_state(data: GpDataset, xi, dense: bool | None = None):
    """Evaluation state at ``xi``; structured whenever the dataset allows it."""
    use_dense = (not data.structured) if dense is None else dense
    if not use_dense and not data.structured:
        raise ValueError("the structured path needs a grid design with Kronecker regression factors")
    return DenseState(data, xi) if use_dense else StructuredState(data, xi)


@dataclass(frozen=True)
class GlsAuxiliaries:
    theta_hat: np.ndarray
    s_sq: float
    logdet_sigma: float
    logdet_xtsx: float
    xtsx: np.ndarray
    q_apply: Callable[[np.ndarray], np.ndarray]


def gls_auxiliaries(data: GpDataset, xi, dense: bool | None = None) -> GlsAuxiliaries:
    st = covariance_state(data, xi, dense)
    return GlsAuxiliaries(
        theta_hat=st.theta_hat,
        s_sq=st.s_sq,
        logdet_sigma=st.logdet_sigma,
        logdet_xtsx=st.logdet_xtsx,
        xtsx=st.xtsx,
        q_apply=st.q_apply,
    )


def full_loglik_from_state(st, theta, sigma_sq: float) -> float:
    e = st.data.y - st.mean(theta)
    n = st.n
    return float(
        -0.5 * n * (LOG_2PI + np.log(sigma_sq))
        - 0.5 * st.logdet_sigma
        - 0.5 * st.quad(e) / sigma_sq
    )


def log_likelihood(data: GpDataset, theta, sigma_sq: float, xi, dense: bool | None = None) -> float:
    """Exact Gaussian log-density of ``y ~ N(X theta, sigma_sq * S(xi))``."""
    if not sigma_sq > 0.0:
        raise ValueError("sigma_sq must be positive")
    return full_loglik_from_state(covariance_state(data, xi, dense), theta, sigma_sq)


def integrated_theta_from_state(st, sigma_sq: float) -> float:
    m = st.n - st.q
    return float(
        -0.5 * m * (LOG_2PI + np.log(sigma_sq))
        - 0.5 * st.logdet_sigma
        - 0.5 * st.logdet_xtsx
        - 0.5 * st.s_sq / sigma_sq
    )


def log_integrated_theta(data: GpDataset, sigma_sq: float, xi, dense: bool | None = None) -> float:
    if not sigma_sq > 0.0:
        raise ValueError("sigma_sq must be positive")
    if data.n <= data.q:
        raise ValueError("need n > q")
    return integrated_theta_from_state(covariance_state(data, xi, dense), sigma_sq)


def integrated_theta_sigma_from_state(st, a: float) -> float:
    m = 0.5 * (st.n - st.q) + a - 1.0
    if not m > 0.0:
        raise ValueError(f"the variance integral diverges: need a > 1 - (n - q)/2, got a = {a}")
    s_sq = st.s_sq
    if not s_sq > 1e-300:
        raise DegenerateDataError("S^2 = 0: the response lies in the column space of X")
    return float(
        -0.5 * (st.n - st.q) * LOG_2PI
        - 0.5 * st.logdet_sigma
        - 0.5 * st.logdet_xtsx
        + special.gammaln(m)
        - m * np.log(0.5 * s_sq)
    )


def log_integrated_theta_sigma(data: GpDataset, xi, a: float, dense: bool | None = None) -> float:
    """Log of the likelihood integrated over ``theta`` and ``sigma_sq``.

    The constant is ``(2 pi)^{-(n-q)/2} Gamma(m) 2^m`` with
    ``m = (n - q)/2 + a - 1``, which makes the value the exact integral of
    ``exp(log_integrated_theta) * sigma_sq ** -a`` over ``sigma_sq > 0``.
    """
    return integrated_theta_sigma_from_state(covariance_state(data, xi, dense), a)
