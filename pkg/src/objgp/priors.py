"""Objective priors for the range parameters, and the empirical-Bayes alternative.

The formal priors (reference, independence Jeffreys, Jeffreys-rule) are
improper; their log values are returned with the normalising constant set
to zero, so only differences are meaningful.  None of them depends on the
response vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import GpDataset
from .likelihood import TraceSet, covariance_state

KINDS = ("reference", "indep_jeffreys", "jeffreys_rule", "empirical_bayes")
FORMAL_KINDS = KINDS[:3]
PIVOT_TOL = 1e-12
DEFAULT_EB_MULTIPLIER = 10.0


class DegenerateInformationError(np.linalg.LinAlgError):
    """An information matrix is not positive definite."""


@dataclass(frozen=True)
class PriorSpec:
    """A prior of the form ``pi(xi) / sigma_sq ** a`` (flat in ``theta``).

    For ``empirical_bayes`` the precision ``1/sigma_sq`` and every range
    parameter get independent exponential priors with the given rates; the
    exponential prior on the precision is what makes ``a = 2``.
    """

    kind: str
    a_exponent: float
    precision_rate: float | None = None
    xi_rates: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown prior kind {self.kind!r}; expected one of {KINDS}")
        eb = self.kind == "empirical_bayes"
        if eb != (self.precision_rate is not None and self.xi_rates is not None):
            raise ValueError("exponential rates are required for, and only for, empirical_bayes")
        if eb:
            rates = tuple(float(x) for x in self.xi_rates)
            if not self.precision_rate > 0.0 or not all(x > 0.0 for x in rates):
                raise ValueError("empirical-Bayes rates must be positive")
            object.__setattr__(self, "xi_rates", rates)

    @classmethod
    def reference(cls) -> "PriorSpec":
        return cls("reference", 1.0)

    @classmethod
    def indep_jeffreys(cls) -> "PriorSpec":
        return cls("indep_jeffreys", 1.0)

    @classmethod
    def jeffreys_rule(cls, q: int = 1) -> "PriorSpec":
        return cls("jeffreys_rule", 1.0 + q / 2.0)

    @classmethod
    def empirical_bayes(cls, precision_rate: float, xi_rates) -> "PriorSpec":
        return cls("empirical_bayes", 2.0, float(precision_rate), tuple(xi_rates))

    @classmethod
    def empirical_bayes_from_estimates(
        cls, sigma_sq_hat: float, xi_hat, multiplier: float = DEFAULT_EB_MULTIPLIER
    ) -> "PriorSpec":
        """Exponential priors with means ``multiplier`` times the ML estimates."""
        if not multiplier > 0.0:
            raise ValueError("multiplier must be positive")
        precision_hat = 1.0 / sigma_sq_hat
        xi_hat = np.asarray(xi_hat, dtype=float)
        return cls.empirical_bayes(
            1.0 / (multiplier * precision_hat), 1.0 / (multiplier * xi_hat)
        )

    @classmethod
    def formal(cls, kind: str, q: int = 1) -> "PriorSpec":
        if kind == "reference":
            return cls.reference()
        if kind == "indep_jeffreys":
            return cls.indep_jeffreys()
        if kind == "jeffreys_rule":
            return cls.jeffreys_rule(q)
        raise ValueError(f"{kind!r} is not a formal prior")


def w_traces(data: GpDataset, xi, dense: bool | None = None) -> TraceSet:
    """Traces of ``W_k = S_dot_k Q``."""
    return covariance_state(data, xi, dense).w_traces()


def u_traces(data: GpDataset, xi, dense: bool | None = None) -> TraceSet:
    """Traces of ``U_k = S_dot_k S^{-1}``."""
    return covariance_state(data, xi, dense).u_traces()


def information_matrix(lead: float, traces: TraceSet) -> np.ndarray:
    r = traces.tr.shape[0]
    info = np.empty((r + 1, r + 1))
    info[0, 0] = lead
    info[0, 1:] = info[1:, 0] = traces.tr
    info[1:, 1:] = traces.cross
    return info


def half_logdet_pd(mat: np.ndarray, what: str = "information matrix") -> float:
    """``0.5 * log det`` through a Cholesky factorisation with a pivot floor."""
    try:
        chol = np.linalg.cholesky(mat)
    except np.linalg.LinAlgError as exc:
        raise DegenerateInformationError(f"{what} is not positive definite") from exc
    piv = np.diag(chol) ** 2
    if piv.min() <= PIVOT_TOL * max(piv.max(), np.abs(np.diag(mat)).max()):
        raise DegenerateInformationError(f"{what} is numerically singular")
    return float(np.sum(np.log(np.diag(chol))))


def reference_log_prior(data: GpDataset, xi, dense: bool | None = None, state=None) -> float:
    st = state if state is not None else covariance_state(data, xi, dense)
    info = information_matrix(st.n - st.q, st.w_traces())
    return half_logdet_pd(info, "reference information matrix")


def jeffreys_ind_log_prior(data: GpDataset, xi, dense: bool | None = None, state=None) -> float:
    st = state if state is not None else covariance_state(data, xi, dense)
    info = information_matrix(st.n, st.u_traces())
    return half_logdet_pd(info, "Jeffreys information matrix")


def jeffreys_rule_log_prior(data: GpDataset, xi, dense: bool | None = None, state=None) -> float:
    st = state if state is not None else covariance_state(data, xi, dense)
    return jeffreys_ind_log_prior(data, xi, state=st) + 0.5 * st.logdet_xtsx


def empirical_bayes_log_prior(precision: float, xi, spec: PriorSpec) -> float:
    """Sum of exponential log-densities over the precision and each range."""
    if spec.kind != "empirical_bayes":
        raise ValueError("spec is not an empirical-Bayes prior")
    return exponential_logpdf(precision, spec.precision_rate) + xi_exponential_log_prior(xi, spec)


def exponential_logpdf(x, rate: float):
    x = np.asarray(x, dtype=float)
    return np.where(x >= 0.0, np.log(rate) - rate * x, -np.inf)


def xi_exponential_log_prior(xi, spec: PriorSpec) -> float:
    xi = np.asarray(xi, dtype=float)
    return float(np.sum(exponential_logpdf(xi, np.asarray(spec.xi_rates))))


def xi_log_prior(spec: PriorSpec, data: GpDataset, xi, state=None) -> float:
    """Log of the ``xi`` part of the prior, as used by the sampler."""
    if spec.kind == "empirical_bayes":
        return xi_exponential_log_prior(xi, spec)
    fn = {
        "reference": reference_log_prior,
        "indep_jeffreys": jeffreys_ind_log_prior,
        "jeffreys_rule": jeffreys_rule_log_prior,
    }[spec.kind]
    return fn(data, xi, state=state)


def per_factor_log_bounds(data: GpDataset, xi, kind: str, dense: bool | None = None, state=None):
    """Leading scalar and per-factor terms of the factorised prior bound.

    The bound is ``log lead + sum(terms)`` (both halved already).  Each term
    depends on its own range parameter only when the dataset is structured.
    """
    st = state if state is not None else covariance_state(data, xi, dense)
    if kind == "reference":
        lead, terms = st.n - st.q, 0.5 * np.log(st.w_traces().tr_sq)
    elif kind in ("indep_jeffreys", "jeffreys_rule"):
        lead, terms = st.n, 0.5 * np.log(st.u_traces().tr_sq)
        if kind == "jeffreys_rule":
            if st.structured:
                terms = terms + 0.5 * np.log(st.per_factor_xtsx())
            else:
                terms = terms.copy()
                terms[0] += 0.5 * st.logdet_xtsx
    else:
        raise ValueError(f"no factorised bound for prior kind {kind!r}")
    return 0.5 * np.log(lead), terms


def prior_upper_bound(data: GpDataset, xi, kind: str, dense: bool | None = None, state=None) -> float:
    """Log of the factorised upper bound on the formal prior of ``kind``.

    The bound is Hadamard's inequality applied to the information matrix:
    its determinant is at most the product of its diagonal.
    """
    lead, terms = per_factor_log_bounds(data, xi, kind, dense, state)
    return float(lead + np.sum(terms))
