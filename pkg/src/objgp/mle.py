"""Maximum likelihood for ``(sigma_sq, xi)`` by Fisher scoring.

The objective is the likelihood integrated over the regression coefficients.
Each iteration sets the variance to its closed-form maximiser
``y'Qy / (n - q)`` and moves ``xi`` by a scored step with backtracking.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

from .data import GpDataset
from .kron import NotPositiveDefiniteError
from .likelihood import covariance_state, integrated_theta_from_state

logger = logging.getLogger(__name__)


class SingularInformationError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class FisherInfo:
    """Expected information over ``(sigma_sq, xi_1..xi_r)`` in that order."""

    matrix: np.ndarray
    r: int

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (self.r + 1, self.r + 1):
            raise ValueError(f"information matrix has shape {m.shape}, expected {(self.r + 1,) * 2}")
        if not np.allclose(m, m.T, rtol=1e-12, atol=0.0):
            raise ValueError("information matrix is not symmetric")
        try:
            np.linalg.cholesky(m)
        except np.linalg.LinAlgError as exc:
            raise SingularInformationError("information matrix is not positive definite") from exc
        object.__setattr__(self, "matrix", m)

    @property
    def xi_block(self) -> np.ndarray:
        return self.matrix[1:, 1:]


@dataclass
class ScoringControls:
    max_iter: int = 200
    tol: float = 1e-8
    step: float = 1.0
    max_halvings: int = 20
    start_multipliers: tuple[float, ...] = (1.0, 0.1, 10.0)


@dataclass
class MleResult:
    sigma_sq_hat: float
    xi_hat: np.ndarray
    theta_hat: np.ndarray
    info: FisherInfo | None
    iterations: int
    converged: bool
    loglik: float
    trace: list[dict] = field(default_factory=list)
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "sigma_sq_hat": self.sigma_sq_hat,
            "xi_hat": list(map(float, self.xi_hat)),
            "theta_hat": list(map(float, self.theta_hat)),
            "information": None if self.info is None else self.info.matrix.tolist(),
            "iterations": self.iterations,
            "converged": self.converged,
            "loglik": self.loglik,
            "message": self.message,
            "trace": self.trace,
        }


def _score_from_state(st, sigma_sq: float, traces=None) -> np.ndarray:
    traces = traces if traces is not None else st.w_traces()
    z = st.solve(st.residual)  # = Q y
    quad = np.array([z @ st.sigma_dot_apply(k, z) for k in range(st.r)])
    g = np.empty(st.r + 1)
    g[0] = 0.5 * (st.s_sq / sigma_sq**2 - (st.n - st.q) / sigma_sq)
    g[1:] = 0.5 * (quad / sigma_sq - traces.tr)
    return g


def integrated_score(data: GpDataset, sigma_sq: float, xi, dense: bool | None = None) -> np.ndarray:
    """Gradient of the theta-integrated log-likelihood in ``(sigma_sq, xi)``."""
    return _score_from_state(covariance_state(data, xi, dense), sigma_sq)


def _info_matrix(st, sigma_sq: float, traces) -> np.ndarray:
    r = st.r
    m = np.empty((r + 1, r + 1))
    m[0, 0] = (st.n - st.q) / sigma_sq**2
    m[0, 1:] = m[1:, 0] = traces.tr / sigma_sq
    m[1:, 1:] = traces.cross
    return 0.5 * m


def expected_information(data: GpDataset, sigma_sq: float, xi, dense: bool | None = None) -> FisherInfo:
    st = covariance_state(data, xi, dense)
    return FisherInfo(_info_matrix(st, sigma_sq, st.w_traces()), st.r)


def default_xi(data: GpDataset) -> np.ndarray:
    """One over the median pairwise distance within each factor."""
    if data.grid.is_grid:
        pts = data.grid.factors
    else:
        pts = [data.grid.factor_points(k) for k in range(data.r)]
    out = []
    for p in pts:
        d = pdist(p)
        d = d[d > 0]
        out.append(1.0 / np.median(d))
    return np.array(out)


def _profile(data, xi):
    """State and profiled log-likelihood at ``xi`` (or ``None`` on numerical failure)."""
    try:
        st = covariance_state(data, xi)
        sigma_sq = st.s_sq / (st.n - st.q)
        val = integrated_theta_from_state(st, sigma_sq)
    except (NotPositiveDefiniteError, np.linalg.LinAlgError, FloatingPointError):
        return None, -np.inf, np.nan
    if not np.isfinite(val):
        return None, -np.inf, np.nan
    return st, val, sigma_sq


def _scoring_run(data: GpDataset, xi0, controls: ScoringControls) -> MleResult:
    xi = np.array(xi0, dtype=float)
    st, cur, sigma_sq = _profile(data, xi)
    if st is None:
        return MleResult(np.nan, xi, np.full(data.q, np.nan), None, 0, False, -np.inf,
                         message="start point is numerically infeasible")
    trace = []
    converged = False
    message = "maximum iterations reached"
    it = 0
    for it in range(1, controls.max_iter + 1):
        traces = st.w_traces()
        g = _score_from_state(st, sigma_sq, traces)[1:]
        gnorm = float(np.max(np.abs(g)))
        entry = {"iter": it, "sigma_sq": sigma_sq, "xi": xi.tolist(), "grad_norm": gnorm,
                 "loglik": cur, "step": None, "clamped": []}
        trace.append(entry)
        if gnorm < controls.tol:
            converged = True
            message = "gradient tolerance reached"
            break
        info = 0.5 * traces.cross
        try:
            chol = np.linalg.cholesky(info)
            step = np.linalg.solve(chol.T, np.linalg.solve(chol, g))
        except np.linalg.LinAlgError as exc:
            raise SingularInformationError(
                f"information for xi is singular at xi = {xi.tolist()}"
            ) from exc
        lam = controls.step
        accepted = False
        for _ in range(controls.max_halvings + 1):
            cand = xi + lam * step
            bad = ~(cand > 0.0) | ~np.isfinite(cand)
            if np.all(bad):
                lam *= 0.5
                continue
            if np.any(bad):
                cand = np.where(bad, xi, cand)
            cst, cval, csig = _profile(data, cand)
            if cst is not None and cval >= cur - 1e-12 * max(1.0, abs(cur)):
                accepted = True
                if np.any(bad):
                    entry["clamped"] = np.flatnonzero(bad).tolist()
                break
            lam *= 0.5
        if not accepted:
            message = "line search failed"
            break
        entry["step"] = lam
        if np.array_equal(cand, xi):
            message = "step made no progress"
            break
        xi, st, cur, sigma_sq = cand, cst, cval, csig
    res = MleResult(sigma_sq, xi, st.theta_hat, None, it, converged, cur, trace, message)
    try:
        res.info = FisherInfo(_info_matrix(st, sigma_sq, st.w_traces()), st.r)
    except SingularInformationError:
        res.info = None
    return res


def fisher_scoring(data: GpDataset, init=None, controls: ScoringControls | None = None) -> MleResult:
    """Multistart Fisher scoring; returns the best run by likelihood.

    ``init`` is a range vector; when given it is the only start point.
    Converged runs are preferred over non-converged ones.  A start whose
    information matrix turns singular is skipped; if every start does so
    the :class:`SingularInformationError` is raised.
    """
    controls = controls or ScoringControls()
    if init is not None:
        starts = [np.asarray(init, dtype=float)]
    else:
        base = default_xi(data)
        starts = [m * base for m in controls.start_multipliers]
    best = None
    failure = None
    for xi0 in starts:
        try:
            res = _scoring_run(data, xi0, controls)
        except SingularInformationError as exc:
            logger.debug("scoring run from %s stopped: %s", xi0, exc)
            failure = exc
            continue
        logger.debug("scoring run from %s: %s after %d iterations", xi0, res.message, res.iterations)
        key = (res.converged and res.info is not None, res.loglik)
        if best is None or key > best[0]:
            best = (key, res)
    if best is None:
        raise failure
    return best[1]
