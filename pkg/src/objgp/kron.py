"""Kronecker-product linear algebra for separable covariance matrices.

A covariance of the form ``S = S_1 (x) S_2 (x) ... (x) S_r`` is never formed
explicitly.  Vectors of length ``n = prod(n_k)`` are laid out in lexicographic
order with the LAST factor varying fastest, i.e. ``x.reshape(n_1, ..., n_r)``
in C order.  This is the layout for which ``np.kron(A, B) @ x`` agrees with
applying ``B`` along the last axis and ``A`` along the first.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import linalg

logger = logging.getLogger(__name__)

#: Relative diagonal inflations tried, in order, when a Cholesky factorization fails.
JITTER_LADDER = (0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8)
SYMMETRY_TOL = 1e-12
DEFAULT_EXPANSION_CAP = 4096


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a factor stays indefinite after the whole jitter ladder."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class ExpansionCapError(ValueError):
    pass


def cholesky_jitter(a: np.ndarray, index: int | None = None) -> np.ndarray:
    """Lower Cholesky factor of ``a``, inflating the diagonal if needed.

    The diagonal is multiplied by ``1 + jitter`` for each jitter in
    :data:`JITTER_LADDER`.  A warning is logged whenever jitter was used.
    """
    a = np.asarray(a, dtype=float)
    for jitter in JITTER_LADDER:
        if jitter:
            work = a.copy()
            work[np.diag_indices_from(work)] *= 1.0 + jitter
        else:
            work = a
        try:
            chol = linalg.cholesky(work, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            continue
        if not np.all(np.isfinite(chol)):
            break
        if jitter:
            logger.warning(
                "Cholesky of factor %s needed diagonal jitter %.0e", index, jitter
            )
        return chol
    where = "matrix" if index is None else f"factor {index}"
    raise NotPositiveDefiniteError(
        f"{where} is not positive definite (jitter up to {JITTER_LADDER[-1]:g} failed)",
        index=index,
    )


def apply_along_axis(mat: np.ndarray, tensor: np.ndarray, axis: int) -> np.ndarray:
    """Multiply ``mat`` into ``tensor`` along ``axis``."""
    shape = tensor.shape
    before = int(np.prod(shape[:axis], dtype=int))
    out = np.matmul(mat, tensor.reshape(before, shape[axis], -1))
    return out.reshape(shape[:axis] + (mat.shape[0],) + shape[axis + 1:])


def kron_matvec(mats: Sequence[np.ndarray], x: np.ndarray) -> np.ndarray:
    """Compute ``(mats[0] (x) ... (x) mats[-1]) @ x`` without forming the product.

    The matrices may be rectangular; ``x`` must have length ``prod(m.shape[1])``.
    """
    shape = tuple(m.shape[1] for m in mats)
    t = np.asarray(x, dtype=float).reshape(shape)
    for k, m in enumerate(mats):
        t = apply_along_axis(m, t, k)
    return t.reshape(-1)


@dataclass(frozen=True)
class FactorCholesky:
    """Per-factor lower Cholesky factors; their Kronecker product factors the whole."""

    lower_factors: tuple[np.ndarray, ...]

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(f.shape[0] for f in self.lower_factors)

    @property
    def total_dim(self) -> int:
        return int(np.prod(self.dims))

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.total_dim,):
            raise ValueError(
                f"vector has shape {x.shape}, expected ({self.total_dim},)"
            )
        return x.reshape(self.dims)

    @cached_property
    def inverse_lower_factors(self) -> tuple[np.ndarray, ...]:
        return tuple(
            linalg.solve_triangular(c, np.eye(c.shape[0]), lower=True, check_finite=False)
            for c in self.lower_factors
        )

    def half_solve(self, x: np.ndarray) -> np.ndarray:
        """Return ``L^{-1} x`` with ``L`` the Kronecker product of the lower factors."""
        t = self._check(x)
        for k, inv in enumerate(self.inverse_lower_factors):
            t = apply_along_axis(inv, t, k)
        return t.reshape(-1)

    def solve(self, x: np.ndarray) -> np.ndarray:
        t = self._check(x)
        for k, inv in enumerate(self.inverse_lower_factors):
            t = apply_along_axis(inv.T @ inv, t, k)
        return t.reshape(-1)

    def lower_matvec(self, z: np.ndarray) -> np.ndarray:
        """Return ``L z``; used to draw correlated Gaussian vectors."""
        return kron_matvec(self.lower_factors, z)

    def logdet(self) -> float:
        n = self.total_dim
        total = 0.0
        for chol in self.lower_factors:
            nk = chol.shape[0]
            total += (n // nk) * 2.0 * np.sum(np.log(np.diag(chol)))
        return float(total)


@dataclass(frozen=True)
class KroneckerFactors:
    """Ordered square symmetric factors of a Kronecker-product matrix."""

    factors: tuple[np.ndarray, ...]

    def __post_init__(self):
        facs = tuple(np.asarray(f, dtype=float) for f in self.factors)
        if not facs:
            raise ValueError("at least one factor is required")
        for k, f in enumerate(facs):
            if f.ndim != 2 or f.shape[0] != f.shape[1]:
                raise ValueError(f"factor {k} is not square: shape {f.shape}")
            asym = np.max(np.abs(f - f.T)) if f.size else 0.0
            if asym > SYMMETRY_TOL:
                raise ValueError(f"factor {k} is not symmetric (max asymmetry {asym:.3g})")
        object.__setattr__(self, "factors", facs)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(f.shape[0] for f in self.factors)

    @property
    def total_dim(self) -> int:
        return int(np.prod(self.dims))

    @cached_property
    def cholesky(self) -> FactorCholesky:
        return FactorCholesky(
            tuple(cholesky_jitter(f, index=k) for k, f in enumerate(self.factors))
        )


def kron_expand(kf: KroneckerFactors, cap: int = DEFAULT_EXPANSION_CAP) -> np.ndarray:
    """Dense Kronecker product; a testing oracle, refused above ``cap``."""
    if kf.total_dim > cap:
        raise ExpansionCapError(
            f"dense expansion of dimension {kf.total_dim} exceeds the cap {cap}"
        )
    out = np.ones((1, 1))
    for f in kf.factors:
        out = np.kron(out, f)
    return out


def kron_logdet(kf: KroneckerFactors) -> float:
    return kf.cholesky.logdet()


def kron_solve(kf: KroneckerFactors, rhs: np.ndarray) -> np.ndarray:
    return kf.cholesky.solve(rhs)


def kron_quadratic_form(kf: KroneckerFactors, x: np.ndarray) -> float:
    """``x' S^{-1} x`` as the squared norm of the triangular-solve image."""
    z = kf.cholesky.half_solve(x)
    return float(z @ z)


def kron_trace(kf: KroneckerFactors) -> float:
    return float(np.prod([np.trace(f) for f in kf.factors]))


def rank_one_update_inverse(a: np.ndarray) -> np.ndarray:
    """Inverse of ``a + 1 1'`` by the Sherman-Morrison formula."""
    a = np.asarray(a, dtype=float)
    ainv = np.linalg.inv(a)
    u = ainv.sum(axis=1)
    w = ainv.sum(axis=0)
    s = u.sum()
    denom = 1.0 + s
    if abs(denom) <= 1e-12 * max(1.0, abs(s)):
        raise np.linalg.LinAlgError("a + 11' is singular: 1'a^{-1}1 = -1")
    return ainv - np.outer(u, w) / denom
