import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from objgp.kron import (
    ExpansionCapError, KroneckerFactors, NotPositiveDefiniteError, cholesky_jitter, kron_expand,
    kron_logdet, kron_matvec, kron_quadratic_form, kron_solve, kron_trace,
    rank_one_update_inverse,
)


def random_pd(rng, m):
    a = rng.standard_normal((m, m))
    return a @ a.T + m * np.eye(m)


def random_factors(rng, dims):
    return KroneckerFactors(tuple(random_pd(rng, m) for m in dims))


def test_expand_matches_numpy_kron(rng):
    kf = random_factors(rng, (2, 3))
    np.testing.assert_array_equal(kron_expand(kf), np.kron(kf.factors[0], kf.factors[1]))


def test_layout_last_factor_fastest(rng):
    a, b = rng.standard_normal((2, 2)), rng.standard_normal((3, 3))
    x = rng.standard_normal(6)
    np.testing.assert_allclose(kron_matvec([a, b], x), np.kron(a, b) @ x, rtol=1e-12)


def test_matvec_rectangular(rng):
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((1, 4))
    x = rng.standard_normal(12)
    np.testing.assert_allclose(kron_matvec([a, b], x), np.kron(a, b) @ x, rtol=1e-12)


def test_logdet_two_by_two_example():
    kf = KroneckerFactors((np.array([[2.0, 0.0], [0.0, 3.0]]), np.eye(2)))
    assert kron_logdet(kf) == pytest.approx(2 * np.log(6.0), rel=1e-12)


def test_logdet_identity_is_zero():
    kf = KroneckerFactors((np.eye(3), np.eye(4)))
    assert kron_logdet(kf) == 0.0


def test_solve_identity_returns_rhs(rng):
    kf = KroneckerFactors((np.eye(3), np.eye(2)))
    b = rng.standard_normal(6)
    np.testing.assert_allclose(kron_solve(kf, b), b, rtol=1e-14)


def test_trace_is_product_of_traces(rng):
    kf = random_factors(rng, (2, 3, 2))
    assert kron_trace(kf) == pytest.approx(np.trace(kron_expand(kf)), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(
    dims=st.lists(st.integers(1, 5), min_size=1, max_size=3),
    seed=st.integers(0, 2**31 - 1),
)
def test_dense_oracle_agreement(dims, seed):
    rng = np.random.default_rng(seed)
    kf = random_factors(rng, dims)
    dense = kron_expand(kf)
    b = rng.standard_normal(kf.total_dim)
    assert kron_logdet(kf) == pytest.approx(np.linalg.slogdet(dense)[1], rel=1e-8, abs=1e-10)
    x = kron_solve(kf, b)
    np.testing.assert_allclose(x, np.linalg.solve(dense, b), rtol=1e-8, atol=1e-12)
    assert kron_quadratic_form(kf, b) == pytest.approx(b @ np.linalg.solve(dense, b), rel=1e-8)
    assert kron_trace(kf) == pytest.approx(np.trace(dense), rel=1e-8)
    # solving then multiplying back recovers the right-hand side
    np.testing.assert_allclose(kron_matvec(kf.factors, x), b, rtol=1e-8, atol=1e-10)


def test_quadratic_form_is_nonnegative(rng):
    kf = random_factors(rng, (3, 2))
    for _ in range(20):
        assert kron_quadratic_form(kf, rng.standard_normal(6)) >= 0.0


def test_rejects_non_square():
    with pytest.raises(ValueError, match="not square"):
        KroneckerFactors((np.ones((2, 3)),))


def test_rejects_asymmetric():
    a = np.array([[1.0, 0.1], [0.0, 1.0]])
    with pytest.raises(ValueError, match="symmetric"):
        KroneckerFactors((a,))


def test_rejects_wrong_rhs_length(rng):
    kf = random_factors(rng, (2, 2))
    with pytest.raises(ValueError, match="shape"):
        kron_solve(kf, np.ones(3))


def test_indefinite_factor_reports_index():
    bad = np.array([[1.0, 2.0], [2.0, 1.0]])
    kf = KroneckerFactors((np.eye(2), bad))
    with pytest.raises(NotPositiveDefiniteError) as info:
        kron_logdet(kf)
    assert info.value.index == 1


def test_jitter_rescues_semidefinite_with_warning(caplog):
    # 11' is singular; a 1e-12 relative bump makes it barely PD
    a = np.ones((2, 2))
    with caplog.at_level(logging.WARNING, logger="objgp.kron"):
        chol = cholesky_jitter(a, index=0)
    assert np.all(np.isfinite(chol))
    assert any("jitter" in r.message for r in caplog.records)


def test_jitter_not_used_for_pd(caplog, rng):
    with caplog.at_level(logging.WARNING, logger="objgp.kron"):
        cholesky_jitter(random_pd(rng, 4))
    assert not caplog.records


def test_expansion_cap():
    kf = KroneckerFactors((np.eye(3), np.eye(3)))
    with pytest.raises(ExpansionCapError):
        kron_expand(kf, cap=8)


def test_rank_one_update_inverse(rng):
    a = random_pd(rng, 4)
    expected = np.linalg.inv(a + np.ones((4, 4)))
    np.testing.assert_allclose(rank_one_update_inverse(a), expected, rtol=1e-10)


def test_rank_one_update_singular():
    a = -np.eye(1)
    with pytest.raises(np.linalg.LinAlgError):
        rank_one_update_inverse(a)
