import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proxmed.adviv import adviv_fit, default_penalty


def tsls_oracle(Z, X, y):
    """Textbook 2SLS from raw products: (X'Pz X)^+ X'Pz y with Pz = Z (Z'Z)^+ Z'."""
    ZX = Z.T @ X
    ZZi = np.linalg.pinv(Z.T @ Z)
    return np.linalg.pinv(ZX.T @ ZZi @ ZX) @ (ZX.T @ ZZi @ (Z.T @ y))


def instance(seed, n=200, q=4, p=2):
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((n, q))
    u = rng.standard_normal(n)
    X = Z @ rng.standard_normal((q, p)) + u[:, None] + 0.3 * rng.standard_normal((n, p))
    y = X @ rng.standard_normal(p) + u + rng.standard_normal(n)
    return Z, X, y


def test_exogenous_collapses_to_ols():
    X = np.random.default_rng(0).standard_normal((50, 1))
    fit = adviv_fit(X, X, 2 * X[:, 0], alpha=0)
    assert fit.coef[0] == pytest.approx(2.0, abs=1e-8)


def test_large_penalty_shrinks_to_zero():
    Z, X, y = instance(1)
    assert np.max(np.abs(adviv_fit(Z, X, y, alpha=1e12).coef)) < 1e-8


@pytest.mark.parametrize("seed", range(5))
def test_matches_tsls_oracle(seed):
    Z, X, y = instance(seed)
    np.testing.assert_allclose(adviv_fit(Z, X, y, alpha=0).coef, tsls_oracle(Z, X, y),
                               atol=1e-8)


def test_moment_identity_at_solution():
    # E_n[Q (y - X coef)] - (alpha / n) coef = 0 with Q the first-stage projection
    Z, X, y = instance(7)
    fit = adviv_fit(Z, X, y, alpha=30.0)
    Q = fit.project(Z)
    g = Q.T @ (y - X @ fit.coef) / len(y) - (fit.alpha / fit.n) * fit.coef
    assert np.max(np.abs(g)) < 1e-10


def test_default_penalty():
    assert default_penalty(1000) == pytest.approx(1000 ** 0.3)
    fit = adviv_fit(*instance(0))
    assert fit.alpha == pytest.approx(200 ** 0.3)


def test_errors():
    Z, X, y = instance(0)
    with pytest.raises(ValueError):
        adviv_fit(Z[:-1], X, y)
    with pytest.raises(ValueError):
        adviv_fit(Z, X, y, alpha=-1)
    bad = y.copy()
    bad[0] = np.nan
    with pytest.raises(ValueError):
        adviv_fit(Z, X, bad)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.1, 100))
def test_penalty_shrinks_norm(seed, alpha):
    Z, X, y = instance(seed, n=60)
    lo = np.linalg.norm(adviv_fit(Z, X, y, alpha=alpha).coef)
    hi = np.linalg.norm(adviv_fit(Z, X, y, alpha=alpha * 10).coef)
    assert hi <= lo + 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(-5, 5).filter(lambda c: abs(c) > 1e-3))
def test_scale_equivariant_in_outcome(seed, c):
    Z, X, y = instance(seed, n=60)
    a = adviv_fit(Z, X, y, alpha=1.0).coef
    b = adviv_fit(Z, X, c * y, alpha=1.0).coef
    np.testing.assert_allclose(b, c * a, rtol=1e-9, atol=1e-12)
