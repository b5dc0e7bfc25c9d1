"""Linear algebra and distribution helpers shared by the estimator and the tests."""
from dataclasses import dataclass

import numpy as np
from scipy import stats

# singular values below RTOL * sigma_max are treated as zero
RTOL = 1e-10


@dataclass(frozen=True)
class ThinSVD:
    U: np.ndarray
    singular_values: np.ndarray
    V: np.ndarray

    def rank(self, rtol=RTOL):
        s = self.singular_values
        if s.size == 0 or s[0] == 0:
            return 0
        return int(np.sum(s > rtol * s[0]))


def thin_svd(A):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    return ThinSVD(U, s, Vt.T)


def _cutoff(s, rtol=RTOL):
    return rtol * s[0] if s.size else 0.0


def pinv(A, rtol=RTOL):
    """Moore-Penrose pseudoinverse with a relative singular-value cutoff."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0:
        return np.zeros(A.shape[::-1])
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    keep = s > _cutoff(s, rtol)
    if not np.any(keep):
        return np.zeros(A.shape[::-1])
    return (Vt[keep].T / s[keep]) @ U[:, keep].T


def min_norm_solve(A, b, rtol=RTOL):
    """Minimum-norm least-squares solution of A x = b."""
    return pinv(A, rtol) @ np.asarray(b, dtype=float)


def sym_power(S, power, rtol=RTOL):
    """Power of a symmetric PSD matrix; negative powers act on the retained range only."""
    S = np.asarray(S, dtype=float)
    S = 0.5 * (S + S.T)
    w, Q = np.linalg.eigh(S)
    top = np.max(np.abs(w)) if w.size else 0.0
    keep = w > rtol * top if top > 0 else np.zeros_like(w, dtype=bool)
    out = np.zeros_like(w)
    out[keep] = w[keep] ** power
    return (Q * out) @ Q.T


def soft_threshold_projector(sigma, n, exponent=0.2):
    """Shrunk projector onto the column space of ``sigma``.

    Each left singular direction gets weight s / (s + n**-exponent), so the
    result is symmetric with eigenvalues in [0, 1).
    """
    if n < 2:
        raise ValueError("soft_threshold_projector needs n >= 2")
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    U, s, _ = np.linalg.svd(sigma, full_matrices=False)
    weights = s / (s + float(n) ** (-exponent))
    P = (U * weights) @ U.T
    return 0.5 * (P + P.T)


def low_rank_approx(A, tau):
    """Reconstruction of ``A`` from singular triples with value above ``tau``."""
    if tau < 0:
        raise ValueError("tau must be non-negative")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    keep = s > tau
    return (U[:, keep] * s[keep]) @ Vt[keep]


def sparse_threshold(v, standard_errors, c):
    v = np.asarray(v, dtype=float)
    se = np.asarray(standard_errors, dtype=float)
    if v.shape != se.shape:
        raise ValueError("v and standard_errors must have the same shape")
    return np.where(np.abs(v) > c * se, v, 0.0)


def _check_alpha(alpha):
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


def weighted_chisq_quantile(weights, alpha, n_mc=10_000, seed=0, chunk=None):
    """Monte Carlo (1 - alpha) quantile of sum_i w_i * chi2_1.

    Draws are generated row by row from one seeded stream, so the result does
    not depend on the chunk size and is monotone in every weight.
    """
    _check_alpha(alpha)
    w = np.asarray(weights, dtype=float).ravel()
    if w.size == 0:
        raise ValueError("weights must be non-empty")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if not np.any(w > 0):
        return 0.0
    rng = np.random.default_rng(seed)
    if chunk is None:
        chunk = max(1, min(n_mc, 4_000_000 // w.size))
    draws = np.empty(n_mc)
    for start in range(0, n_mc, chunk):
        m = min(chunk, n_mc - start)
        g = rng.standard_normal((m, w.size))
        draws[start:start + m] = (g * g) @ w
    return float(np.quantile(draws, 1 - alpha))


def noncentral_chisq1_quantile(c, alpha):
    _check_alpha(alpha)
    if c < 0:
        raise ValueError("noncentrality must be non-negative")
    if c == 0:
        return float(stats.chi2.ppf(1 - alpha, 1))
    return float(stats.ncx2.ppf(1 - alpha, 1, c))


def folded_normal_quantile(center, scale, alpha):
    """(1 - alpha) quantile of |N(center, scale^2)|."""
    _check_alpha(alpha)
    if scale <= 0:
        raise ValueError("scale must be positive")
    return float(stats.foldnorm.ppf(1 - alpha, abs(center) / scale, scale=scale))
