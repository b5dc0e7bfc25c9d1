"""Validity checks: primal/dual violation tests, weak-identification tests and the
covariance rank test."""
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import stats

from .adviv import adviv_fit, default_penalty
from .dataset import split_indices
from .numerics import (folded_normal_quantile, noncentral_chisq1_quantile, pinv,
                       soft_threshold_projector, sym_power, weighted_chisq_quantile)

COND_LIMIT = 1e12
FULL_COV_LIMIT = 4096


class SingularCovarianceError(ValueError):
    pass


@dataclass(frozen=True)
class TestResult:
    name: str
    statistic: float
    critical_value: float
    passed: bool
    comparison: str
    alpha_sig: float
    params: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class RankResult:
    singular_values: tuple
    threshold: float
    significant_rank: int
    alpha_sig: float
    approximate: bool = False

    name = "covariance_rank"

    @property
    def passed(self):
        return self.significant_rank >= 1

    def to_dict(self):
        d = asdict(self)
        d["singular_values"] = list(self.singular_values)
        d["name"] = self.name
        d["passed"] = self.passed
        return d


@dataclass
class DiagnosticsConfig:
    alpha: float = None
    alpha_sig: float = 0.05
    seed: int = 0
    tau_star: float = 0.1
    z_epsilon: float = None
    weak_variant: str = "orthogonal"
    n_mc: int = 10_000


@dataclass
class DiagnosticsReport:
    primal: TestResult
    dual: TestResult
    f_test: TestResult
    z_test: TestResult
    rank: RankResult

    @property
    def results(self):
        return [self.primal, self.dual, self.f_test, self.z_test, self.rank]

    @property
    def valid(self):
        return all(r.passed for r in self.results)

    def to_dict(self):
        return {"primal": self.primal.to_dict(), "dual": self.dual.to_dict(),
                "f_test": self.f_test.to_dict(), "z_test": self.z_test.to_dict(),
                "rank": self.rank.to_dict(), "valid": self.valid}


def _moment_test(name, A, B, y, alpha, alpha_sig, seed):
    """Held-out chi-square test of E[A (y - B b)] = 0 for the fitted b.

    b is fit on one half; the other half supplies the moment mean. The
    variance adds the train-half estimation noise pushed through a
    soft-thresholded projector.
    """
    n, k = A.shape
    tr, te = split_indices(n, 0.5, seed)
    ntr, nte = tr.size, te.size
    if ntr < 2 or nte < 2:
        raise ValueError(f"{name}: too few rows to split")
    a = default_penalty(ntr) if alpha is None else alpha
    fit = adviv_fit(A[tr], B[tr], y[tr], a)
    r_tr = y[tr] - B[tr] @ fit.coef
    r_te = y[te] - B[te] @ fit.coef

    m_te = A[te] * r_te[:, None]
    mean = m_te.mean(axis=0)
    S = A[tr].T @ A[tr] / ntr
    cross = A[tr].T @ B[tr] / ntr
    root, inv_root = sym_power(S, 0.5), sym_power(S, -0.5)
    P = soft_threshold_projector(inv_root @ cross, ntr)
    J = root @ P @ inv_root
    phi = (A[tr] * r_tr[:, None]) @ J.T

    centered = m_te - mean
    var = centered.T @ centered / nte / nte + phi.T @ phi / ntr / ntr
    cond = np.linalg.cond(var)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularCovarianceError(
            f"{name}: moment covariance is singular (condition number {cond:.3g})")
    stat = float(mean @ np.linalg.solve(var, mean))
    crit = float(stats.chi2.ppf(1 - alpha_sig, k))
    return TestResult(name, stat, crit, stat < crit, "<", alpha_sig,
                      {"dof": int(k), "n_train": int(ntr), "n_test": int(nte),
                       "alpha": float(a)})


def primal_violation_test(res, alpha=None, alpha_sig=0.05, seed=0):
    """Instruments (Z; D), treatments (X; D), outcome Y; chi2 with p_Z + 1 dof."""
    A = np.column_stack([res.Z, res.D])
    B = np.column_stack([res.X, res.D])
    return _moment_test("primal", A, B, res.Y, alpha, alpha_sig, seed)


def dual_violation_test(res, alpha=None, alpha_sig=0.05, seed=0):
    """Instruments X, treatments Z, outcome D; chi2 with p_X dof."""
    return _moment_test("dual", res.X, res.Z, res.D, alpha, alpha_sig, seed)


def _gamma_influence(res, gamma, alpha):
    """Per-row influence of the dual ridge-IV fit, shape (n, p_Z)."""
    n = res.n
    a = default_penalty(n) if alpha is None else alpha
    B = pinv(res.X.T @ res.X / n) @ (res.X.T @ res.Z / n)
    Q = res.X @ B
    inv = pinv(Q.T @ Q / n + (a / n) * np.eye(Q.shape[1]))
    v = res.D - res.Z @ gamma
    return (Q * v[:, None]) @ inv


def _check_variant(variant):
    if variant not in ("heuristic", "orthogonal"):
        raise ValueError(f"variant must be 'heuristic' or 'orthogonal', got {variant!r}")


def weak_iv_f_test(res, gamma, tau_star=0.1, alpha_sig=0.05, variant="orthogonal",
                   alpha=None, gamma_correction=True):
    """First-stage strength of V = D - Z gamma for D, against a Nagar-bias null.

    pi is the slope of D on V; F = pi^2 / var(pi). Passes when F exceeds the
    noncentral chi2(1, 1/tau_star) quantile.
    """
    _check_variant(variant)
    D = res.D
    if not np.var(D) > 0:
        raise ValueError("F-test: residualized attribute has zero variance")
    n = res.n
    V = D - res.Z @ gamma
    vv = np.mean(V * V)
    if not vv > 0:
        raise ValueError("F-test: engineered instrument is identically zero")
    pi0 = np.mean(D * V) / vv
    if variant == "heuristic":
        pi = pi0
        phi = V * (D - pi * V) / vv
        if gamma_correction:
            grad = np.mean(res.Z * (2 * pi * V - D)[:, None], axis=0) / vv
            phi = phi + _gamma_influence(res, gamma, alpha) @ grad
        zeta = None
    else:
        a = default_penalty(n) if alpha is None else alpha
        zeta = adviv_fit(res.Z, res.X, 2 * pi0 * V - D, a).coef
        xz = res.X @ zeta
        pi = np.mean(V * (D + xz)) / vv
        phi = (V * (D - pi * V) + xz * V) / vv
    var = np.mean(phi * phi) / n
    stat = float(pi * pi / var) if var > 0 else float("inf")
    crit = noncentral_chisq1_quantile(1 / tau_star, alpha_sig)
    return TestResult("f_test", stat, crit, stat > crit, ">", alpha_sig,
                      {"tau_star": float(tau_star), "variant": variant, "pi": float(pi),
                       "se_pi": float(np.sqrt(var))})


def weak_iv_z_test(res, gamma, epsilon=None, alpha_sig=0.05, variant="orthogonal",
                   alpha=None):
    """sqrt(n) |E_n[D V]| against a folded normal centered at epsilon."""
    _check_variant(variant)
    n = res.n
    D = res.D
    V = D - res.Z @ gamma
    if epsilon is None:
        epsilon = 0.01 * float(np.mean(D * D))
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    if variant == "heuristic":
        pi = np.mean(D * V)
        grad = -np.mean(res.Z * D[:, None], axis=0)
        phi = D * V - pi + _gamma_influence(res, gamma, alpha) @ grad
    else:
        a = default_penalty(n) if alpha is None else alpha
        zeta = adviv_fit(res.Z, res.X, -D, a).coef
        moment = V * (D + res.X @ zeta)
        pi = np.mean(moment)
        phi = moment - pi
    scale = float(np.sqrt(np.mean(phi * phi)))
    stat = float(np.sqrt(n) * abs(pi))
    if scale > 0:
        crit = folded_normal_quantile(epsilon, scale, alpha_sig)
    else:
        crit = float(epsilon)
    return TestResult("z_test", stat, crit, stat > crit, ">", alpha_sig,
                      {"epsilon": float(epsilon), "scale": scale, "variant": variant,
                       "pi": float(pi)})


def _product_covariance(X, Z, chunk=4096):
    """Covariance of the flattened products X_i Z_j over rows, divided by n."""
    n, px = X.shape
    pz = Z.shape[1]
    p = px * pz
    total = np.zeros(p)
    outer = np.zeros((p, p))
    for s in range(0, n, chunk):
        P = (X[s:s + chunk, :, None] * Z[s:s + chunk, None, :]).reshape(-1, p)
        total += P.sum(axis=0)
        outer += P.T @ P
    mean = total / n
    return (outer / n - np.outer(mean, mean)) / n


def _product_variance(X, Z, chunk=4096):
    n, px = X.shape
    p = px * Z.shape[1]
    s1, s2 = np.zeros(p), np.zeros(p)
    for s in range(0, n, chunk):
        P = (X[s:s + chunk, :, None] * Z[s:s + chunk, None, :]).reshape(-1, p)
        s1 += P.sum(axis=0)
        s2 += (P * P).sum(axis=0)
    mean = s1 / n
    return (s2 / n - mean * mean) / n


def rank_threshold(X, Z, alpha_sig=0.05, n_mc=10_000, seed=0, full_limit=FULL_COV_LIMIT):
    """Noise level for singular values of E_n[X Z'] from its Frobenius error.

    Returns (threshold, approximate) where ``approximate`` marks the
    diagonal shortcut used for very wide products.
    """
    X = np.asarray(X, float).reshape(len(X), -1)
    Z = np.asarray(Z, float).reshape(len(Z), -1)
    if X.shape[1] * Z.shape[1] <= full_limit:
        weights = np.linalg.eigvalsh(_product_covariance(X, Z))
        approximate = False
    else:
        weights = _product_variance(X, Z)
        approximate = True
    weights = np.clip(weights, 0, None)
    return float(np.sqrt(weighted_chisq_quantile(weights, alpha_sig, n_mc, seed))), approximate


def covariance_rank_test(res, alpha_sig=0.05, n_mc=10_000, seed=0):
    n = res.n
    s = np.linalg.svd(res.X.T @ res.Z / n, compute_uv=False)
    tau, approx = rank_threshold(res.X, res.Z, alpha_sig, n_mc, seed)
    return RankResult(tuple(float(x) for x in s), tau, int(np.sum(s > tau)), alpha_sig, approx)


def run_all(res, nuisances, config=None):
    config = config or DiagnosticsConfig()
    if res.Z.shape[1] == 0:
        raise ValueError("treatment proxies required")
    if res.X.shape[1] == 0:
        raise ValueError("outcome proxies required")
    seed = config.seed
    return DiagnosticsReport(
        primal=primal_violation_test(res, config.alpha, config.alpha_sig, seed),
        dual=dual_violation_test(res, config.alpha, config.alpha_sig, seed),
        f_test=weak_iv_f_test(res, nuisances.gamma, config.tau_star, config.alpha_sig,
                              config.weak_variant, config.alpha),
        z_test=weak_iv_z_test(res, nuisances.gamma, config.z_epsilon, config.alpha_sig,
                              config.weak_variant, config.alpha),
        rank=covariance_rank_test(res, config.alpha_sig, config.n_mc, seed),
    )
