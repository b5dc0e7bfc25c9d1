"""Greedy search for proxy subsets that satisfy both moment equations."""
import warnings
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import dual_violation_test, primal_violation_test, rank_threshold
from .estimator import final_estimate, fit_nuisances
from .numerics import RTOL, low_rank_approx, sparse_threshold


@dataclass(frozen=True)
class ProxyCandidate:
    x_indices: tuple
    z_indices: tuple
    approx_primal: float
    approx_dual: float
    primal_passed: bool
    dual_passed: bool
    x_labels: tuple = ()
    z_labels: tuple = ()
    primal_statistic: float = float("nan")
    dual_statistic: float = float("nan")

    @property
    def full_test_passed(self):
        return self.primal_passed and self.dual_passed

    def to_dict(self):
        return {"x_indices": list(self.x_indices), "z_indices": list(self.z_indices),
                "x_labels": list(self.x_labels), "z_labels": list(self.z_labels),
                "approx_primal": self.approx_primal, "approx_dual": self.approx_dual,
                "primal_passed": self.primal_passed, "dual_passed": self.dual_passed,
                "primal_statistic": self.primal_statistic,
                "dual_statistic": self.dual_statistic}


def _projection_residual(S, v):
    if S.size == 0 or not np.any(S):
        return v
    U, s, _ = np.linalg.svd(S, full_matrices=False)
    U = U[:, s > RTOL * s[0]]
    return v - U @ (U.T @ v)


def approx_score(sigma, v, rows, cols, tau, c_sparse, v_se=None):
    """Infinity norm of the part of v_rows outside the column space of sigma[rows, cols].

    ``sigma`` is low-rank truncated at ``tau`` and ``v`` sparsified at
    ``c_sparse`` standard errors before the submatrix is taken.
    """
    rows = np.asarray(rows, dtype=int)
    cols = np.asarray(cols, dtype=int)
    if rows.size == 0 or cols.size == 0:
        raise ValueError("approx_score needs non-empty row and column sets")
    sig = low_rank_approx(sigma, tau)
    se = np.zeros_like(np.asarray(v, float)) if v_se is None else v_se
    vh = sparse_threshold(v, se, c_sparse)
    r = _projection_residual(sig[np.ix_(rows, cols)], vh[rows])
    return float(np.max(np.abs(r)))


class _Scorer:
    """Cached truncated covariance and sparsified vector for repeated scoring."""

    def __init__(self, A, B, y, tau, c_sparse):
        n = A.shape[0]
        self.sigma = low_rank_approx(A.T @ B / n, tau)
        prods = A * y[:, None]
        self.se = prods.std(axis=0) / np.sqrt(n)
        self.v = sparse_threshold(prods.mean(axis=0), self.se, c_sparse)
        self.floor = c_sparse * float(np.max(self.se))

    def sub(self, rows, cols):
        return self.sigma[np.ix_(rows, cols)]

    def score(self, rows, cols):
        return float(np.max(np.abs(_projection_residual(self.sub(rows, cols), self.v[rows]))))

    def rank(self, rows, cols):
        s = np.linalg.svd(self.sub(rows, cols), compute_uv=False)
        return int(np.sum(s > RTOL * s[0])) if s.size and s[0] > 0 else 0


@dataclass
class SelectionConfig:
    K: int = 150
    delta: float = 0.1
    iterations: int = 2
    c_sparse: float = 2.0
    alpha_sig: float = 0.05
    alpha: float = None
    n_mc: int = 10_000
    noise_floor: bool = True
    standardize: bool = True
    require_overidentification: bool = True
    seed: int = 0


@dataclass
class SelectionTrace:
    baseline_primal: float = 0.0
    baseline_dual: float = 0.0
    threshold_primal: float = 0.0
    threshold_dual: float = 0.0
    paths: list = field(default_factory=list)


def _unit(m):
    sd = m.std(axis=0)
    return m / np.where(sd > 0, sd, 1.0)


def _grow(rng, pool, accept):
    chosen = []
    for j in rng.permutation(pool):
        trial = sorted(chosen + [int(j)])
        if accept(trial):
            chosen = trial
    return tuple(chosen)


def select_proxies(res, K=150, delta=0.1, iterations=2, seed=0, config=None, trace=None):
    """Randomized greedy growth of X sets against the dual score, then Z sets
    against the primal score; every pair is confirmed with both full tests.

    Scores are computed on unit-variance residuals (solvability of both
    moment equations does not depend on column scale) and accepted while
    below ``delta`` times the full-set score. With
    ``noise_floor`` the bar never drops below the sparsity threshold, so an
    already-clean full set does not stop growth at trivially exact subsets.
    With ``require_overidentification`` a subset is only confirmed when it
    has more moments than the rank of its covariance block; otherwise the
    chi-square test has nothing to reject.
    """
    cfg = config or SelectionConfig(K=K, delta=delta, iterations=iterations, seed=seed)
    pz, px = res.Z.shape[1], res.X.shape[1]
    if pz == 0 or px == 0:
        raise ValueError("proxy selection needs p_X, p_Z >= 1")
    rng = np.random.default_rng(cfg.seed)

    Zs, Xs, Ds, Ys = res.Z, res.X, res.D, res.Y
    if cfg.standardize:
        Zs, Xs, Ds, Ys = (_unit(m) for m in (Zs, Xs, Ds, Ys))
    A = np.column_stack([Zs, Ds])
    B = np.column_stack([Xs, Ds])
    tau_p, _ = rank_threshold(A, B, cfg.alpha_sig, cfg.n_mc, cfg.seed)
    tau_d, _ = rank_threshold(Xs, Zs, cfg.alpha_sig, cfg.n_mc, cfg.seed)
    primal = _Scorer(A, B, Ys, tau_p, cfg.c_sparse)
    dual = _Scorer(Xs, Zs, Ds, tau_d, cfg.c_sparse)
    all_x, all_z = list(range(px)), list(range(pz))

    def prow(z):
        return list(z) + [pz]

    def pcol(x):
        return list(x) + [px]

    base_p = primal.score(prow(all_z), pcol(all_x))
    base_d = dual.score(all_x, all_z)
    thr_p = cfg.delta * base_p
    thr_d = cfg.delta * base_d
    if cfg.noise_floor:
        thr_p = max(thr_p, primal.floor)
        thr_d = max(thr_d, dual.floor)
    if trace is not None:
        trace.baseline_primal, trace.baseline_dual = base_p, base_d
        trace.threshold_primal, trace.threshold_dual = thr_p, thr_d

    cache = {}

    def full(kind, x, z):
        key = (kind, x, z)
        if key not in cache:
            sub = res.select(list(x), list(z))
            test = primal_violation_test if kind == "primal" else dual_violation_test
            try:
                cache[key] = test(sub, cfg.alpha, cfg.alpha_sig, cfg.seed)
            except ValueError:
                cache[key] = None
        return cache[key]

    def passes(kind, x, z):
        r = full(kind, x, z)
        return r is not None and r.passed

    def dual_ok(x, z):
        if not x or not z:
            return False
        if cfg.require_overidentification and len(x) <= dual.rank(list(x), list(z)):
            return False
        return passes("dual", x, z)

    def primal_ok(x, z):
        if not x or not z:
            return False
        rows, cols = prow(z), pcol(x)
        if cfg.require_overidentification and len(rows) <= primal.rank(rows, cols):
            return False
        return passes("primal", x, z)

    found = {}
    z_sets = [tuple(all_z)]
    for _ in range(max(1, cfg.iterations)):
        x_sets = []
        for z in dict.fromkeys(z_sets):
            for _ in range(cfg.K):
                x = _grow(rng, px, lambda s, z=z: dual.score(s, list(z)) < thr_d)
                if trace is not None:
                    trace.paths.append(("x", z, x))
                if dual_ok(x, z):
                    x_sets.append(x)
        new_z = []
        for x in dict.fromkeys(x_sets):
            for _ in range(cfg.K):
                z = _grow(rng, pz, lambda s, x=x: primal.score(prow(s), pcol(x)) < thr_p)
                if trace is not None:
                    trace.paths.append(("z", x, z))
                if primal_ok(x, z) and dual_ok(x, z) and (x, z) not in found:
                    found[(x, z)] = ProxyCandidate(
                        x, z, primal.score(prow(z), pcol(x)), dual.score(list(x), list(z)),
                        True, True,
                        tuple(res.x_labels[i] for i in x) if res.x_labels else (),
                        tuple(res.z_labels[i] for i in z) if res.z_labels else (),
                        full("primal", x, z).statistic, full("dual", x, z).statistic)
                    new_z.append(z)
        if not new_z:
            break
        z_sets = new_z
    return sorted(found.values(), key=lambda c: (c.x_indices, c.z_indices))


def choose_candidate(candidates, res, alpha=None, alpha_level=0.05):
    """Candidate whose estimate is the (lower) median; returns (candidate, estimate)."""
    if not candidates:
        raise ValueError("no candidates to choose from")
    estimates = []
    for c in candidates:
        sub = res.select(list(c.x_indices), list(c.z_indices))
        nu = fit_nuisances(sub, alpha)
        estimates.append(final_estimate(sub, nu.h, nu.gamma, alpha_level))
    order = sorted(range(len(candidates)), key=lambda i: (estimates[i].theta, i))
    pick = order[(len(order) - 1) // 2]
    return candidates[pick], estimates[pick]


def warn_shared_data():
    warnings.warn("proxy selection and estimation use the same rows; "
                  "selected subsets may overfit the diagnostics", UserWarning, stacklevel=2)
