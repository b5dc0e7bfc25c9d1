"""Penalized regression primitives and residualization on the confounders."""
import warnings
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy.optimize import linprog

TOL = 1e-7
MAX_SWEEPS = 10_000
PROB_CLIP = 1e-6


class LassoConvergenceWarning(UserWarning):
    pass


class SeparationError(ValueError):
    pass


@dataclass(frozen=True)
class LinearModel:
    coef: np.ndarray
    intercept: float
    penalty: float
    n_sweeps: int = 0
    converged: bool = True

    def predict(self, features):
        features = np.asarray(features, dtype=float)
        if self.coef.size == 0:
            return np.full(features.shape[0], self.intercept)
        return features @ self.coef + self.intercept


@dataclass(frozen=True)
class LogisticModel(LinearModel):
    def decision_function(self, features):
        return LinearModel.predict(self, features)

    def predict_proba(self, features):
        p = _sigmoid(self.decision_function(features))
        return np.clip(p, PROB_CLIP, 1 - PROB_CLIP)

    def predict(self, features):
        return self.predict_proba(features)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("inputs contain non-finite values")


def lasso_objective(features, target, coef, intercept, lam):
    r = np.asarray(target, float) - np.asarray(features, float) @ coef - intercept
    return float(np.mean(r * r) + lam * np.sum(np.abs(coef)))


def _soft(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def _cd_gram(G, C, lam, B, tol=TOL, max_sweeps=MAX_SWEEPS):
    """Cyclic coordinate descent on the covariance form of the lasso.

    Minimizes b' G b - 2 c' b + lam |b|_1 column by column of C, all columns
    updated together. ``lam`` broadcasts over columns. Returns (B, sweeps, max_update).
    """
    p = G.shape[0]
    diag = np.diag(G)
    half = 0.5 * np.asarray(lam, dtype=float)
    delta = np.inf
    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        delta = 0.0
        for j in range(p):
            if diag[j] <= 0:
                continue
            old = B[j].copy()
            rho = C[j] - G[j] @ B + diag[j] * old
            B[j] = _soft(rho, half) / diag[j]
            step = np.max(np.abs(B[j] - old))
            if step > delta:
                delta = step
        if delta < tol:
            break
    return B, sweeps, delta


def _center(features, targets):
    xm = features.mean(axis=0)
    ym = targets.mean(axis=0)
    return features - xm, targets - ym, xm, ym


def _duality_gap(Xc, yc, beta, lam):
    n = Xc.shape[0]
    r = yc - Xc @ beta
    primal = r @ r / n + lam * np.abs(beta).sum()
    grad = 2 * Xc.T @ r / n
    scale = min(1.0, lam / np.max(np.abs(grad))) if np.any(grad) and lam > 0 else 1.0
    u = scale * r
    dual = (2 * u @ yc - u @ u) / n
    return float(primal - dual)


def fit_lasso(features, target, lam, tol=TOL, max_sweeps=MAX_SWEEPS):
    """L1-penalized least squares with an unpenalized intercept.

    Minimizes (1/n) sum (y - x b - b0)^2 + lam * |b|_1 by cyclic coordinate
    descent; stops when the largest coefficient update in a sweep is below
    ``tol``.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(target, dtype=float).ravel()
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != y.shape[0] or y.shape[0] < 1:
        raise ValueError("features and target must have the same number of rows (>= 1)")
    if lam < 0:
        raise ValueError("lam must be non-negative")
    _check_finite(X, y)
    n, p = X.shape
    Xc, yc, xm, ym = _center(X, y)
    if p == 0:
        return LinearModel(np.zeros(0), float(ym), float(lam))
    G = Xc.T @ Xc / n
    C = (Xc.T @ yc / n)[:, None]
    B, sweeps, delta = _cd_gram(G, C, lam, np.zeros((p, 1)), tol, max_sweeps)
    beta = B[:, 0]
    converged = delta < tol
    if not converged:
        gap = _duality_gap(Xc, yc, beta, lam)
        warnings.warn(f"lasso did not converge in {sweeps} sweeps; "
                      f"last update {delta:.3g}, duality gap {gap:.3g}",
                      LassoConvergenceWarning, stacklevel=2)
    return LinearModel(beta, float(ym - xm @ beta), float(lam), sweeps, converged)


def lambda_max(features, target):
    """Smallest penalty at which every lasso coefficient is zero."""
    X = np.asarray(features, dtype=float)
    y = np.asarray(target, dtype=float)
    Xc, yc, _, _ = _center(X, y)
    if X.shape[1] == 0:
        return 0.0 if y.ndim == 1 else np.zeros(y.shape[1])
    return 2 * np.max(np.abs(Xc.T @ yc), axis=0) / X.shape[0]


def default_grid(features, target, size=20, ratio=1e-4):
    """Log-spaced penalties from lambda_max down to lambda_max * ratio."""
    top = float(lambda_max(features, target))
    if top <= 0:
        return np.zeros(1)
    return np.geomspace(top, top * ratio, size)


def _fold_ids(n, n_splits, seed):
    rng = np.random.default_rng(seed)
    ids = np.empty(n, dtype=int)
    ids[rng.permutation(n)] = np.arange(n) % n_splits
    return ids


def _path_cv_errors(X, Y, grids, folds, n_splits):
    """Held-out MSE for every (grid position, target), averaged over folds.

    ``grids`` is (k, T) with each column sorted in descending order.
    """
    k, T = grids.shape
    err = np.zeros((k, T))
    for f in range(n_splits):
        tr, te = folds != f, folds == f
        Xc, Yc, xm, ym = _center(X[tr], Y[tr])
        ntr = Xc.shape[0]
        G = Xc.T @ Xc / ntr
        C = Xc.T @ Yc / ntr
        B = np.zeros((X.shape[1], T))
        for i in range(k):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", LassoConvergenceWarning)
                B, _, _ = _cd_gram(G, C, grids[i], B)
            pred = X[te] @ B + (ym - xm @ B)
            err[i] += np.mean((Y[te] - pred) ** 2, axis=0)
    return err / n_splits


def _argmin_prefer_first(err):
    # grids run from large to small, so the first near-minimum is the largest penalty
    best = np.min(err, axis=0)
    near = err <= best + 1e-12 * np.maximum(np.abs(best), 1e-300)
    return np.argmax(near, axis=0)


def select_penalty_semi_crossfit(features, target, grid=None, n_splits=3, seed=0):
    """Pick the grid penalty with the lowest average held-out squared error.

    Ties go to the larger penalty. The caller refits on all rows at the
    returned value.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(target, dtype=float).ravel()
    if X.ndim == 1:
        X = X[:, None]
    if grid is None:
        grid = default_grid(X, y)
    grid = np.asarray(grid, dtype=float).ravel()
    if grid.size == 0:
        raise ValueError("penalty grid is empty")
    if X.shape[0] < n_splits:
        raise ValueError(f"need at least n_splits={n_splits} rows")
    _check_finite(X, y)
    if grid.size == 1:
        return float(grid[0])
    order = np.argsort(-grid, kind="stable")
    folds = _fold_ids(X.shape[0], n_splits, seed)
    err = _path_cv_errors(X, y[:, None], grid[order][:, None], folds, n_splits)
    return float(grid[order][_argmin_prefer_first(err)[0]])


def _sigmoid(t):
    return 0.5 * (1 + np.tanh(0.5 * t))


def _separable(X, y):
    """True when some hyperplane puts every row strictly on its own side."""
    s = 2 * y - 1
    A = -(s[:, None] * np.column_stack([X, np.ones(len(y))]))
    res = linprog(np.zeros(A.shape[1]), A_ub=A, b_ub=-np.ones(len(y)),
                  bounds=[(None, None)] * A.shape[1], method="highs")
    return res.status == 0


def logistic_loss(features, target, coef, intercept, l2=0.0):
    t = np.asarray(features, float) @ coef + intercept
    y = np.asarray(target, float)
    nll = np.mean(np.logaddexp(0, t) - y * t)
    return float(nll + 0.5 * l2 * coef @ coef)


def fit_logistic(features, target, l2=0.0, max_iter=100, tol=1e-10):
    """L2-penalized logistic regression by damped Newton steps.

    Minimizes the mean negative log-likelihood plus (l2 / 2) |b|^2; the
    intercept is not penalized.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(target, dtype=float).ravel()
    if X.ndim == 1:
        X = X[:, None]
    _check_finite(X, y)
    if X.shape[0] != y.shape[0]:
        raise ValueError("features and target must have the same number of rows")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("target must be binary 0/1")
    if l2 < 0:
        raise ValueError("l2 must be non-negative")
    n, p = X.shape
    sep_msg = "perfect separation: the unpenalized fit diverges; use l2 > 0"
    if l2 == 0 and (y.min() == y.max() or _separable(X, y)):
        raise SeparationError(sep_msg)

    A = np.column_stack([X, np.ones(n)])
    pen = np.full(p + 1, l2)
    pen[-1] = 0.0
    w = np.zeros(p + 1)
    w[-1] = np.log((y.mean() + 1e-12) / (1 - y.mean() + 1e-12))

    def loss(v):
        t = A @ v
        return np.mean(np.logaddexp(0, t) - y * t) + 0.5 * np.sum(pen * v * v)

    cur = loss(w)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = _sigmoid(A @ w)
        grad = A.T @ (mu - y) / n + pen * w
        H = (A * (mu * (1 - mu))[:, None]).T @ A / n + np.diag(pen)
        step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while t > 1e-10:
            cand = w - t * step
            new = loss(cand)
            if new <= cur:
                break
            t *= 0.5
        w, prev, cur = cand, cur, new
        if np.max(np.abs(t * step)) < tol or prev - cur < tol * tol:
            converged = True
            break
    if not converged and l2 == 0:
        raise SeparationError(sep_msg)
    return LogisticModel(w[:-1].copy(), float(w[-1]), float(l2), it, converged)


class Residualizer(Protocol):
    def fit(self, W, v): ...

    def predict(self, W): ...


class LassoResidualizer:
    """Lasso on W with the penalty chosen by semi-cross-fitting."""

    def __init__(self, grid=None, n_splits=3, seed=0):
        self.grid = grid
        self.n_splits = n_splits
        self.seed = seed
        self.model_ = None

    def fit(self, W, v):
        lam = select_penalty_semi_crossfit(W, v, self.grid, self.n_splits, self.seed)
        self.model_ = fit_lasso(W, v, lam)
        return self

    def predict(self, W):
        return self.model_.predict(W)


@dataclass
class ResidualizedData:
    D: np.ndarray
    Z: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    z_labels: list = field(default_factory=list)
    x_labels: list = field(default_factory=list)
    models: dict = field(default_factory=dict)
    penalties: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.D.shape[0]

    def take(self, rows):
        rows = np.asarray(rows)
        return ResidualizedData(self.D[rows], self.Z[rows], self.X[rows], self.Y[rows],
                                list(self.z_labels), list(self.x_labels),
                                self.models, self.penalties)

    def select(self, x_indices=None, z_indices=None):
        """Restrict to subsets of the proxies (indices into the current columns)."""
        xi = np.arange(self.X.shape[1]) if x_indices is None else np.asarray(x_indices, int)
        zi = np.arange(self.Z.shape[1]) if z_indices is None else np.asarray(z_indices, int)
        return ResidualizedData(self.D, self.Z[:, zi], self.X[:, xi], self.Y,
                                [self.z_labels[i] for i in zi] if self.z_labels else [],
                                [self.x_labels[i] for i in xi] if self.x_labels else [],
                                self.models, self.penalties)


def _targets(data):
    cols = [data.D[:, None], data.Z, data.X, data.Y[:, None]]
    names = (["D"] + [f"Z:{c}" for c in data.z_labels]
             + [f"X:{c}" for c in data.x_labels] + ["Y"])
    return np.column_stack(cols).astype(float), names


def _split_back(R, data):
    pz, px = data.Z.shape[1], data.X.shape[1]
    return R[:, 0], R[:, 1:1 + pz], R[:, 1 + pz:1 + pz + px], R[:, -1]


def lasso_columns(W, T, grid=None, n_splits=3, seed=0):
    """Lasso of every column of T on W, each with its own cross-validated penalty.

    Returns (coefficients p x T, intercepts, chosen penalties, converged).
    """
    W = np.asarray(W, dtype=float)
    T = np.asarray(T, dtype=float)
    n = T.shape[0]
    if n < n_splits:
        raise ValueError(f"need at least n_splits={n_splits} rows")
    if grid is None:
        tops = np.atleast_1d(lambda_max(W, T))
        grids = np.geomspace(1.0, 1e-4, 20)[:, None] * tops[None, :]
    else:
        g = np.sort(np.asarray(grid, dtype=float).ravel())[::-1]
        if g.size == 0:
            raise ValueError("penalty grid is empty")
        grids = np.repeat(g[:, None], T.shape[1], axis=1)
    if grids.shape[0] == 1:
        chosen = grids[0]
    else:
        folds = _fold_ids(n, n_splits, seed)
        err = _path_cv_errors(W, T, grids, folds, n_splits)
        chosen = grids[_argmin_prefer_first(err), np.arange(T.shape[1])]
    Wc, Tc, wm, tm = _center(W, T)
    B, _, delta = _cd_gram(Wc.T @ Wc / n, Wc.T @ Tc / n, chosen,
                           np.zeros((W.shape[1], T.shape[1])))
    return B, tm - wm @ B, chosen, bool(delta < TOL)


def residualize(data, grid=None, n_splits=3, seed=0, residualizer=None):
    """Subtract an estimate of E[V | W] from every column of D, Z, X and Y.

    ``grid`` is either None (a default path per column), or a fixed list of
    penalties shared by all columns. ``residualizer`` may be a factory
    returning any object with fit/predict; the built-in lasso path is used
    otherwise.
    """
    W = np.asarray(data.W, dtype=float)
    T, names = _targets(data)
    _check_finite(W, T)
    models, penalties = {}, {}

    if residualizer is not None:
        R = np.empty_like(T)
        for t, name in enumerate(names):
            est = residualizer().fit(W, T[:, t])
            models[name] = est
            R[:, t] = T[:, t] - est.predict(W)
    elif W.shape[1] == 0:
        R = T - T.mean(axis=0)
        for t, name in enumerate(names):
            models[name] = LinearModel(np.zeros(0), float(T[:, t].mean()), 0.0)
            penalties[name] = 0.0
    else:
        B, intercepts, chosen, ok = lasso_columns(W, T, grid, n_splits, seed)
        if not ok:
            warnings.warn("residualization lasso did not converge",
                          LassoConvergenceWarning, stacklevel=2)
        R = T - (W @ B + intercepts)
        for t, name in enumerate(names):
            models[name] = LinearModel(B[:, t].copy(), float(intercepts[t]),
                                       float(chosen[t]), 0, ok)
            penalties[name] = float(chosen[t])

    D, Z, X, Y = _split_back(R, data)
    return ResidualizedData(D, Z, X, Y, list(data.z_labels), list(data.x_labels),
                            models, penalties)
