"""Semi-synthetic benchmark: a low-rank partially linear SCM fitted to real
covariates, plus replicate metrics and naive OLS baselines."""
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dataset import DesignMatrices, RawDataset, RoleConfig, split_indices
from .diagnostics import rank_threshold
from .regress import fit_logistic, lasso_columns, _fold_ids

PROPENSITY_GRID = (1e-4, 1e-3, 1e-2, 1e-1)


@dataclass
class GeneratorModel:
    propensity: object
    G: np.ndarray
    F: np.ndarray
    sigma: np.ndarray
    f_Z: tuple
    f_X: tuple
    f_Y: tuple
    eps_Z: np.ndarray
    eps_X: np.ndarray
    eps_Y: np.ndarray
    W_pool: np.ndarray
    binary_z: np.ndarray
    template: DesignMatrices
    singular_values: np.ndarray = None
    threshold: float = None

    @property
    def K(self):
        return self.G.shape[1]


@dataclass(frozen=True)
class SynthParams:
    theta: float = 0.5
    a: float = 1.0
    b: float = 1.0
    g: float = 0.0
    sigma_y: float = 1.0
    binarize: bool = True
    n: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")


def _select_propensity_l2(W, D, grid, seed):
    folds = _fold_ids(len(D), 3, seed)
    losses = []
    for l2 in grid:
        total = 0.0
        for f in range(3):
            tr, te = folds != f, folds == f
            m = fit_logistic(W[tr], D[tr], l2)
            p = m.predict_proba(W[te])
            total += -np.mean(D[te] * np.log(p) + (1 - D[te]) * np.log(1 - p))
        losses.append(total / 3)
    return float(grid[int(np.argmin(losses))])


def fit_generator(data, alpha_sig=0.05, seed=0, n_mc=10_000, propensity_grid=PROPENSITY_GRID):
    """Fit the SCM on one half of ``data``; the other half feeds the sampling pools."""
    train_idx, pool_idx = split_indices(data.n, 0.5, seed)
    tr, pool = data.take(train_idx), data.take(pool_idx)
    W = tr.W
    if W.shape[1]:
        l2 = _select_propensity_l2(W, tr.D, tuple(propensity_grid), seed)
        propensity = fit_logistic(W, tr.D, l2)
    else:
        propensity = fit_logistic(np.zeros((tr.n, 0)), tr.D, 0.0)

    def nuisance(T):
        if W.shape[1] == 0:
            return np.zeros((0, T.shape[1])), T.mean(axis=0)
        B, c, _, _ = lasso_columns(W, T, None, 3, seed)
        return B, c

    f_Z, f_X = nuisance(tr.Z), nuisance(tr.X)
    f_Y = nuisance(tr.Y[:, None])
    Zt = tr.Z - (W @ f_Z[0] + f_Z[1])
    Xt = tr.X - (W @ f_X[0] + f_X[1])
    U, s, Vt = np.linalg.svd(Zt.T @ Xt / tr.n, full_matrices=False)
    tau, _ = rank_threshold(Zt, Xt, alpha_sig, n_mc, seed)
    K = int(np.sum(s > tau))
    if K == 0:
        raise ValueError("no significant mediator dimension: "
                         f"largest singular value {s[0]:.3g} <= threshold {tau:.3g}")

    def pool_residual(M, f):
        return M - (pool.W @ f[0] + f[1])

    binary_z = np.array([i for i, lab in enumerate(data.z_labels)
                         if data.column_kinds.get(lab) == "binary"], dtype=int)
    return GeneratorModel(
        propensity=propensity, G=U[:, :K], F=Vt[:K].T, sigma=s[:K],
        f_Z=f_Z, f_X=f_X, f_Y=(f_Y[0][:, 0], float(f_Y[1][0])),
        eps_Z=pool_residual(pool.Z, f_Z), eps_X=pool_residual(pool.X, f_X),
        eps_Y=pool_residual(pool.Y[:, None], f_Y)[:, 0], W_pool=pool.W.copy(),
        binary_z=binary_z, template=data.take(np.arange(0)), singular_values=s,
        threshold=tau)


def sample(model, params=None):
    """Draw one semi-synthetic dataset. Returns (DesignMatrices, hidden M)."""
    p = params or SynthParams()
    rng = np.random.default_rng(p.seed)
    n, K = p.n, model.K
    pool_n = model.W_pool.shape[0]
    W = model.W_pool[rng.integers(0, pool_n, n)]
    D = (rng.random(n) < model.propensity.predict_proba(W)).astype(float)
    M = p.a * D[:, None] + rng.standard_normal((n, K)) * np.sqrt(model.sigma)
    eps_z = model.eps_Z[rng.integers(0, pool_n, n)]
    eps_x = model.eps_X[rng.integers(0, pool_n, n)]
    eps_y = model.eps_Y[rng.integers(0, pool_n, n)]
    Z = M @ model.G.T + W @ model.f_Z[0] + model.f_Z[1] + eps_z
    X = M @ model.F.T + W @ model.f_X[0] + model.f_X[1] + eps_x
    Y = (p.b / K) * M.sum(axis=1) + p.theta * D + p.g * X[:, 0] \
        + W @ model.f_Y[0] + model.f_Y[1] + p.sigma_y * eps_y
    if p.binarize and model.binary_z.size:
        Z[:, model.binary_z] = np.where(Z[:, model.binary_z] > 0, 0.5, -0.5)
    t = model.template
    out = DesignMatrices(W, D, Z, X, Y, list(t.w_labels), list(t.z_labels),
                         list(t.x_labels), t.d_label, t.y_label, dict(t.encoding),
                         dict(t.column_kinds))
    return out, M


def bridge_coefficients(model, params):
    """Minimum-norm outcome bridge h with F' h = (b / K) 1, plus the g X_0 term."""
    K = model.K
    h = np.linalg.pinv(model.F.T) @ np.full(K, params.b / K)
    h[0] += params.g
    return h


@dataclass(frozen=True)
class Metrics:
    n_runs: int
    mean_theta: float
    sd_theta: float
    bias: float
    rmse: float
    coverage: float
    mean_half_width: float
    pass_rates: dict = field(default_factory=dict)


def evaluate(estimates, theta0, diagnostics=None):
    """Replicate summary against the true effect ``theta0``."""
    if not estimates:
        raise ValueError("no replicate estimates to evaluate")
    th = np.array([e.theta for e in estimates])
    lo = np.array([e.ci_low for e in estimates])
    hi = np.array([e.ci_high for e in estimates])
    rates = {}
    if diagnostics:
        names = ("primal", "dual", "f_test", "z_test", "rank")
        for name in names:
            rates[name] = float(np.mean([getattr(d, name).passed for d in diagnostics]))
        rates["valid"] = float(np.mean([d.valid for d in diagnostics]))
    return Metrics(
        n_runs=len(estimates), mean_theta=float(th.mean()),
        sd_theta=float(th.std(ddof=1)) if th.size > 1 else 0.0,
        bias=float(abs(th.mean() - theta0)),
        rmse=float(np.sqrt(np.mean((th - theta0) ** 2))),
        coverage=float(np.mean((lo <= theta0) & (theta0 <= hi))),
        mean_half_width=float(np.mean((hi - lo) / 2)), pass_rates=rates)


def baseline_ols(data, M=None, which="with_M"):
    """Coefficient on D from OLS of Y on (1, D, W, X) plus M or Z."""
    if which == "with_M":
        if M is None:
            raise ValueError("hidden M required for the with_M baseline")
        extra = np.asarray(M, float).reshape(data.n, -1)
    elif which == "with_Z":
        extra = data.Z
    else:
        raise ValueError(f"which must be 'with_M' or 'with_Z', got {which!r}")
    A = np.column_stack([np.ones(data.n), data.D, data.W, data.X, extra])
    coef, _, rank, _ = np.linalg.lstsq(A, data.Y, rcond=None)
    if rank < A.shape[1]:
        warnings.warn("OLS design is rank deficient; using the minimum-norm solution",
                      RuntimeWarning, stacklevel=2)
    return float(coef[1])


# ---------------------------------------------------------------------------
# Fully synthetic structural models for calibration and as a stand-in "real" table.


@dataclass(frozen=True)
class LinearSCM:
    """W -> D -> M -> (Z, X), Y = theta D + b mean(M) + W terms + noise.

    ``z_to_y`` adds a direct Z_0 -> Y edge (primal violation); ``d_to_x``
    adds a direct D -> X_0 edge (dual violation).
    """
    n: int = 5000
    K: int = 1
    p_z: int = 4
    p_x: int = 4
    p_w: int = 3
    theta: float = 0.5
    a: float = 1.0
    b: float = 1.0
    sigma_m: float = 1.0
    loading: float = 1.0
    noise_z: float = 1.0
    noise_x: float = 1.0
    noise_y: float = 1.0
    z_to_y: float = 0.0
    d_to_x: float = 0.0
    w_effect: float = 0.5


def simulate_linear(scm, seed=0):
    """Returns (DesignMatrices, M, truth) where truth holds the loadings."""
    rng = np.random.default_rng(seed)
    n, K = scm.n, scm.K
    W = rng.standard_normal((n, scm.p_w))
    wd = rng.uniform(-scm.w_effect, scm.w_effect, scm.p_w)
    D = (rng.random(n) < 1 / (1 + np.exp(-(W @ wd)))).astype(float)
    G = scm.loading * _loadings(rng, scm.p_z, K)
    F = scm.loading * _loadings(rng, scm.p_x, K)
    M = scm.a * D[:, None] + W @ rng.uniform(-scm.w_effect, scm.w_effect, (scm.p_w, K)) \
        + scm.sigma_m * rng.standard_normal((n, K))
    Z = M @ G.T + W @ rng.uniform(-scm.w_effect, scm.w_effect, (scm.p_w, scm.p_z)) \
        + scm.noise_z * rng.standard_normal((n, scm.p_z))
    X = M @ F.T + W @ rng.uniform(-scm.w_effect, scm.w_effect, (scm.p_w, scm.p_x)) \
        + scm.noise_x * rng.standard_normal((n, scm.p_x))
    X[:, 0] += scm.d_to_x * D
    Y = scm.theta * D + scm.b * M.mean(axis=1) + scm.z_to_y * Z[:, 0] \
        + W @ rng.uniform(-scm.w_effect, scm.w_effect, scm.p_w) \
        + scm.noise_y * rng.standard_normal(n)
    data = DesignMatrices(
        W, D, Z, X, Y, [f"w{i}" for i in range(scm.p_w)], [f"z{i}" for i in range(scm.p_z)],
        [f"x{i}" for i in range(scm.p_x)], "D", "Y",
        column_kinds={f"{p}{i}": "continuous" for p, m in (("w", scm.p_w), ("z", scm.p_z),
                                                          ("x", scm.p_x)) for i in range(m)})
    return data, M, {"G": G, "F": F}


def _loadings(rng, p, K):
    """p x K loadings with magnitudes in [0.5, 1.5] and random signs."""
    return rng.choice([-1.0, 1.0], (p, K)) * rng.uniform(0.5, 1.5, (p, K))


def make_reference_table(n=20_000, seed=0, K=3, theta=0.5):
    """A seeded mixed-type table standing in for real survey data.

    Confounders mix continuous, binary and multi-level categorical columns;
    half of the treatment proxies are binary. Returns (RawDataset, RoleConfig).
    """
    rng = np.random.default_rng(seed)
    age = rng.normal(55, 8, n)
    bmi = rng.normal(27, 4, n)
    smoker = rng.random(n) < 0.2
    income = rng.choice(["low", "mid", "high", "top"], n, p=[0.25, 0.35, 0.3, 0.1])
    region = rng.choice(["north", "south", "east", "west"], n)
    inc_score = np.select([income == "low", income == "mid", income == "high"],
                          [-1.0, -0.2, 0.5], 1.2)
    w_lin = 0.03 * (age - 55) + 0.05 * (bmi - 27) + 0.4 * smoker + 0.3 * inc_score
    sex = rng.random(n) < 1 / (1 + np.exp(-(0.2 + 0.5 * w_lin)))
    D = sex.astype(float)

    loadings_z = rng.normal(0, 1, (8, K))
    loadings_x = rng.normal(0, 1, (6, K))
    M = 0.8 * D[:, None] + 0.4 * w_lin[:, None] + rng.normal(0, 1, (n, K))
    Zc = M @ loadings_z.T + 0.3 * w_lin[:, None] + rng.normal(0, 1, (n, 8))
    Xc = M @ loadings_x.T + 0.3 * w_lin[:, None] + rng.normal(0, 1, (n, 6))
    y_lin = theta * D + M.mean(axis=1) + 0.5 * w_lin + rng.normal(0, 1, n)

    cols, kinds = {}, {}

    def add(name, values, kind):
        cols[name] = values
        kinds[name] = kind

    add("age", age, "continuous")
    add("bmi", bmi, "continuous")
    add("smoker", np.array(["yes" if s else "no" for s in smoker], dtype=object), "binary")
    add("income", income.astype(object), "categorical")
    add("region", region.astype(object), "categorical")
    add("sex", np.array(["male" if s else "female" for s in sex], dtype=object), "binary")
    z_names, x_names = [], []
    for j in range(8):
        name = f"symptom_{j}"
        if j % 2:
            add(name, np.array(["yes" if v > 0 else "no" for v in Zc[:, j]], dtype=object),
                "binary")
        else:
            add(name, Zc[:, j], "continuous")
        z_names.append(name)
    for j in range(6):
        add(f"marker_{j}", Xc[:, j], "continuous")
        x_names.append(f"marker_{j}")
    add("outcome", y_lin, "continuous")
    missing = rng.random(n) < 0.02
    cols["bmi"] = np.where(missing, np.nan, cols["bmi"])
    roles = RoleConfig("sex", "outcome", ("age", "bmi", "smoker", "income", "region"),
                       tuple(z_names), tuple(x_names))
    return RawDataset(cols, kinds), roles
