"""Primal and dual nuisance fits and the orthogonal final moment."""
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import stats

from .adviv import adviv_fit, default_penalty
from .regress import residualize

DENOM_TOL = 1e-12


class WeakIdentificationError(ValueError):
    pass


class PipelineError(RuntimeError):
    def __init__(self, stage, error):
        self.stage = stage
        self.error = error
        super().__init__(f"[{stage}] {error}")


@dataclass(frozen=True)
class NuisanceEstimates:
    h: np.ndarray
    theta_pre: float
    gamma: np.ndarray
    alpha_primal: float
    alpha_dual: float


@dataclass(frozen=True)
class EffectEstimate:
    theta: float
    se: float
    ci_low: float
    ci_high: float
    alpha_level: float = 0.05

    def covers(self, value):
        return self.ci_low <= value <= self.ci_high

    def to_dict(self):
        return asdict(self)


@dataclass
class EstimatorConfig:
    alpha: float = None
    lasso_grid: list = None
    n_splits: int = 3
    alpha_level: float = 0.05
    crossfit_folds: int = 0
    seed: int = 0


def _check_proxies(res):
    if res.Z.ndim != 2 or res.Z.shape[1] == 0:
        raise ValueError("treatment proxies required")
    if res.X.ndim != 2 or res.X.shape[1] == 0:
        raise ValueError("outcome proxies required")


def solve_primal(res, alpha=None):
    """Instruments (Z; D), treatments (X; D), outcome Y. Returns (h, theta_pre)."""
    _check_proxies(res)
    instruments = np.column_stack([res.Z, res.D])
    treatments = np.column_stack([res.X, res.D])
    fit = adviv_fit(instruments, treatments, res.Y, alpha)
    return fit.coef[:-1].copy(), float(fit.coef[-1])


def solve_dual(res, alpha=None):
    """Instruments X, treatments Z, outcome D."""
    _check_proxies(res)
    return adviv_fit(res.X, res.Z, res.D, alpha).coef.copy()


def fit_nuisances(res, alpha=None):
    n = res.n
    a = default_penalty(n) if alpha is None else float(alpha)
    h, theta_pre = solve_primal(res, a)
    gamma = solve_dual(res, a)
    return NuisanceEstimates(h, theta_pre, gamma, a, a)


def engineered_instrument(res, gamma):
    return res.D - res.Z @ gamma


def adjusted_outcome(res, h):
    return res.Y - res.X @ h


def estimate_from_parts(ybar, d, v, alpha_level=0.05):
    """Solve E_n[(ybar - d theta) v] = 0 and attach a sandwich standard error."""
    n = d.shape[0]
    denom = np.mean(d * v)
    if not abs(denom) >= DENOM_TOL:
        raise WeakIdentificationError(
            f"weakly identified: run weak-IV tests (E_n[D V] = {denom:.3g})")
    theta = float(np.mean(ybar * v) / denom)
    u = (ybar - d * theta) * v
    se = float(np.sqrt(np.mean(u * u)) / abs(denom) / np.sqrt(n))
    z = stats.norm.ppf(1 - alpha_level / 2)
    return EffectEstimate(theta, se, theta - z * se, theta + z * se, alpha_level)


def final_estimate(res, h, gamma, alpha_level=0.05):
    return estimate_from_parts(adjusted_outcome(res, h), res.D,
                               engineered_instrument(res, gamma), alpha_level)


def crossfit_estimate(res, folds, alpha=None, alpha_level=0.05, seed=0):
    """Nuisances fitted out of fold; the final moment pools all rows."""
    n = res.n
    ids = np.empty(n, dtype=int)
    ids[np.random.default_rng(seed).permutation(n)] = np.arange(n) % folds
    ybar, v = np.empty(n), np.empty(n)
    for k in range(folds):
        test = ids == k
        nu = fit_nuisances(res.take(np.flatnonzero(~test)), alpha)
        part = res.take(np.flatnonzero(test))
        ybar[test] = adjusted_outcome(part, nu.h)
        v[test] = engineered_instrument(part, nu.gamma)
    return estimate_from_parts(ybar, res.D, v, alpha_level)


@dataclass
class ProximalFit:
    data: object
    res: object
    nuisances: NuisanceEstimates
    estimate: EffectEstimate
    config: EstimatorConfig = field(default_factory=EstimatorConfig)
    diagnostics: object = None


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except PipelineError:
        raise
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise PipelineError(name, exc) from exc


def fit_pipeline(data, config=None, res=None):
    """Residualize (unless ``res`` is given), fit both nuisances, solve the final moment."""
    config = config or EstimatorConfig()
    if data is not None and (data.Z.shape[1] == 0):
        raise PipelineError("encode", ValueError("treatment proxies required"))
    if res is None:
        res = _stage("residualize", residualize, data, config.lasso_grid,
                     config.n_splits, config.seed)
    nu = _stage("nuisances", fit_nuisances, res, config.alpha)
    if config.crossfit_folds and config.crossfit_folds > 1:
        est = _stage("final", crossfit_estimate, res, config.crossfit_folds,
                     config.alpha, config.alpha_level, config.seed)
    else:
        est = _stage("final", final_estimate, res, nu.h, nu.gamma, config.alpha_level)
    return ProximalFit(data, res, nu, est, config)


def estimate_pipeline(data, config=None, diagnostics_config=None, res=None):
    """Full estimation followed by the diagnostic suite."""
    from .diagnostics import DiagnosticsConfig, run_all
    fit = fit_pipeline(data, config, res)
    dcfg = diagnostics_config or DiagnosticsConfig(alpha=fit.config.alpha,
                                                   seed=fit.config.seed)
    fit.diagnostics = _stage("diagnostics", run_all, fit.res, fit.nuisances, dcfg)
    return fit
