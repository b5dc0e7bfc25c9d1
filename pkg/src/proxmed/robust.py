"""Weak-instrument confidence sets, influence analysis, bootstrap stages and
stratified estimates."""
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .estimator import (DENOM_TOL, WeakIdentificationError, adjusted_outcome,
                        engineered_instrument, final_estimate,
                        fit_nuisances, fit_pipeline)


@dataclass(frozen=True)
class WeakCI:
    low: float
    high: float
    empty: bool
    unbounded: bool
    contiguous: bool
    n_accepted: int

    def to_dict(self):
        return {"low": self.low, "high": self.high, "empty": self.empty,
                "unbounded": self.unbounded, "contiguous": self.contiguous,
                "n_accepted": self.n_accepted}


def anderson_rubin_stat(ybar, d, v, thetas):
    """n * E_n[(ybar - d t) v]^2 / Var_n((ybar - d t) v) for every t in ``thetas``."""
    n = d.shape[0]
    a, b = ybar * v, d * v
    ma, mb = a.mean(), b.mean()
    saa = np.mean((a - ma) ** 2)
    sab = np.mean((a - ma) * (b - mb))
    sbb = np.mean((b - mb) ** 2)
    t = np.asarray(thetas, dtype=float)
    num = n * (ma - t * mb) ** 2
    var = saa - 2 * t * sab + t * t * sbb
    scale = max(saa, sbb, 1e-300)
    tiny = var <= 1e-14 * scale
    stat = np.where(tiny, np.where(num <= 1e-14 * n * scale, 0.0, np.inf),
                    num / np.where(tiny, 1.0, var))
    return stat


def weak_ci(res, h, gamma, alpha=0.05, grid_low=-1.0, grid_high=1.0, step=0.001):
    """Grid inversion of the identification-robust moment test."""
    if grid_high < grid_low or step <= 0:
        raise ValueError("invalid grid")
    k = int(round((grid_high - grid_low) / step))
    grid = grid_low + step * np.arange(k + 1)
    stat = anderson_rubin_stat(adjusted_outcome(res, h), res.D,
                               engineered_instrument(res, gamma), grid)
    accepted = stat <= stats.chi2.ppf(1 - alpha, 1)
    idx = np.flatnonzero(accepted)
    if idx.size == 0:
        return WeakCI(float("nan"), float("nan"), True, False, True, 0)
    contiguous = bool(idx[-1] - idx[0] + 1 == idx.size)
    unbounded = bool(accepted[0] or accepted[-1])
    return WeakCI(float(grid[idx[0]]), float(grid[idx[-1]]), False, unbounded,
                  contiguous, int(idx.size))


@dataclass
class InfluenceTable:
    """Per-row influence, ordered by approximate score (descending)."""
    row: np.ndarray
    score: np.ndarray
    exact_delta: np.ndarray
    rank: np.ndarray
    hat: np.ndarray = None
    studentized: np.ndarray = None
    dffits: np.ndarray = None
    cooks: np.ndarray = None

    def __len__(self):
        return self.row.size

    def columns(self):
        cols = {"row": self.row, "rank": self.rank, "score": self.score,
                "exact_delta": self.exact_delta}
        for name in ("hat", "studentized", "dffits", "cooks"):
            if getattr(self, name) is not None:
                cols[name] = getattr(self, name)
        return cols


def _parts(res, h, gamma):
    return adjusted_outcome(res, h), res.D, engineered_instrument(res, gamma)


def influence_scores(res, h, gamma, estimate, diagnostics=True):
    """Approximate and exact leave-one-out influence of every row on theta.

    The exact delta theta - theta_(-i) keeps h and gamma fixed, which makes the
    final moment a just-identified IV with a closed-form deletion update.
    """
    ybar, d, v = _parts(res, h, gamma)
    n = d.shape[0]
    denom = np.mean(d * v)
    if not abs(denom) >= DENOM_TOL:
        raise WeakIdentificationError("weakly identified: run weak-IV tests")
    theta = estimate.theta
    resid = ybar - d * theta
    score = resid * v / (n * denom)
    svy, svd = np.sum(v * ybar), np.sum(v * d)
    rest = svd - v * d
    with np.errstate(divide="ignore", invalid="ignore"):
        loo = (svy - v * ybar) / rest
    exact = theta - loo
    order = np.lexsort((np.arange(n), -score))
    rank = np.empty(n, dtype=int)
    rank[order] = np.arange(1, n + 1)
    extra = {}
    if diagnostics:
        lev = v * d / svd
        s2 = np.mean(resid ** 2) * n / max(n - 1, 1)
        one_minus = np.abs(1 - lev)
        stud = resid / np.sqrt(s2 * np.where(one_minus > 0, one_minus, np.nan))
        extra = {"hat": lev[order], "studentized": stud[order],
                 "dffits": (stud * np.sqrt(np.abs(lev) / one_minus))[order],
                 "cooks": (exact / estimate.se)[order] ** 2 if estimate.se > 0
                 else np.full(n, np.nan)}
    return InfluenceTable(order, score[order], exact[order], rank[order], **extra)


@dataclass(frozen=True)
class InfluenceSet:
    rows: np.ndarray
    estimate: object
    confirmed: bool
    initial_size: int
    note: str = ""


def _prefix_estimates(ybar, d, v, drop_order, alpha_level):
    """(theta, ci_low, ci_high) after dropping the first m rows of ``drop_order``, m = 0..len."""
    n = d.shape[0]
    a, b = v * ybar, v * d
    aa, ab, bb = (v * ybar) ** 2, v * v * ybar * d, (v * d) ** 2
    cum = [np.concatenate([[0.0], np.cumsum(x[drop_order])]) for x in (a, b, aa, ab, bb)]
    tot = [x.sum() for x in (a, b, aa, ab, bb)]
    m = np.arange(drop_order.size + 1)
    k = n - m
    Sa, Sb, Saa, Sab, Sbb = (t - c for t, c in zip(tot, cum))
    with np.errstate(divide="ignore", invalid="ignore"):
        theta = Sa / Sb
        ss = (Saa - 2 * theta * Sab + theta ** 2 * Sbb) / k
        se = np.sqrt(np.maximum(ss, 0)) / np.abs(Sb / k) / np.sqrt(k)
    z = stats.norm.ppf(1 - alpha_level / 2)
    return theta, theta - z * se, theta + z * se


def minimal_influence_set(res, h, gamma, table, estimate):
    """Smallest high-influence set whose removal brings 0 into the CI.

    Rows whose score shares the sign of theta are accumulated in score order
    until their sum exceeds the distance from the CI edge to zero; the result
    is then re-estimated and, if 0 is still excluded, extended one row at a
    time along the same ordering.
    """
    if estimate.ci_low <= 0 <= estimate.ci_high:
        return InfluenceSet(np.zeros(0, dtype=int), estimate, True, 0, "CI already covers 0")
    sign = 1.0 if estimate.theta > 0 else -1.0
    bound = estimate.ci_low if sign > 0 else estimate.ci_high
    same = sign * table.score > 0
    rows = table.row[same]
    scores = table.score[same]
    order = np.argsort(-sign * scores, kind="stable")
    rows, scores = rows[order], scores[order]
    csum = np.cumsum(np.abs(scores))
    hit = np.flatnonzero(csum > abs(bound))
    initial = int(hit[0] + 1) if hit.size else rows.size

    ybar, d, v = _parts(res, h, gamma)
    theta, lo, hi = _prefix_estimates(ybar, d, v, rows, estimate.alpha_level)
    covers = (lo <= 0) & (0 <= hi) & np.isfinite(theta)
    ok = np.flatnonzero(covers[initial:]) + initial
    if ok.size:
        m = int(ok[0])
        note = "" if m == initial else f"extended from {initial} rows"
        confirmed = True
    else:
        m = rows.size
        note = "removing every same-sign row did not bring 0 into the CI"
        confirmed = False
    keep = np.ones(res.n, dtype=bool)
    keep[rows[:m]] = False
    new = final_estimate(res.take(np.flatnonzero(keep)), h, gamma, estimate.alpha_level)
    return InfluenceSet(np.sort(rows[:m]), new, confirmed, initial, note)


@dataclass(frozen=True)
class FeatureComparison:
    feature: str
    test: str
    statistic: float
    p_value: float
    direction: float
    note: str = ""


def compare_influence_features(features, labels, rows, kinds=None):
    """Per-feature two-sample tests between the influence set and the rest.

    Two-valued columns (or those marked binary/categorical in ``kinds``) get a
    chi-square test on the 2 x 2 table; others a Kolmogorov-Smirnov test.
    ``direction`` is mean(in set) - mean(rest).
    """
    F = np.asarray(features, dtype=float)
    n = F.shape[0]
    inside = np.zeros(n, dtype=bool)
    inside[np.asarray(rows, dtype=int)] = True
    if inside.all():
        raise ValueError("influence set covers every row; nothing to compare against")
    if not inside.any():
        raise ValueError("influence set is empty")
    kinds = kinds or {}
    out, skipped = [], []
    for j, lab in enumerate(labels):
        col = F[:, j]
        a, b = col[inside], col[~inside]
        direction = float(a.mean() - b.mean())
        levels = np.unique(col)
        if levels.size < 2:
            skipped.append(FeatureComparison(lab, "skipped", float("nan"), float("nan"),
                                             0.0, "constant feature"))
            continue
        if levels.size == 2 or kinds.get(lab) in ("binary", "categorical"):
            table = np.array([[np.sum(a == lv) for lv in levels],
                              [np.sum(b == lv) for lv in levels]])
            table = table[:, table.sum(axis=0) > 0]
            if table.shape[1] < 2:
                skipped.append(FeatureComparison(lab, "skipped", float("nan"), float("nan"),
                                                 direction, "single observed level"))
                continue
            stat, p, _, _ = stats.chi2_contingency(table, correction=False)
            out.append(FeatureComparison(lab, "chi2", float(stat), float(p), direction))
        else:
            r = stats.ks_2samp(a, b)
            out.append(FeatureComparison(lab, "ks", float(r.statistic), float(r.pvalue),
                                         direction))
    out.sort(key=lambda c: (c.p_value, c.feature))
    return out + skipped


def _replicate_seeds(seed, K):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(K)]


def bootstrap(fit, stage, K, fraction=0.5, seed=0):
    """Subsample-without-replacement replicates of theta.

    stage 1 reruns the whole pipeline, stage 2 reuses the residuals and
    refits the nuisances, stage 3 keeps the nuisances and re-solves the final
    moment only.
    """
    if stage not in (1, 2, 3):
        raise ValueError("stage must be 1, 2 or 3")
    n = fit.res.n
    m = int(np.floor(fraction * n))
    if not 0 < fraction <= 1 or m < 10:
        raise ValueError(f"subsample of {m} rows is too small (fraction * n must be >= 10)")
    if stage == 1 and fit.data is None:
        raise ValueError("stage 1 needs the design matrices")
    out = []
    for s in _replicate_seeds(seed, K):
        rows = np.sort(np.random.default_rng(s).choice(n, m, replace=False))
        if stage == 1:
            out.append(fit_pipeline(fit.data.take(rows), fit.config).estimate.theta)
            continue
        sub = fit.res.take(rows)
        if stage == 2:
            nu = fit_nuisances(sub, fit.config.alpha)
            est = final_estimate(sub, nu.h, nu.gamma, fit.config.alpha_level)
        else:
            est = final_estimate(sub, fit.nuisances.h, fit.nuisances.gamma,
                                 fit.config.alpha_level)
        out.append(est.theta)
    return np.array(out)


@dataclass
class StratumEstimate:
    label: object
    size: int
    estimate: object = None
    note: str = ""


def stratified_estimate(fit, strata, min_size=500, levels=None):
    """Stage-2 estimate within each stratum (residuals reused, nuisances refit).

    ``levels`` lists the expected strata, so empty ones are reported too.
    """
    labels = np.asarray(strata)
    if labels.shape[0] != fit.res.n:
        raise ValueError("strata must label every row")
    if levels is None:
        levels = sorted(set(labels.tolist()), key=lambda x: (str(type(x)), x))
    out = []
    for lab in levels:
        rows = np.flatnonzero(labels == lab)
        if rows.size < min_size:
            out.append(StratumEstimate(lab, int(rows.size),
                                       note=f"skipped: {rows.size} rows < minimum {min_size}"))
            continue
        sub = fit.res.take(rows)
        try:
            nu = fit_nuisances(sub, fit.config.alpha)
            est = final_estimate(sub, nu.h, nu.gamma, fit.config.alpha_level)
            out.append(StratumEstimate(lab, int(rows.size), est))
        except WeakIdentificationError as exc:
            out.append(StratumEstimate(lab, int(rows.size), note=f"skipped: {exc}"))
    return out
