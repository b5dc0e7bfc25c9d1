import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from proxmed.estimator import final_estimate, fit_nuisances, fit_pipeline
from proxmed.regress import ResidualizedData, residualize
from proxmed.robust import (anderson_rubin_stat, bootstrap, compare_influence_features,
                            influence_scores, minimal_influence_set, stratified_estimate,
                            weak_ci)
from proxmed.semisynth import LinearSCM, simulate_linear


def fitted(seed, n=500, **kw):
    data, _, _ = simulate_linear(LinearSCM(n=n, **kw), seed)
    res = residualize(data)
    nu = fit_nuisances(res)
    return res, nu, final_estimate(res, nu.h, nu.gamma)


class TestWeakCI:
    def test_overlaps_normal_ci(self):
        for s in range(5):
            res, nu, est = fitted(s, n=5000)
            ci = weak_ci(res, nu.h, nu.gamma)
            assert not ci.empty and ci.contiguous
            assert ci.low <= est.theta <= ci.high
            assert ci.low <= est.ci_high and est.ci_low <= ci.high

    def test_exact_effect_degenerates(self):
        rng = np.random.default_rng(0)
        D = rng.standard_normal(200)
        res = ResidualizedData(D, rng.standard_normal((200, 2)), rng.standard_normal((200, 2)),
                               0.3 * D)
        ci = weak_ci(res, np.zeros(2), np.zeros(2), step=0.001)
        assert ci.high - ci.low <= 2 * 0.001
        assert ci.low - 1e-9 <= 0.3 <= ci.high + 1e-9

    def test_grid_excluding_estimate(self):
        res, nu, est = fitted(1, n=5000)
        ci = weak_ci(res, nu.h, nu.gamma, grid_low=5.0, grid_high=6.0)
        assert ci.empty and ci.n_accepted == 0

    def test_statistic_zero_at_estimate(self):
        res, nu, est = fitted(2)
        ybar = res.Y - res.X @ nu.h
        v = res.D - res.Z @ nu.gamma
        assert anderson_rubin_stat(ybar, res.D, v, [est.theta])[0] < 1e-18


def literal_loo(res, h, gamma, i):
    keep = np.ones(res.n, dtype=bool)
    keep[i] = False
    return final_estimate(res.take(np.flatnonzero(keep)), h, gamma).theta


class TestInfluence:
    def test_exact_matches_refit(self):
        res, nu, est = fitted(3)
        table = influence_scores(res, nu.h, nu.gamma, est)
        refit = np.array([est.theta - literal_loo(res, nu.h, nu.gamma, i) for i in table.row])
        assert np.max(np.abs(table.exact_delta - refit)) < 1e-8

    def test_approximation_ranks_like_refit(self):
        res, nu, est = fitted(3)
        table = influence_scores(res, nu.h, nu.gamma, est)
        rho = stats.spearmanr(table.score, table.exact_delta).statistic
        assert rho >= 0.95

    def test_zero_residual_zero_score(self):
        # with ybar_7 = D_7 * theta_(-7), row 7 leaves theta unchanged and has zero residual
        res, nu, _ = fitted(4)
        theta_loo = literal_loo(res, nu.h, nu.gamma, 7)
        res.Y[7] = res.X[7] @ nu.h + res.D[7] * theta_loo
        est = final_estimate(res, nu.h, nu.gamma)
        assert est.theta == pytest.approx(theta_loo, abs=1e-12)
        table = influence_scores(res, nu.h, nu.gamma, est)
        assert abs(table.score[table.row == 7][0]) < 1e-15
        assert abs(table.exact_delta[table.row == 7][0]) < 1e-12

    def test_ordering(self):
        res, nu, est = fitted(5)
        table = influence_scores(res, nu.h, nu.gamma, est)
        assert np.all(np.diff(table.score) <= 0)
        np.testing.assert_array_equal(table.rank, np.arange(1, res.n + 1))
        assert sorted(table.row.tolist()) == list(range(res.n))
        assert set(table.columns()) >= {"row", "score", "exact_delta", "cooks"}

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_scores_sum_to_zero(self, seed):
        res, nu, est = fitted(seed % 1000, n=200)
        table = influence_scores(res, nu.h, nu.gamma, est, diagnostics=False)
        assert abs(table.score.sum()) < 1e-10


class TestInfluenceSet:
    def test_ci_covers_zero_gives_empty(self):
        res, nu, est = fitted(0, theta=0.0, n=500)
        if not est.covers(0.0):
            pytest.skip("fixture CI excludes 0")
        table = influence_scores(res, nu.h, nu.gamma, est)
        out = minimal_influence_set(res, nu.h, nu.gamma, table, est)
        assert out.rows.size == 0 and out.confirmed

    def test_removal_brings_zero_into_ci(self):
        res, nu, est = fitted(6, n=2000)
        assert not est.covers(0.0)
        table = influence_scores(res, nu.h, nu.gamma, est)
        out = minimal_influence_set(res, nu.h, nu.gamma, table, est)
        assert out.confirmed and out.estimate.covers(0.0)
        keep = np.setdiff1d(np.arange(res.n), out.rows)
        again = final_estimate(res.take(keep), nu.h, nu.gamma)
        assert again.theta == pytest.approx(out.estimate.theta)
        # the initial set is the shortest score prefix whose total exceeds the CI edge
        lead = table.score[:out.initial_size]
        assert lead.sum() > est.ci_low >= lead[:-1].sum()
        assert out.rows.size >= out.initial_size

    def test_planted_outliers_rank_high(self):
        hits = 0
        for s in range(10):
            res, nu, _ = fitted(s, n=2000)
            rng = np.random.default_rng(100 + s)
            planted = rng.choice(res.n, 10, replace=False)
            v = res.D - res.Z @ nu.gamma
            res.Y[planted] += 15 * np.sign(v[planted])
            est = final_estimate(res, nu.h, nu.gamma)
            table = influence_scores(res, nu.h, nu.gamma, est)
            hits += np.isin(table.row[:20], planted).sum() >= 5
        assert hits >= 7


class TestFeatureComparison:
    def test_detects_shift(self):
        rng = np.random.default_rng(0)
        n = 1000
        F = np.column_stack([rng.standard_normal(n), rng.integers(0, 2, n), np.ones(n)])
        rows = np.arange(100)
        F[rows, 0] += 2.0
        out = compare_influence_features(F, ["cont", "bin", "const"], rows)
        by = {c.feature: c for c in out}
        assert by["cont"].test == "ks" and by["cont"].p_value < 1e-6
        assert by["cont"].direction > 1.5
        assert by["bin"].test == "chi2"
        assert by["const"].test == "skipped"

    def test_rejects_degenerate_sets(self):
        F = np.random.default_rng(0).standard_normal((10, 1))
        with pytest.raises(ValueError):
            compare_influence_features(F, ["a"], np.arange(10))
        with pytest.raises(ValueError):
            compare_influence_features(F, ["a"], [])


class TestBootstrap:
    @pytest.fixture(scope="class")
    @staticmethod
    def fit():
        data, _, _ = simulate_linear(LinearSCM(n=4000), 0)
        return fit_pipeline(data)

    def test_stage3_self_consistent(self, fit):
        th = bootstrap(fit, 3, 1000, 0.5, seed=1)
        assert abs(th.mean() - fit.estimate.theta) < 2 * th.std(ddof=1) / np.sqrt(1000)

    def test_single_replicate_matches_direct_run(self, fit):
        th = bootstrap(fit, 2, 1, 0.5, seed=2)
        s = np.random.SeedSequence(2).spawn(1)[0]
        rows = np.sort(np.random.default_rng(int(s.generate_state(1)[0]))
                       .choice(fit.res.n, fit.res.n // 2, replace=False))
        sub = fit.res.take(rows)
        nu = fit_nuisances(sub)
        assert th[0] == final_estimate(sub, nu.h, nu.gamma).theta

    def test_spread_shrinks_with_fraction(self, fit):
        sds = [bootstrap(fit, 3, 300, f, seed=3).std() for f in (0.1, 0.25, 0.5, 0.75)]
        assert all(a >= b for a, b in zip(sds, sds[1:]))

    def test_stage1_runs(self, fit):
        th = bootstrap(fit, 1, 2, 0.5, seed=0)
        assert th.shape == (2,) and np.all(np.isfinite(th))

    def test_too_small(self, fit):
        with pytest.raises(ValueError):
            bootstrap(fit, 3, 5, 1e-4)
        with pytest.raises(ValueError):
            bootstrap(fit, 4, 5)


def test_stratified_estimates():
    data, _, _ = simulate_linear(LinearSCM(n=4000), 1)
    fit = fit_pipeline(data)
    labels = np.where(np.arange(4000) < 3600, "big", "small")
    out = stratified_estimate(fit, labels, min_size=500, levels=["big", "small", "none"])
    by = {s.label: s for s in out}
    assert by["big"].estimate is not None and by["big"].size == 3600
    assert by["small"].estimate is None and "skipped" in by["small"].note
    assert by["none"].size == 0
    with pytest.raises(ValueError):
        stratified_estimate(fit, labels[:10])
