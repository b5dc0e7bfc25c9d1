import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proxmed.proxy_select import (SelectionConfig, SelectionTrace, _projection_residual,
                                  approx_score, choose_candidate, select_proxies)
from proxmed.regress import residualize
from proxmed.semisynth import LinearSCM, simulate_linear


class TestApproxScore:
    def test_full_rank_square(self):
        rng = np.random.default_rng(0)
        S = rng.standard_normal((4, 4))
        v = rng.standard_normal(4)
        assert approx_score(S, v, range(4), range(4), 0.0, 0.0) < 1e-12

    def test_zero_vector(self):
        S = np.random.default_rng(1).standard_normal((3, 5))
        assert approx_score(S, np.zeros(3), range(3), range(5), 0.0, 0.0) == 0.0

    def test_rank_one_orthogonal(self):
        rng = np.random.default_rng(2)
        u, w = rng.standard_normal(4), rng.standard_normal(3)
        v = rng.standard_normal(4)
        v -= u * (u @ v) / (u @ u)
        score = approx_score(np.outer(u, w), v, range(4), range(3), 0.0, 0.0)
        assert score == pytest.approx(np.max(np.abs(v)), abs=1e-12)

    def test_sparsified_vector(self):
        u = np.array([1.0, 0.0, 0.0])
        v = np.array([0.0, 0.05, 3.0])
        se = np.full(3, 0.1)
        S = np.outer(u, [1.0, 1.0])
        assert approx_score(S, v, range(3), range(2), 0.0, 2.0, se) == pytest.approx(3.0)

    def test_empty_sets(self):
        with pytest.raises(ValueError):
            approx_score(np.eye(2), np.ones(2), [], [0], 0.0, 0.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_dropping_columns_never_shrinks_residual(self, seed):
        # monotone in the Euclidean norm; the sup norm used for scoring need not be
        rng = np.random.default_rng(seed)
        S = rng.standard_normal((5, 2)) @ rng.standard_normal((2, 4))
        v = rng.standard_normal(5)
        full = np.linalg.norm(_projection_residual(S, v))
        fewer = np.linalg.norm(_projection_residual(S[:, :1], v))
        assert fewer >= full - 1e-10
        assert approx_score(S, v, range(5), range(4), 0.0, 0.0) <= full + 1e-12


def _res(seed, **kw):
    data, _, _ = simulate_linear(LinearSCM(n=5000, p_z=6, p_x=6, **kw), seed)
    return residualize(data)


def test_zero_delta_grows_nothing():
    # with no noise floor the bar is 0 and a strict comparison accepts nothing
    res = _res(0)
    out = select_proxies(res, config=SelectionConfig(K=5, delta=0.0, noise_floor=False, n_mc=2000))
    assert all(len(c.x_indices) <= 1 and len(c.z_indices) <= 1 for c in out)
    assert out == []


def test_deterministic():
    res = _res(1)
    cfg = SelectionConfig(K=10, n_mc=2000, seed=3)
    assert select_proxies(res, config=cfg) == select_proxies(res, config=cfg)


def test_clean_generator_keeps_full_sets():
    cfg = SelectionConfig(K=10, n_mc=2000)
    hits = 0
    for s in range(5):
        out = select_proxies(_res(s), config=cfg)
        hits += any(c.x_indices == tuple(range(6)) and c.z_indices == tuple(range(6))
                    for c in out)
    assert hits >= 4


def test_planted_violation_excluded():
    cfg = SelectionConfig(K=10, n_mc=2000)
    for s in range(3):
        trace = SelectionTrace()
        out = select_proxies(_res(s, d_to_x=1.0), config=cfg, trace=trace)
        assert all(0 not in c.x_indices for c in out)
        assert trace.baseline_dual > trace.threshold_dual > 0


def test_candidates_pass_both_tests_and_carry_labels():
    res = _res(2)
    out = select_proxies(res, config=SelectionConfig(K=5, n_mc=2000))
    assert out
    for c in out:
        assert c.full_test_passed
        assert list(c.x_labels) == [res.x_labels[i] for i in c.x_indices]
        assert set(c.to_dict()) >= {"x_indices", "z_indices", "approx_primal", "approx_dual"}


def test_choose_candidate_lower_median():
    res = _res(3)
    out = select_proxies(res, config=SelectionConfig(K=10, n_mc=2000))
    chosen, est = choose_candidate(out, res)
    assert chosen in out
    with pytest.raises(ValueError):
        choose_candidate([], res)


def test_requires_proxies():
    res = _res(0)
    with pytest.raises(ValueError):
        select_proxies(res.select([], None))
