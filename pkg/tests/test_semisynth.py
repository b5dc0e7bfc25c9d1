import warnings

import numpy as np
import pytest

from proxmed.dataset import RoleConfig, encode
from proxmed.estimator import EffectEstimate, fit_pipeline
from proxmed.semisynth import (LinearSCM, SynthParams, baseline_ols, evaluate, fit_generator,
                               make_reference_table, sample, simulate_linear)


@pytest.fixture(scope="module")
def reference():
    raw, roles = make_reference_table(20_000, seed=0)
    return raw, roles, encode(raw, roles)


@pytest.fixture(scope="module")
def model(reference):
    return fit_generator(reference[2], seed=0)


def test_reference_table_shape(reference):
    raw, roles, data = reference
    assert raw.n == 20_000
    kinds = set(raw.kinds.values())
    assert kinds == {"continuous", "binary", "categorical"}
    assert data.Z.shape[1] == 8 and data.X.shape[1] == 6
    assert np.isnan(raw.columns["bmi"]).any()


def test_recovers_three_factors():
    hits = 0
    for s in range(10):
        raw, roles = make_reference_table(20_000, seed=s)
        hits += fit_generator(encode(raw, roles), seed=s, n_mc=4000).K == 3
    assert hits >= 9


def test_propensity_clipped_with_predictive_column(reference):
    raw, roles, _ = reference
    raw.columns["sex_copy"] = raw.columns["sex"].copy()
    raw.kinds["sex_copy"] = raw.kinds["sex"]
    try:
        r = RoleConfig(roles.attribute, roles.outcome, roles.confounders + ("sex_copy",),
                       roles.z_proxies, roles.x_proxies)
        m = fit_generator(encode(raw, r), seed=0, n_mc=2000)
        p = m.propensity.predict_proba(m.W_pool)
        assert p.min() >= 1e-6 and p.max() <= 1 - 1e-6
    finally:
        del raw.columns["sex_copy"], raw.kinds["sex_copy"]


def test_constant_outcome(reference, model):
    data = reference[2]
    flat = data.take(np.arange(data.n))
    flat.Y = np.full(data.n, 2.0)
    m = fit_generator(flat, seed=0)
    assert np.all(m.f_Y[0] == 0) and m.f_Y[1] == pytest.approx(2.0)
    np.testing.assert_allclose(m.singular_values, model.singular_values)


def test_noiseless_collapse(model):
    p = SynthParams(theta=0.7, b=0.0, g=0.0, sigma_y=0.0, n=500, seed=1)
    data, _ = sample(model, p)
    fy = data.W @ model.f_Y[0] + model.f_Y[1]
    np.testing.assert_allclose(data.Y - fy, 0.7 * data.D, atol=1e-12)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        assert baseline_ols(data, None, "with_Z") == pytest.approx(0.7, abs=1e-8)


def test_null_calibration(model):
    hits = 0
    for r in range(100):
        data, _ = sample(model, SynthParams(theta=0.0, a=0.0, n=10_000, seed=r))
        est = fit_pipeline(data).estimate
        hits += abs(est.theta) < 2 * est.se
    assert hits >= 90


def test_sample_deterministic_and_binarized(model):
    a, Ma = sample(model, SynthParams(n=300, seed=5))
    b, Mb = sample(model, SynthParams(n=300, seed=5))
    np.testing.assert_array_equal(a.Y, b.Y)
    np.testing.assert_array_equal(Ma, Mb)
    assert set(np.unique(a.Z[:, model.binary_z])) <= {-0.5, 0.5}
    assert a.z_labels == model.template.z_labels


def test_baselines(model):
    with_m, with_z = [], []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for r in range(10):
            data, M = sample(model, SynthParams(theta=0.5, n=10_000, seed=r))
            with_m.append(baseline_ols(data, M, "with_M"))
            with_z.append(baseline_ols(data, None, "with_Z"))
    assert np.mean(with_m) == pytest.approx(0.5, abs=0.03)
    assert abs(np.mean(with_z) - 0.5) >= 0.3
    with pytest.raises(ValueError):
        baseline_ols(data, None, "with_M")


class TestEvaluate:
    def test_perfect(self):
        m = evaluate([EffectEstimate(0.5, 0.1, 0.3, 0.7)] * 3, 0.5)
        assert m.coverage == 1.0 and m.rmse == 0.0 and m.bias == 0.0

    def test_miss(self):
        m = evaluate([EffectEstimate(1.5, 1e-12, 1.5, 1.5)], 0.5)
        assert m.coverage == 0.0 and m.rmse == pytest.approx(1.0) and m.bias == pytest.approx(1.0)

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate([], 0.0)


def test_linear_scm_truth():
    data, M, truth = simulate_linear(LinearSCM(n=100, K=2, p_z=5, p_x=3), seed=0)
    assert truth["G"].shape == (5, 2) and truth["F"].shape == (3, 2)
    assert np.all(np.abs(truth["G"]) >= 0.5) and M.shape == (100, 2)
