from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cate.predictors import (BayesianLinearRegression, DngoModel, MlpPredictor, dngo_predictor,
                             expected_improvement)


def linear_data(rng, n=60, d=5):
    x = rng.standard_normal((n, d))
    w = rng.standard_normal(d)
    return x, x @ w + 0.3


def test_blr_recovers_linear_targets(rng):
    phi, y = linear_data(rng)
    blr = BayesianLinearRegression().fit(phi, y)
    design = np.column_stack([phi, np.ones(len(phi))])
    coef = np.linalg.lstsq(design, y, rcond=None)[0]
    probe = rng.standard_normal((20, phi.shape[1]))
    mu, _ = blr.predict(probe)
    assert np.abs(mu - np.column_stack([probe, np.ones(20)]) @ coef).max() < 1e-3
    assert np.abs(blr.predict(phi)[0] - y).max() < 1e-3


def test_blr_covariance_spd(rng):
    phi, y = linear_data(rng, n=30, d=8)
    y = y + 0.1 * rng.standard_normal(30)
    blr = BayesianLinearRegression().fit(phi, y)
    low = np.tril(blr.cov_chol[0])
    a = low @ low.T
    assert np.allclose(a, a.T) and np.linalg.eigvalsh(a).min() > 0
    assert blr.alpha > 0 and blr.beta > 0


def test_blr_rank_deficient_features(rng):
    phi = np.repeat(rng.standard_normal((20, 1)), 4, axis=1)
    mu, var = BayesianLinearRegression().fit(phi, phi[:, 0] * 2.0).predict(phi)
    assert np.all(np.isfinite(mu)) and np.all(var >= 0)


def test_dngo_variance_near_below_far(rng):
    x = rng.uniform(-1, 1, size=(40, 3))
    y = x @ np.array([1.0, -2.0, 0.5]) + 0.01 * rng.standard_normal(40)
    model = DngoModel(epochs=60, seed=0).fit(x, y)
    _, v_train = model.predict(x)
    _, v_far = model.predict(x * 0 + 8.0)
    assert np.median(v_train) <= v_far.min()


def test_dngo_fits_linear_trend(rng):
    x = rng.uniform(-1, 1, size=(60, 3))
    y = x @ np.array([1.0, -2.0, 0.5])
    mu, _ = DngoModel(epochs=100, seed=0).fit(x, y).predict(x)
    assert np.corrcoef(mu, y)[0, 1] > 0.98


def test_constant_target(rng):
    x = rng.standard_normal((20, 4))
    mu, var = DngoModel(epochs=20).fit(x, np.full(20, 0.93)).predict(rng.standard_normal((10, 4)))
    assert np.allclose(mu, 0.93, atol=1e-6)
    assert np.all(np.isfinite(var))


def test_order_invariance(rng):
    x, y = linear_data(rng, n=25, d=3)
    perm = rng.permutation(25)
    probe = rng.standard_normal((7, 3))
    a = DngoModel(epochs=10, seed=2).fit(x, y).predict(probe)
    b = DngoModel(epochs=10, seed=2).fit(x[perm], y[perm]).predict(probe)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_needs_two_points():
    with pytest.raises(ValueError):
        DngoModel().fit(np.zeros((1, 3)), np.zeros(1))


def test_mlp_predictor_zero_variance(rng):
    x, y = linear_data(rng, n=30, d=3)
    mu, var = MlpPredictor(epochs=30).fit(x, y).predict(x)
    assert np.all(var == 0) and np.corrcoef(mu, y)[0, 1] > 0.9


def test_dngo_predictor_wrapper(rng):
    x, y = linear_data(rng, n=20, d=3)
    mu, var = dngo_predictor(x, y, x[:5], epochs=5)
    assert mu.shape == var.shape == (5,)


def test_expected_improvement_reference():
    from scipy.stats import norm
    mean, var, best = np.array([0.9, 0.8]), np.array([0.01, 0.04]), 0.85
    s = np.sqrt(var)
    z = (mean - best) / s
    ref = (mean - best) * norm.cdf(z) + s * norm.pdf(z)
    assert np.allclose(expected_improvement(mean, var, best), ref)


@given(st.floats(-1, 1), st.floats(1e-6, 1.0), st.floats(-1, 1))
def test_expected_improvement_nonnegative(m, v, best):
    ei = expected_improvement(np.array([m]), np.array([v]), best)[0]
    assert ei >= -1e-12 and ei >= m - best - 1e-12
