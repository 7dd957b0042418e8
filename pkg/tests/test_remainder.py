import numpy as np
import pytest

from robust_sls.dynamics import UncertainModel, linear_model, satellite_model
from robust_sls.remainder import MuBound, estimate_mu, remainder_eval
from robust_sls.sets import ParamBox


def _square_model():
    return UncertainModel(1, 1, 1, lambda x, u: np.array([x[0] ** 2]), lambda x, u: np.zeros((1, 1)),
                          np.zeros((1, 1)), ParamBox.symmetric(0.0))


def test_linear_model_has_zero_mu():
    rng = np.random.default_rng(0)
    model = linear_model(rng.standard_normal((3, 3)), rng.standard_normal((3, 1)),
                         A_theta=rng.standard_normal((1, 3, 3)), Theta=ParamBox.symmetric(0.1))
    mu = estimate_mu(model, -np.ones(4), np.ones(4), n_samples=200)
    assert np.array_equal(mu.mu, np.zeros(3))


def test_square_map_mu_is_one():
    mu = estimate_mu(_square_model(), -np.ones(2), np.ones(2), n_samples=50)
    assert np.isclose(mu.mu[0], 1.0, atol=1e-6)


def test_square_remainder_arithmetic():
    r = remainder_eval(_square_model(), [0.3], [0.0], [0.0], [0.0], [0.0])
    assert np.isclose(r[0], 0.09)


def test_remainder_vanishes_at_expansion_point_and_for_linear():
    sat = satellite_model()
    x, u = np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6]), np.array([0.2, -0.1])
    assert np.abs(remainder_eval(sat, x, u, x, u, [0.01])).max() <= 1e-15
    rng = np.random.default_rng(1)
    lin = linear_model(rng.standard_normal((2, 2)), rng.standard_normal((2, 1)))
    r = remainder_eval(lin, rng.standard_normal(2), rng.standard_normal(1), rng.standard_normal(2),
                       rng.standard_normal(1), [0.0])
    assert np.abs(r).max() <= 1e-12


def test_estimate_mu_validation_and_determinism():
    sat = satellite_model()
    lo, hi = -np.ones(8), np.ones(8)
    with pytest.raises(ValueError):
        estimate_mu(sat, lo, np.full(8, np.inf))
    with pytest.raises(ValueError):
        estimate_mu(sat, lo, hi, n_samples=0)
    with pytest.raises(ValueError):
        estimate_mu(sat, lo, hi, safety=0.9)
    a = estimate_mu(sat, lo, hi, n_samples=2000, seed=5)
    b = estimate_mu(sat, lo, hi, n_samples=2000, seed=5)
    assert np.array_equal(a.mu, b.mu) and a.metadata["seed"] == 5
    assert a.mu[2] == 0.0 and a.mu[5] == 0.0
    assert np.all(a.mu >= 0)
    with pytest.raises(ValueError):
        MuBound(np.array([-1.0]))
    assert np.array_equal(MuBound.from_dict(a.to_dict()).mu, a.mu)


def test_mu_monotone_in_domain():
    sat = satellite_model()
    prev = None
    for scale in (0.25, 0.5, 1.0):
        mu = estimate_mu(sat, -scale * np.ones(8), scale * np.ones(8), n_samples=5000, seed=3).mu
        if prev is not None:
            assert np.all(mu >= prev - 1e-12)
        prev = mu


def test_remainder_bound_holds_on_samples():
    """|r_i| <= ||(x - z, u - v)||_inf^2 mu_i with mu at safety 1.1."""
    sat = satellite_model()
    lo, hi = -np.ones(8), np.ones(8)
    mu = estimate_mu(sat, lo, hi, safety=1.1, seed=0).mu
    rng = np.random.default_rng(7)
    bad = 0
    for _ in range(2000):
        a, b = rng.uniform(lo, hi), rng.uniform(lo, hi)
        th = rng.uniform(-0.01, 0.01, 1)
        r = remainder_eval(sat, a[:6], a[6:], b[:6], b[6:], th)
        d = np.abs(a - b).max()
        bad += int(np.any(np.abs(r) > d * d * mu + 1e-12))
    assert bad == 0
