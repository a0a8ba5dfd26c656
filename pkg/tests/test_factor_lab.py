import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from synthbayes.errors import ConfigError
from synthbayes.factor_lab import (
    DENSE,
    SPARSE,
    FactorSpec,
    boundary_loading,
    check_characterization,
    conditional_variance,
    conditional_weights,
    empirical_risk,
    predictor_convergence_experiment,
    predictor_error_sd,
    recovered_loading,
    simulate_grouped,
    simulate_single_factor,
    true_representation,
)


def joint_cov_oracle(lambda1, lambdas, sigma, noise=1.0):
    """Weights and conditional variance by inverting the joint covariance numerically."""
    lam = np.concatenate(([lambda1], lambdas))
    S = sigma**2 * np.outer(lam, lam) + noise**2 * np.eye(lam.size)
    S_JJ = S[1:, 1:]
    c = S[1:, 0]
    w = np.linalg.solve(S_JJ, c)
    return w, S[0, 0] - c @ np.linalg.inv(S_JJ) @ c, S_JJ


def test_oracle_200_random_specs():
    g = np.random.default_rng(11)
    for _ in range(200):
        J = int(g.integers(1, 11))
        lam = g.uniform(-5, 5, J)
        l1 = g.uniform(-5, 5)
        sigma = g.uniform(0.1, 3.0)
        spec = FactorSpec(l1, lam, sigma_f=sigma)
        w_o, v_o, S_JJ = joint_cov_oracle(l1, lam, sigma)
        assert np.max(np.abs(conditional_weights(spec) - w_o)) <= 1e-10
        assert abs(conditional_variance(spec) - v_o) <= 1e-10
        # eigen-structure of the donor covariance: one eigenvalue 1 + sigma^2 ||l||^2, the rest 1
        ev = np.sort(np.linalg.eigvalsh(S_JJ))
        np.testing.assert_allclose(ev[-1], 1 + sigma**2 * lam @ lam, rtol=1e-10)
        np.testing.assert_allclose(ev[:-1], 1.0, atol=1e-9)


@given(
    st.floats(-5, 5),
    st.lists(st.floats(-5, 5), min_size=1, max_size=10),
    st.floats(0.1, 3.0),
    st.floats(0.2, 3.0),
)
def test_oracle_with_general_noise(l1, lam, sigma, noise):
    spec = FactorSpec(l1, lam, sigma_f=sigma, noise_sd=noise)
    w_o, v_o, _ = joint_cov_oracle(l1, np.array(lam), sigma, noise)
    scale = 1 + sigma**2 * (l1**2 + float(np.dot(lam, lam)))
    assert np.max(np.abs(conditional_weights(spec) - w_o)) <= 1e-9 * scale
    assert abs(conditional_variance(spec) - v_o) <= 1e-9 * scale * noise**2 + 1e-9
    assert conditional_variance(spec) > 0


def test_weight_examples():
    assert conditional_weights(FactorSpec(1.0, [1.0]))[0] == pytest.approx(0.5, abs=1e-15)
    np.testing.assert_allclose(conditional_weights(FactorSpec(1.5, [1.0, 1.0])), [0.5, 0.5], atol=1e-12)
    w = conditional_weights(FactorSpec(2.0, [1.0, 0.0, -3.0]))
    assert w[1] == 0.0


def test_variance_examples():
    assert conditional_variance(FactorSpec(1.0, [0.0, 0.0, 0.0])) == pytest.approx(2.0)
    assert conditional_variance(FactorSpec(0.0, [1.0, 2.0])) == pytest.approx(1.0)
    spec = FactorSpec(2.0, [1.0, 1.0, 1.0], sigma_f=0.5)
    assert abs(conditional_variance(spec) - joint_cov_oracle(2.0, np.ones(3), 0.5)[1]) <= 1e-10


@given(st.floats(-4, 4), st.lists(st.floats(-4, 4), min_size=1, max_size=8), st.floats(0.1, 3.0))
def test_variance_equals_alternate_form(l1, lam, sigma):
    spec = FactorSpec(l1, lam, sigma_f=sigma)
    alt = 1 + l1 * sigma**2 * (l1 - conditional_weights(spec) @ spec.lambdas)
    assert conditional_variance(spec) == pytest.approx(alt, rel=1e-10, abs=1e-10)


@given(st.floats(-4, 4), st.lists(st.floats(-4, 4), min_size=1, max_size=8), st.floats(0.1, 3.0))
def test_recovered_loading_identity(l1, lam, sigma):
    spec = FactorSpec(l1, lam, sigma_f=sigma)
    assert conditional_weights(spec) @ spec.lambdas == pytest.approx(recovered_loading(spec), rel=1e-12, abs=1e-12)


def test_characterization_examples():
    r = check_characterization(FactorSpec(1.5, [1.0, 1.0]))
    assert r.sign_ok and r.sphere_residual == 0.0 and r.in_simplex and r.conditions_hold
    np.testing.assert_allclose(r.weights, [0.5, 0.5])
    r = check_characterization(FactorSpec(-1.5, [1.0, 1.0]))
    assert not r.sign_ok and not r.in_simplex and np.all(r.weights < 0)


def test_boundary_loading():
    lam = boundary_loading(2.0 / math.sqrt(4), 4, 1.0)
    np.testing.assert_allclose(lam, 0.5, atol=1e-12)
    r = check_characterization(FactorSpec(1.0, lam))
    assert abs(r.sphere_residual) < 1e-12 and r.in_simplex
    with pytest.raises(ConfigError):
        boundary_loading(0.1, 4, 1.0)


@given(
    st.floats(0.3, 4) | st.floats(-4, -0.3),
    st.integers(1, 8),
    st.floats(0.2, 3.0),
    st.floats(-1.0, 1.0),
)
def test_characterization_consistency(l1, J, sigma, jitter):
    # mix specs on the characterization surface with off-surface ones
    on_surface = l1 * l1 >= 4.0 / (J * sigma * sigma)
    lam = boundary_loading(l1, J, sigma) if on_surface else np.full(J, abs(l1))
    lam = lam + (0.0 if jitter > 0 else jitter * 0.3)
    r = check_characterization(FactorSpec(l1, lam, sigma_f=sigma))
    assert r.in_simplex == r.conditions_hold


def test_spec_validation():
    with pytest.raises(ConfigError):
        FactorSpec(1.0, [1.0], sigma_f=0.0)
    with pytest.raises(ConfigError):
        FactorSpec(1.0, [1.0], noise_sd=-1.0)
    with pytest.raises(ConfigError):
        FactorSpec(1.0, [1.0], factor_law="ar1", rho=1.0)
    with pytest.raises(ConfigError):
        conditional_weights(FactorSpec(1.0, [1.0], factor_law="ar1", rho=0.5))


def test_single_factor_degenerate_and_deterministic():
    tiny = FactorSpec(1.0, [1.0, 2.0], sigma_f=1e-12, noise_sd=1e-12)
    assert np.max(np.abs(simulate_single_factor(tiny, 50, 40, 1).outcomes)) < 1e-10
    spec = FactorSpec(1.0, [1.0, 2.0])
    a, b = simulate_single_factor(spec, 30, 20, 5), simulate_single_factor(spec, 30, 20, 5)
    np.testing.assert_array_equal(a.outcomes, b.outcomes)
    assert not np.array_equal(a.outcomes, simulate_single_factor(spec, 30, 20, 6).outcomes)


def test_single_factor_covariance_moment():
    p = simulate_single_factor(FactorSpec(1.0, [1.0, 1.0, 1.0]), 100_000, 10, 3)
    y1, y2 = p.outcomes[:, 0], p.outcomes[:, 1]
    prod = (y1 - y1.mean()) * (y2 - y2.mean())
    se = prod.std(ddof=1) / math.sqrt(prod.size)
    assert abs(prod.mean() - 1.0) < 3 * se


def test_grouped_noiseless_and_shapes():
    p = simulate_grouped(**SPARSE, rho=0.5, noise_sd=0.0, t_total=60, t0=50, seed=2)
    np.testing.assert_array_equal(p.outcomes[:, 0], p.outcomes[:, 1])
    assert p.J == 20 and p.T == 60 and p.t0 == 50
    d = simulate_grouped(**DENSE, rho=0.5, noise_sd=0.0, t_total=40, t0=30, seed=2)
    assert d.J == 20
    for j in range(1, 6):
        np.testing.assert_array_equal(d.outcomes[:, 0], d.outcomes[:, j])
    assert not np.array_equal(d.outcomes[:, 0], d.outcomes[:, 6])
    s = simulate_grouped(**SPARSE, rho=0.5, noise_sd=0.25, t_total=110, t0=100, seed=0)
    assert s.J == 20


def test_grouped_rho_zero_autocorrelation():
    p = simulate_grouped(1, 1, 0.0, 0.0, 50_000, 10, 9)
    x = p.outcomes[:, 0] - p.outcomes[:, 0].mean()
    r1 = (x[1:] @ x[:-1]) / (x @ x)
    assert abs(r1) < 3 / math.sqrt(x.size)


def test_grouped_stationary_ar1_moments():
    p = simulate_grouped(1, 1, 0.5, 0.0, 200_000, 10, 4)
    x = p.outcomes[:, 0]
    assert x.var() == pytest.approx(1 / (1 - 0.25), rel=0.03)
    xc = x - x.mean()
    assert (xc[1:] @ xc[:-1]) / (xc @ xc) == pytest.approx(0.5, abs=0.01)


def test_grouped_validation():
    with pytest.raises(ConfigError):
        simulate_grouped(2, 1, 1.2, 0.1, 20, 10, 0)
    with pytest.raises(ConfigError):
        simulate_grouped(2, 1, 0.5, 0.1, 20, 20, 0)


def test_true_representation():
    np.testing.assert_array_equal(true_representation(**SPARSE), np.eye(20)[0])
    w = true_representation(**DENSE)
    assert w.sum() == pytest.approx(1) and np.all(w[:5] == 0.2) and np.all(w[5:] == 0)


def test_predictor_experiment_sigma_zero():
    rows = predictor_convergence_experiment(lambda J: np.ones(J), [5, 50], 0.0, 200, 1)
    assert all(r["mean_abs_error"] == 0.0 for r in rows)


def test_predictor_experiment_matches_analytic_sd():
    # E|N(0, s^2)| = s sqrt(2/pi)
    rows = predictor_convergence_experiment(lambda J: np.sqrt(np.arange(1, J + 1)), [10, 40], 1.0, 20_000, 3)
    for r in rows:
        lam = np.sqrt(np.arange(1, r["J"] + 1))
        expect = predictor_error_sd(1.0, lam, 1.0) * math.sqrt(2 / math.pi)
        assert abs(r["mean_abs_error"] - expect) < 4 * r["se"]


def test_predictor_experiment_bad_rule():
    with pytest.raises(ConfigError):
        predictor_convergence_experiment(lambda J: np.ones(J + 1), [3], 1.0, 10, 0)


def test_conditional_weights_minimise_population_risk():
    spec = FactorSpec(1.2, [0.8, -0.3, 1.5], sigma_f=1.3)
    p = simulate_single_factor(spec, 200_000, 199_000, 8)
    w = conditional_weights(spec)
    base = empirical_risk(p, w)
    g = np.random.default_rng(0)
    for _ in range(100):
        pert = w + g.normal(scale=0.05, size=w.size)
        assert empirical_risk(p, pert) >= base - 5e-4
