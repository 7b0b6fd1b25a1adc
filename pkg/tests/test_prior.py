import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy.stats import multivariate_normal

from manifold_guidance.diagnostics import fd_audit
from manifold_guidance.geometry import LinearManifold, make_manifold, off_manifold_distance
from manifold_guidance.prior import (AnalyticDenoiser, MixturePrior, denoiser_jacobian, denoiser_vjp,
                                     exact_linear_posterior, noisy_log_density, noisy_score,
                                     optimal_denoiser, random_prior, sample_prior,
                                     tweedie_on_manifold_check)


def point_mass(m, mean):
    k = m.k
    return MixturePrior.gaussian(m, mean, np.zeros((k, k)))


def test_validation():
    m = make_manifold(5, 2, seed=0)
    with pytest.raises(ValueError, match="sum to 1"):
        MixturePrior(m, [0.5, 0.4], np.zeros((2, 2)), np.stack([np.eye(2)] * 2))
    with pytest.raises(ValueError, match="symmetric"):
        MixturePrior.gaussian(m, np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError, match="semidefinite"):
        MixturePrior.gaussian(m, np.zeros(2), -np.eye(2))


def test_ambient_means_on_manifold(mixture):
    assert np.all(off_manifold_distance(mixture.ambient_means, 1.0, mixture.manifold) < 1e-12)


def test_sample_point_mass_is_exact(small_manifold):
    prior = point_mass(small_manifold, np.array([1.0, -2.0, 0.5]))
    x = sample_prior(prior, 5, 0)
    assert_allclose(x, np.tile(small_manifold.embed(np.array([1.0, -2.0, 0.5])), (5, 1)), atol=1e-15)


def test_sample_frequencies_and_tangency():
    m = make_manifold(6, 1, seed=0)
    prior = MixturePrior(m, [0.5, 0.5], [[-10.0], [10.0]], [[[1.0]], [[1.0]]])
    n = 10_000
    x = sample_prior(prior, n, 3)
    freq = np.mean(m.coordinates(x)[:, 0] > 0)
    assert abs(freq - 0.5) <= 3 * math.sqrt(0.25 / n)
    assert np.max(off_manifold_distance(x, 1.0, m)) < 1e-12


def test_log_density_point_mass_closed_form(small_manifold, rng):
    mu = np.array([0.3, -1.0, 2.0])
    prior = point_mass(small_manifold, mu)
    a = 0.4
    x = rng.standard_normal(16)
    ref = multivariate_normal(math.sqrt(a) * small_manifold.embed(mu), (1 - a) * np.eye(16)).logpdf(x)
    assert noisy_log_density(prior, a, x) == pytest.approx(ref, rel=1e-12)


def test_log_density_symmetric_components():
    m = make_manifold(5, 2, seed=1)
    prior = MixturePrior(m, [0.5, 0.5], [[1.0, 0.0], [-1.0, 0.0]], [np.eye(2), np.eye(2)])
    swapped = MixturePrior(m, [0.5, 0.5], [[-1.0, 0.0], [1.0, 0.0]], [np.eye(2), np.eye(2)])
    x = np.random.default_rng(0).standard_normal(5)
    midpoint = x - m.embed(m.coordinates(x)) + m.embed([0.0, 0.7])
    assert noisy_log_density(prior, 0.6, midpoint) == pytest.approx(noisy_log_density(swapped, 0.6, midpoint))
    assert noisy_log_density(prior, 0.6, x) == pytest.approx(noisy_log_density(swapped, 0.6, x))


def test_log_density_matches_monte_carlo_convolution():
    m = make_manifold(3, 1, seed=2)
    prior = random_prior(m, 2, seed=3, mean_scale=1.0)
    a, n = 0.5, 1_000_000
    rng = np.random.default_rng(9)
    x_t = np.array([0.4, -0.2, 0.3])
    x = sample_prior(prior, n, rng)
    dens = multivariate_normal(np.zeros(3), (1 - a) * np.eye(3)).pdf(x_t - math.sqrt(a) * x)
    mean, se = dens.mean(), dens.std() / math.sqrt(n)
    assert abs(math.exp(noisy_log_density(prior, a, x_t)) - mean) < 3 * se


def test_log_density_clean_level(small_manifold):
    prior = random_prior(small_manifold, 2, seed=0)
    z = np.array([0.1, 0.2, -0.3])
    expected = np.log(sum(w * multivariate_normal(mu, c).pdf(z) for w, mu, c in
                          zip(prior.weights, prior.latent_means, prior.latent_covs)))
    assert noisy_log_density(prior, 1.0, small_manifold.embed(z)) == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ValueError, match="on the manifold"):
        noisy_log_density(prior, 1.0, np.ones(16))
    with pytest.raises(ValueError, match="singular"):
        noisy_log_density(point_mass(small_manifold, z), 1.0, small_manifold.embed(z))


def test_denoiser_point_mass_closed_form(small_manifold, rng):
    mu = np.array([1.0, 2.0, -1.0])
    prior = point_mass(small_manifold, mu)
    a = 0.3
    x = rng.standard_normal(16)
    centre = math.sqrt(a) * small_manifold.embed(mu)
    assert_allclose(optimal_denoiser(prior, a, x), (x - centre) / math.sqrt(1 - a), atol=1e-12)
    assert_allclose(optimal_denoiser(prior, a, centre), 0.0, atol=1e-12)
    assert_allclose(denoiser_jacobian(prior, a, x), np.eye(16) / math.sqrt(1 - a), atol=1e-12)


def test_point_mass_denoiser_recovers_noise(small_manifold, rng):
    mu = rng.standard_normal(3)
    prior = point_mass(small_manifold, mu)
    for a in (0.05, 0.5, 0.95):
        eps = rng.standard_normal(16)
        x_t = math.sqrt(a) * small_manifold.embed(mu) + math.sqrt(1 - a) * eps
        assert np.max(np.abs(optimal_denoiser(prior, a, x_t) - eps)) < 1e-10


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), a=st.floats(0.02, 0.98))
def test_score_matches_density_finite_differences(seed, a):
    m = make_manifold(6, 2, seed=seed % 7)
    prior = random_prior(m, 3, seed=seed)
    x = np.random.default_rng(seed).standard_normal(6)
    err = fd_audit(lambda v: noisy_log_density(prior, a, v), x, noisy_score(prior, a, x))
    assert err < 1e-5
    eps = optimal_denoiser(prior, a, x)
    assert_allclose(eps, -math.sqrt(1 - a) * noisy_score(prior, a, x))


def test_denoiser_jacobian_matches_finite_differences(mixture, rng):
    for a in (0.1, 0.5, 0.9):
        x = 2 * rng.standard_normal(16)
        err = fd_audit(lambda v: optimal_denoiser(mixture, a, v), x, denoiser_jacobian(mixture, a, x))
        assert err < 1e-4


def test_jacobian_symmetry_and_vjp(mixture, rng):
    x, v = rng.standard_normal(16), rng.standard_normal(16)
    jac = denoiser_jacobian(mixture, 0.4, x)
    assert np.max(np.abs(jac - jac.T)) < 1e-10
    assert_allclose(denoiser_vjp(mixture, 0.4, x, v), v @ jac, atol=1e-12)
    single = random_prior(mixture.manifold, 1, seed=0)
    jac = denoiser_jacobian(single, 0.4, x)
    assert np.max(np.abs(jac - jac.T)) < 1e-10


def test_denoiser_rejects_endpoints(mixture):
    for a in (0.0, 1.0):
        with pytest.raises(ValueError):
            optimal_denoiser(mixture, a, np.zeros(16))


def test_analytic_denoiser_counts_jacobian_products(mixture):
    den = AnalyticDenoiser(mixture)
    x = np.ones(16)
    den(x, 0.5)
    den.jacobian(x, 0.5)
    assert den.jacobian_products == 0 and den.evaluations == 1
    den.vjp(x, 0.5, x)
    assert den.jacobian_products == 1
    assert den.fresh().jacobian_products == 0


def test_tweedie_tangency(mixture, rng):
    for a in np.linspace(0.01, 0.99, 15):
        x_t = 5 * rng.standard_normal(16)
        assert tweedie_on_manifold_check(mixture, a, x_t) < 1e-8
        on = mixture.manifold.embed(rng.standard_normal(3))
        assert tweedie_on_manifold_check(mixture, a, on) < 1e-10


def test_tweedie_off_manifold_mean_is_detected():
    # prior lives on a 2-d plane; the reference manifold is one of its axes
    wide = make_manifold(6, 2, seed=0)
    axis = LinearManifold(6, 1, wide.basis[:, :1])
    prior = MixturePrior(wide, [0.5, 0.5], [[0.0, 0.0], [0.0, 3.0]], [np.eye(2), np.eye(2)])
    assert tweedie_on_manifold_check(prior, 0.5, np.zeros(6), manifold=axis) > 0.1


def test_posterior_noiseless_identity_measurement(small_manifold, rng):
    prior = MixturePrior.gaussian(small_manifold, np.zeros(3), np.eye(3))
    y = rng.standard_normal(16)
    post = exact_linear_posterior(prior, np.eye(16), y, 1e-8)
    assert_allclose(post.mean, small_manifold.project(y), atol=1e-6)


def test_posterior_uninformative_measurement(small_manifold):
    prior = random_prior(small_manifold, 1, seed=4)
    post = exact_linear_posterior(prior, np.zeros((2, 16)), np.ones(2), 0.1)
    assert_allclose(post.latent_mean, prior.latent_means[0], atol=1e-14)
    assert_allclose(post.latent_covariance, prior.latent_covs[0], atol=1e-14)


def test_posterior_normal_equations_and_psd(small_manifold, rng):
    prior = random_prior(small_manifold, 1, seed=4)
    A, y, s2 = rng.standard_normal((5, 16)), rng.standard_normal(5), 0.05
    post = exact_linear_posterior(prior, A, y, s2)
    assert np.linalg.eigvalsh(post.covariance).min() > -1e-12
    # information form: (S^-1 + B^T B / s2) z = S^-1 mu + B^T y / s2
    B = A @ small_manifold.basis
    prec = np.linalg.inv(prior.latent_covs[0])
    lhs = (prec + B.T @ B / s2) @ post.latent_mean
    rhs = prec @ prior.latent_means[0] + B.T @ y / s2
    assert np.max(np.abs(lhs - rhs)) < 1e-8


def test_posterior_matches_importance_sampling():
    m = make_manifold(2, 1, seed=3)
    prior = MixturePrior.gaussian(m, [0.5], [[1.5]])
    a_row = np.array([[0.8, -0.6]])
    y, s2, n = np.array([1.1]), 0.3, 1_000_000
    x = sample_prior(prior, n, 21)
    w = np.exp(-0.5 * (y[0] - x @ a_row[0]) ** 2 / s2)
    w /= w.sum()
    mean = w @ x
    se = np.sqrt(w**2 @ (x - mean) ** 2)
    post = exact_linear_posterior(prior, a_row, y, s2)
    assert np.all(np.abs(post.mean - mean) <= 3 * se)


def test_posterior_errors(mixture):
    with pytest.raises(ValueError, match="single-component"):
        exact_linear_posterior(mixture, np.eye(16), np.zeros(16), 0.1)
    single = random_prior(mixture.manifold, 1, seed=0)
    with pytest.raises(ValueError):
        exact_linear_posterior(single, np.eye(16), np.zeros(16), 0.0)


def test_latent_view_and_dict_round_trip(mixture):
    lat = mixture.latent()
    assert lat.manifold.d == lat.manifold.k == 3
    x = mixture.manifold.embed(np.array([0.2, -0.1, 0.4]))
    z = mixture.manifold.coordinates(x)
    assert_allclose(mixture.manifold.coordinates(optimal_denoiser(mixture, 0.5, x)),
                    optimal_denoiser(lat, 0.5, z), atol=1e-12)
    again = MixturePrior.from_dict(mixture.to_dict(), mixture.manifold)
    assert_allclose(again.latent_covs, mixture.latent_covs)
