import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.stats import ttest_rel

from manifold_guidance.autoencoder import perfect_linear_autoencoder, perturbed_autoencoder
from manifold_guidance.diagnostics import fd_audit
from manifold_guidance.geometry import (LinearManifold, concentration_epsilon, make_manifold,
                                        off_manifold_distance, shell_band_test)
from manifold_guidance.guidance import (GuidanceSettings, StepSizeSchedule, dps_equivalent_c, dps_gradient,
                                        dps_step, guided_chain, in_window, mpgd_ae_step, mpgd_ldm_sample,
                                        mpgd_step, mpgd_z_step, plain_step, resolve_step_size, time_travel)
from manifold_guidance.harness.verify import binomial_floor
from manifold_guidance.losses import LinearInverseLoss, QuadraticLoss, random_measurement
from manifold_guidance.prior import AnalyticDenoiser, MixturePrior, random_prior, sample_prior
from manifold_guidance.sampler import NoiseSchedule, chain_rng, tweedie_estimate


class FixedEstimate:
    """Noise predictor whose Tweedie estimate is always ``x0``."""

    def __init__(self, x0):
        self.x0 = np.asarray(x0, dtype=float)

    def __call__(self, x_t, a_t):
        return (x_t - math.sqrt(a_t) * self.x0) / math.sqrt(1 - a_t)


@pytest.fixture
def schedule():
    return NoiseSchedule.linear_beta(20, 0.0)


@pytest.fixture
def den(mixture):
    return AnalyticDenoiser(mixture)


def test_zero_weight_shortcut_is_plain_step(den, schedule, rng):
    x = rng.standard_normal(16)
    loss = QuadraticLoss(rng.standard_normal(16))
    plain = plain_step(x, den, schedule, 10, noise=np.zeros(16)).x_prev
    assert_array_equal(mpgd_step(x, den, schedule, 10, loss, 0.0, noise=np.zeros(16)).x_prev, plain)


def test_hand_example_two_dims():
    m = LinearManifold(2, 1, np.array([[1.0], [0.0]]))
    s = NoiseSchedule.linear_beta(10)
    step = mpgd_step(np.array([0.3, 0.7]), FixedEstimate([1.0, 0.0]), s, 4, QuadraticLoss([3.0, 0.0]), 0.5,
                     noise=np.zeros(2))
    assert_allclose(step.x0_guided, [2.0, 0.0], atol=1e-12)
    assert off_manifold_distance(step.x0_guided, 1.0, m) == 0.0


def test_dps_zero_gradient_is_plain_step(den, schedule, rng):
    x = rng.standard_normal(16)
    loss = QuadraticLoss(np.zeros(16), np.zeros((16, 16)))
    noise = rng.standard_normal(16)
    assert_allclose(dps_step(x, den, schedule, 5, loss, 0.3, noise=noise).x_prev,
                    plain_step(x, den, schedule, 5, noise=noise).x_prev, atol=0)


@pytest.mark.parametrize("components", [1, 3])
def test_dps_gradient_matches_finite_differences(components, small_manifold, schedule, rng):
    den = AnalyticDenoiser(random_prior(small_manifold, components, seed=7))
    loss = LinearInverseLoss(rng.standard_normal((4, 16)), rng.standard_normal(4), 0.5)
    t = 8
    a = schedule[t]
    x = rng.standard_normal(16)

    def composed(v):
        return loss.value(tweedie_estimate(v, den(v, a), a))

    assert fd_audit(composed, x, dps_gradient(x, den, schedule, t, loss)) < 1e-5


def test_dps_gradient_point_mass_closed_form(small_manifold, schedule, rng):
    # d eps / d x_t = I / sqrt(1 - a), so the two chain-rule terms cancel
    den = AnalyticDenoiser(MixturePrior.gaussian(small_manifold, np.ones(3), np.zeros((3, 3))))
    loss = LinearInverseLoss(rng.standard_normal((4, 16)), rng.standard_normal(4), 0.5)
    t = 8
    a = schedule[t]
    x = rng.standard_normal(16)
    g0 = loss.gradient(tweedie_estimate(x, den(x, a), a))
    closed = g0 / math.sqrt(a) - math.sqrt(1 - a) / math.sqrt(a) * (g0 / math.sqrt(1 - a))
    assert_allclose(dps_gradient(x, den, schedule, t, loss), closed, atol=1e-10)
    assert np.max(np.abs(closed)) < 1e-10


def test_jacobian_product_counts(mixture, rng):
    s = NoiseSchedule.linear_beta(15, 0.5)
    loss = QuadraticLoss(rng.standard_normal(16))
    pair = perfect_linear_autoencoder(mixture.manifold)
    for method, expected in [("dps", 15), ("mpgd", 0), ("mpgd-ae", 0), ("mpgd-z", 0), ("ddim", 0)]:
        den = AnalyticDenoiser(mixture)
        settings = GuidanceSettings(method, StepSizeSchedule(rho=0.01), pair)
        guided_chain(rng.standard_normal(16), den, s, loss, settings, chain_rng(0, 0))
        assert den.jacobian_products == expected, method
    den = AnalyticDenoiser(mixture)
    guided_chain(rng.standard_normal(16), den, s, loss, GuidanceSettings("dps", travel=2), chain_rng(0, 0))
    assert den.jacobian_products == 45


def test_ae_tangent_gradient_matches_shortcut(den, small_manifold, schedule, rng):
    pair = perfect_linear_autoencoder(small_manifold)
    U = small_manifold.basis
    loss = QuadraticLoss(U @ rng.standard_normal(3))
    x = U @ rng.standard_normal(3)
    fixed = FixedEstimate(U @ rng.standard_normal(3))
    a = mpgd_ae_step(x, fixed, schedule, 10, pair, loss, 0.2, noise=np.zeros(16))
    b = mpgd_step(x, fixed, schedule, 10, loss, 0.2, noise=np.zeros(16))
    assert_allclose(a.x_prev, b.x_prev, atol=1e-12)


def test_ae_normal_gradient_leaves_estimate(small_manifold, schedule, rng):
    pair = perfect_linear_autoencoder(small_manifold)
    normal = small_manifold.normal_component(rng.standard_normal(16))
    loss = LinearInverseLoss(normal[None, :], [2.0])
    fixed = FixedEstimate(rng.standard_normal(16))
    step = mpgd_ae_step(rng.standard_normal(16), fixed, schedule, 10, pair, loss, 0.5, noise=np.zeros(16))
    assert_allclose(step.x0_guided, step.x0, atol=1e-12)


def test_ae_window(small_manifold, schedule, rng):
    pair = perfect_linear_autoencoder(small_manifold)
    loss = QuadraticLoss(rng.standard_normal(16))
    fixed = FixedEstimate(rng.standard_normal(16))
    x = rng.standard_normal(16)
    outside = mpgd_ae_step(x, fixed, schedule, 18, pair, loss, 0.1, active_window=(0.5, 0.3),
                           noise=np.zeros(16))
    assert_allclose(outside.x_prev, mpgd_step(x, fixed, schedule, 18, loss, 0.1, noise=np.zeros(16)).x_prev)
    inside = mpgd_ae_step(x, fixed, schedule, 8, pair, loss, 0.1, active_window=(0.5, 0.3), noise=np.zeros(16))
    assert np.linalg.norm(small_manifold.normal_component(inside.direction)) < 1e-10
    assert in_window(10, 20, (0.5, 0.3)) and in_window(6, 20, (0.5, 0.3))
    assert not in_window(5, 20, (0.5, 0.3)) and in_window(1, 20, None)


def test_z_matches_ae_for_perfect_pair(small_manifold, schedule, rng):
    pair = perfect_linear_autoencoder(small_manifold)
    loss = QuadraticLoss(rng.standard_normal(16), np.diag(rng.uniform(0.5, 2.0, 16)))
    x = rng.standard_normal(16)
    for x0 in (small_manifold.embed(rng.standard_normal(3)), rng.standard_normal(16)):
        fixed = FixedEstimate(x0)
        z = mpgd_z_step(x, fixed, schedule, 9, pair, loss, 0.3, noise=np.zeros(16))
        ae = mpgd_ae_step(x, fixed, schedule, 9, pair, loss, 0.3, noise=np.zeros(16))
        assert np.max(np.abs(z.x_prev - ae.x_prev)) < 1e-10


def test_z_zero_weight_keeps_estimate(small_manifold, schedule, rng):
    pair = perturbed_autoencoder(small_manifold, 0.1, seed=1)
    x0 = rng.standard_normal(16)
    step = mpgd_z_step(rng.standard_normal(16), FixedEstimate(x0), schedule, 9, pair,
                       QuadraticLoss(np.zeros(16)), 0.0, noise=np.zeros(16))
    assert_allclose(step.x0_guided, x0, atol=1e-12)


def test_z_perturbed_pair_monotone_loss(small_manifold, schedule, rng):
    pair = perturbed_autoencoder(small_manifold, 0.1, seed=1)
    loss = QuadraticLoss(small_manifold.embed(3 * np.ones(3)))
    x0 = small_manifold.embed(rng.standard_normal(3))
    values = [loss.value(x0)]
    for _ in range(5):
        x0 = mpgd_z_step(rng.standard_normal(16), FixedEstimate(x0), schedule, 9, pair, loss, 0.2,
                         noise=np.zeros(16)).x0_guided
        values.append(loss.value(x0))
    assert np.all(np.diff(values) < 0)


def test_ae_stays_closer_to_manifold_than_unprojected(mixture):
    m = mixture.manifold
    s = NoiseSchedule.linear_beta(30, 0.0)
    pair = perfect_linear_autoencoder(m)
    target = np.random.default_rng(0).standard_normal(16) * 3
    loss = QuadraticLoss(target)
    for chain in range(5):
        x_T = chain_rng(1, chain).standard_normal(16)
        runs = {}
        for method in ("mpgd", "mpgd-ae", "mpgd-z"):
            settings = GuidanceSettings(method, StepSizeSchedule(rho=0.05), pair)
            runs[method] = guided_chain(x_T, AnalyticDenoiser(mixture), s, loss, settings, chain_rng(1, chain))
        off = {k: off_manifold_distance(v.terminal, 1.0, m) for k, v in runs.items()}
        assert off["mpgd-ae"] < 1e-6 and off["mpgd-z"] < 1e-6
        assert off["mpgd-ae"] <= off["mpgd"]


def test_tangent_guidance_keeps_shell_concentration():
    m = make_manifold(64, 8, seed=0)
    prior = random_prior(m, 2, seed=1)
    s = NoiseSchedule.linear_beta(20, 1.0)
    pair = perfect_linear_autoencoder(m)
    loss = QuadraticLoss(m.embed(np.full(8, 2.0)))
    settings = GuidanceSettings("mpgd-ae", StepSizeSchedule(rho=0.05), pair)
    n, delta = 400, 0.05
    eps = concentration_epsilon(delta, m.codim)
    states = []
    for chain in range(n):
        gen = chain_rng(2, chain)
        run = guided_chain(gen.standard_normal(64), AnalyticDenoiser(prior), s, loss, settings, gen, chain)
        states.append(run.states())
    states = np.array(states)
    for i, t in enumerate(range(20, 0, -1)):
        assert shell_band_test(states[:, i], m, s[t], eps).mean() >= binomial_floor(delta, n)


def test_ldm_samples_on_manifold(mixture):
    m = mixture.manifold
    s = NoiseSchedule.linear_beta(20, 0.0)
    pair = perfect_linear_autoencoder(m)
    latent = AnalyticDenoiser(mixture.latent())
    flat = QuadraticLoss(np.zeros(16), np.zeros((16, 16)))
    unguided = mpgd_ldm_sample(latent, s, pair, flat, StepSizeSchedule(rho=0.1), 3, n=10)
    assert np.max(off_manifold_distance(unguided, 1.0, m)) < 1e-10
    target = m.embed(np.full(3, 4.0))
    loss = QuadraticLoss(target)
    guided = mpgd_ldm_sample(latent, s, pair, loss, StepSizeSchedule(rho=0.1), 3, n=10)
    assert np.max(off_manifold_distance(guided, 1.0, m)) < 1e-10
    assert loss.value(guided).mean() < loss.value(unguided).mean()
    assert_array_equal(guided, mpgd_ldm_sample(latent, s, pair, loss, StepSizeSchedule(rho=0.1), 3, n=10))


def test_time_travel(den, schedule, rng):
    x = rng.standard_normal(16)
    loss = QuadraticLoss(rng.standard_normal(16))

    def step_fn(x_t, gen):
        return mpgd_step(x_t, den, schedule.with_eta(1.0), 10, loss, 0.1, gen)

    once = step_fn(x, np.random.default_rng(3)).x_prev
    assert_array_equal(time_travel(step_fn, x, schedule, 10, 0, np.random.default_rng(3)).x_prev, once)
    a = time_travel(step_fn, x, schedule, 10, 3, np.random.default_rng(3)).x_prev
    b = time_travel(step_fn, x, schedule, 10, 3, np.random.default_rng(3)).x_prev
    assert_array_equal(a, b)
    assert not np.array_equal(a, once)
    with pytest.raises(ValueError):
        time_travel(step_fn, x, schedule, 10, -1, rng)


def test_resolve_step_size_examples():
    s = NoiseSchedule(np.array([1.0, 0.8, 0.5]))
    assert resolve_step_size(StepSizeSchedule(rho=0.3), 2) == (0.3, 0.3)
    rho_t, c_t = resolve_step_size(StepSizeSchedule(rho=0.3, match_dps=True), 2, noise=s)
    assert rho_t == 0.3
    assert c_t == pytest.approx(0.474341649025, rel=1e-10)
    assert dps_equivalent_c(0.3, 0.8, 0.5) == pytest.approx(0.3 / math.sqrt(0.4))
    norm = StepSizeSchedule("loss-normalized", rho=0.3)
    assert resolve_step_size(norm, 2, 4.0)[1] == pytest.approx(0.3 / (2.0 + 1e-8))
    assert resolve_step_size(norm, 2, 0.0)[1] == pytest.approx(300.0)
    assert resolve_step_size(StepSizeSchedule("linear-decay", 0.3), 1, noise=s)[1] == pytest.approx(0.15)
    with pytest.raises(ValueError):
        resolve_step_size(norm, 2, None)
    with pytest.raises(ValueError):
        StepSizeSchedule("cosine")
    with pytest.raises(ValueError):
        StepSizeSchedule(rho=0.0)


def test_settings_validation():
    with pytest.raises(ValueError, match="unknown"):
        GuidanceSettings("freedom")
    with pytest.raises(ValueError, match="autoencoder"):
        GuidanceSettings("mpgd-ae")


def test_guided_beats_unguided_on_linear_inverse():
    m = make_manifold(32, 4, seed=0)
    prior = random_prior(m, 1, seed=1)
    truth = sample_prior(prior, 1, 2)[0]
    loss = random_measurement(m, truth, 2, 0.01, seed=3)
    s = NoiseSchedule.linear_beta(50, 0.0)
    pair = perfect_linear_autoencoder(m)
    edge = 1.0 / (loss.gamma * np.linalg.eigvalsh((loss.A @ m.basis).T @ (loss.A @ m.basis)).max())
    guided = GuidanceSettings("mpgd-ae", StepSizeSchedule(rho=0.5 * edge), pair)
    plain = GuidanceSettings("ddim")
    out = {"guided": [], "plain": []}
    for chain in range(100):
        x_T = chain_rng(5, chain).standard_normal(32)
        for name, settings in (("guided", guided), ("plain", plain)):
            run = guided_chain(x_T, AnalyticDenoiser(prior), s, loss, settings, chain_rng(5, chain))
            out[name].append(loss.value(run.terminal))
    assert ttest_rel(out["guided"], out["plain"], alternative="less").pvalue < 0.01
