"""Self-checks of the geometric and numerical guarantees, as a JSON-ready report.

Every check records the measured value, its threshold and a margin that is
positive when the check passes.  Failures are report entries, never exceptions.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..autoencoder import jacobian_identity_report, perfect_linear_autoencoder, perturbed_autoencoder
from ..diagnostics import bound_audit, fd_audit
from ..geometry import concentration_epsilon, make_manifold, off_manifold_distance, shell_band_test
from ..guidance import GuidanceSettings, StepSizeSchedule, guided_chain, mpgd_ae_step
from ..losses import (GuidanceLoss, LatentLoss, LinearInverseLoss, ProjectedLoss, QuadraticLoss,
                      random_measurement)
from ..prior import (AnalyticDenoiser, MixturePrior, denoiser_jacobian, noisy_score, optimal_denoiser,
                     random_prior, sample_prior)
from ..sampler import NoiseSchedule, chain_rng, tweedie_estimate

SUITES = ("concentration", "shortcut", "autoencoder", "bound", "gradients")


@dataclass
class Check:
    name: str
    value: float
    threshold: float
    # "le": value <= threshold passes; "ge": value >= threshold passes
    sense: str = "le"

    @property
    def margin(self) -> float:
        return self.threshold - self.value if self.sense == "le" else self.value - self.threshold

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.margin >= 0)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc.update(value=float(self.value), margin=float(self.margin), passed=self.passed)
        return doc


def binomial_floor(delta: float, n: int, sigmas: float = 3.0) -> float:
    """1 - delta - sigmas * sqrt(delta (1 - delta) / n)."""
    return 1.0 - delta - sigmas * math.sqrt(delta * (1.0 - delta) / n)


def forward_samples(prior: MixturePrior, alpha_bar: float, n: int, rng) -> np.ndarray:
    rng = np.random.default_rng(rng)
    x0 = sample_prior(prior, n, rng)
    return math.sqrt(alpha_bar) * x0 + math.sqrt(1.0 - alpha_bar) * rng.standard_normal(x0.shape)


def check_concentration(d=64, k=8, alpha_bars=(0.2, 0.5, 0.8), deltas=(0.01, 0.05), n=10_000, seed=0):
    m = make_manifold(d, k, seed)
    prior = random_prior(m, 3, seed + 1)
    checks = []
    for a in alpha_bars:
        for delta in deltas:
            x_t = forward_samples(prior, a, n, (seed, int(a * 1000), int(delta * 1000)))
            rate = float(np.mean(shell_band_test(x_t, m, a, concentration_epsilon(delta, d - k))))
            checks.append(Check(f"band_rate[abar={a},delta={delta}]", rate, binomial_floor(delta, n), "ge"))
    dofs = np.arange(1, 2001)
    eps = np.array([concentration_epsilon(0.05, int(v)) for v in dofs])
    checks.append(Check("epsilon_monotone_in_dof", float(np.max(np.diff(eps))), 0.0))
    return checks


def shortcut_run(chains=100, T=50, d=64, k=8, delta=0.05, seed=0, eta=0.0, window=(1.0, 0.0)):
    """MPGD-AE with the perfect pair on a linear-inverse problem.

    Returns (per-t band pass rates over chains, terminal off-manifold norms).
    """
    m = make_manifold(d, k, seed)
    prior = random_prior(m, 2, seed + 1)
    loss = random_measurement(m, sample_prior(prior, 1, seed + 2)[0], 4, 0.05**2, seed + 3)
    schedule = NoiseSchedule.linear_beta(T, eta)
    settings = GuidanceSettings("mpgd-ae", StepSizeSchedule("constant", 1e-3),
                                perfect_linear_autoencoder(m), window)
    eps = concentration_epsilon(delta, d - k)
    passes = np.zeros(T)
    terminal = []
    for i in range(chains):
        gen = chain_rng(seed, i)
        record = guided_chain(gen.standard_normal(d), AnalyticDenoiser(prior), schedule, loss, settings,
                              gen, i)
        for step in record.steps[:-1]:
            passes[T - step.t] += bool(shell_band_test(step.x_t, m, schedule[step.t], eps))
        terminal.append(float(off_manifold_distance(record.terminal, 1.0, m)))
    return passes / chains, np.array(terminal)


def check_shortcut(chains=100, T=50, seed=0, delta=0.05):
    d, k = 64, 8
    m = make_manifold(d, k, seed)
    prior = random_prior(m, 3, seed + 1)
    rng = np.random.default_rng(seed)
    tangency = 0.0
    for a in np.linspace(0.05, 0.95, 20):
        x_t = forward_samples(prior, a, 50, rng) + rng.standard_normal((50, d))
        x0 = tweedie_estimate(x_t, optimal_denoiser(prior, a, x_t), a)
        rel = off_manifold_distance(x0, 1.0, m) / (1.0 + np.linalg.norm(x0, axis=1))
        tangency = max(tangency, float(np.max(rel)))
    # projected guidance moves x_{t-1} only along the manifold
    pair = perfect_linear_autoencoder(m)
    loss = random_measurement(m, sample_prior(prior, 1, rng)[0], 4, 0.05**2, seed)
    schedule = NoiseSchedule.linear_beta(T)
    direction = 0.0
    for t in range(1, T + 1):
        x_t = forward_samples(prior, schedule[t], 1, rng)[0]
        step = mpgd_ae_step(x_t, AnalyticDenoiser(prior), schedule, t, pair, loss, 1e-3, noise=np.zeros(d))
        direction = max(direction, float(off_manifold_distance(step.direction, 1.0, m))
                        / max(np.linalg.norm(step.direction), 1e-300))
    rates, terminal = shortcut_run(chains, T, d, k, delta, seed)
    return [
        Check("tweedie_off_manifold_relative", tangency, 1e-8),
        Check("projected_direction_normal_fraction", direction, 1e-10),
        Check("min_band_rate_over_t", float(rates.min()), 1.0 - delta, "ge"),
        Check("terminal_off_manifold_max", float(terminal.max()), 1e-6),
    ]


def autoencoder_residuals(probes=1000, d=64, k=8, seed=0):
    """Worst identity gap, principal-angle gap and projected-gradient normal part."""
    m = make_manifold(d, k, seed)
    pair = perfect_linear_autoencoder(m)
    rng = np.random.default_rng(seed)
    gap = angle = normal = 0.0
    loss = LinearInverseLoss(rng.standard_normal((5, d)), rng.standard_normal(5), 1.0)
    for _ in range(probes):
        x = 3.0 * rng.standard_normal(d)
        g, a = jacobian_identity_report(pair, x)
        gap, angle = max(gap, g), max(angle, a)
        grad = ProjectedLoss(loss, pair).gradient(x)
        normal = max(normal, float(off_manifold_distance(grad, 1.0, m)))
    return gap, angle, normal


def check_autoencoder(probes=1000, seed=0):
    gap, angle, normal = autoencoder_residuals(probes, seed=seed)
    return [
        Check("max_identity_gap", gap, 1e-10),
        Check("max_principal_angle", angle, 1e-8),
        Check("max_projected_gradient_normal", normal, 1e-10),
    ]


def random_bound_audits(steps=100, d=32, k=4, seed=0):
    """BoundAudit for paired steps at random levels with random quadratic losses."""
    rng = np.random.default_rng(seed)
    m = make_manifold(d, k, seed)
    prior = random_prior(m, 3, seed + 1)
    schedule = NoiseSchedule.linear_beta(100, 1.0)
    denoiser = AnalyticDenoiser(prior)
    audits = []
    for _ in range(steps):
        t = int(rng.integers(1, schedule.T + 1))
        x_t = forward_samples(prior, schedule[t], 1, rng)[0]
        a = rng.standard_normal((d, d)) / math.sqrt(d)
        loss = QuadraticLoss(rng.standard_normal(d), a @ a.T + 0.1 * np.eye(d))
        rho = float(10 ** rng.uniform(-4, -1))
        audits.append(bound_audit(x_t, denoiser, schedule, t, loss, rho, rng.standard_normal(d)))
    return audits


class _LinearLoss(GuidanceLoss):
    def __init__(self, w):
        self.w = np.asarray(w, dtype=float)

    def value(self, x):
        return np.asarray(x) @ self.w

    def gradient(self, x):
        return self.w


def check_bound(steps=100, seed=0):
    audits = random_bound_audits(steps, seed=seed)
    excess = max(a.lhs - a.rhs for a in audits)
    violations = sum(not a.holds for a in audits)
    # single zero-covariance prior with a linear loss: both sides agree in closed form
    d, k = 16, 3
    m = make_manifold(d, k, seed)
    prior = MixturePrior.gaussian(m, np.ones(k), np.zeros((k, k)))
    schedule = NoiseSchedule.linear_beta(20)
    rng = np.random.default_rng(seed)
    linear = _LinearLoss(rng.standard_normal(d))
    w = linear.w
    gap = 0.0
    for t in range(1, schedule.T + 1):
        x_t = rng.standard_normal(d)
        audit = bound_audit(x_t, AnalyticDenoiser(prior), schedule, t, linear, 1e-2, rng.standard_normal(d))
        kappa = np.linalg.norm(w) / math.sqrt(1 - schedule[t])
        gap = max(gap, abs(audit.lhs - audit.rhs) / audit.rhs, abs(audit.kappa - kappa) / kappa)
    return [
        Check("violations", float(violations), 0.0),
        Check("max_lhs_minus_rhs", float(excess), 1e-9),
        Check("zero_cov_linear_relative_gap", gap, 1e-9),
    ]


def check_gradients(probes=100, seed=0, loss_tol=1e-5, denoiser_tol=1e-4):
    rng = np.random.default_rng(seed)
    d, k = 24, 4
    m = make_manifold(d, k, seed)
    prior = random_prior(m, 3, seed + 1)
    pair = perturbed_autoencoder(m, 0.1, seed)
    A = rng.standard_normal((6, d))
    base = LinearInverseLoss(A, rng.standard_normal(6), 2.0)
    b = rng.standard_normal((d, d)) / math.sqrt(d)
    losses = {
        "linear_inverse": base,
        "quadratic": QuadraticLoss(rng.standard_normal(d), b @ b.T + np.eye(d)),
        "projected": ProjectedLoss(base, pair),
    }
    worst = {name: 0.0 for name in list(losses) + ["latent", "denoiser", "score"]}
    latent = LatentLoss(base, pair)
    for _ in range(probes):
        x = rng.standard_normal(d)
        for name, loss in losses.items():
            worst[name] = max(worst[name], fd_audit(loss.value, x, loss.gradient(x)))
        z = rng.standard_normal(k)
        worst["latent"] = max(worst["latent"], fd_audit(latent.value, z, latent.gradient(z)))
        a = float(rng.uniform(0.05, 0.95))
        worst["denoiser"] = max(worst["denoiser"], fd_audit(lambda v: optimal_denoiser(prior, a, v), x,
                                                            denoiser_jacobian(prior, a, x)))
        jac = denoiser_jacobian(prior, a, x)
        worst["score"] = max(worst["score"], fd_audit(lambda v: noisy_score(prior, a, v), x,
                                                      -jac / math.sqrt(1 - a)))
    return [Check(f"fd_{name}", value, denoiser_tol if name in ("denoiser", "score") else loss_tol)
            for name, value in worst.items()]


RUNNERS = {
    "concentration": check_concentration,
    "shortcut": check_shortcut,
    "autoencoder": check_autoencoder,
    "bound": check_bound,
    "gradients": check_gradients,
}


def verify(suite: str = "all", seed: int = 0) -> dict:
    """Run one suite (or all) and return {"suite", "passed", "suites": {name: {...}}}."""
    names = SUITES if suite == "all" else (suite,)
    unknown = [s for s in names if s not in RUNNERS]
    if unknown:
        raise ValueError(f"unknown suite {unknown[0]!r}; expected one of {SUITES + ('all',)}")
    report = {"suite": suite, "seed": seed, "suites": {}}
    for name in names:
        try:
            checks = [c.to_dict() for c in RUNNERS[name](seed=seed)]
            error = None
        except Exception as exc:  # a crash is a failed check, not a crash of the report
            checks, error = [], f"{type(exc).__name__}: {exc}"
        entry = {"passed": error is None and all(c["passed"] for c in checks), "checks": checks}
        if error:
            entry["error"] = error
        report["suites"][name] = entry
    report["passed"] = all(s["passed"] for s in report["suites"].values())
    return report
