"""Gaussian-mixture priors supported on a linear manifold.

Everything is evaluated in closed form.  With U the manifold basis, a component
N(U mu_i, U Sigma_i U^T) pushed through the forward process has covariance

    C_i = abar U Sigma_i U^T + (1 - abar) I
        = U S_i U^T + (1 - abar) P_perp,     S_i = abar Sigma_i + (1 - abar) I_k,

so every density, score and Hessian splits into a k-dimensional tangent part
(component dependent) and an isotropic normal part shared by all components.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .geometry import LinearManifold, off_manifold_distance

SYM_TOL = 1e-12
PSD_TOL = 1e-12
CHOL_JITTER = 1e-12
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class MixturePrior:
    manifold: LinearManifold
    weights: np.ndarray
    latent_means: np.ndarray
    latent_covs: np.ndarray

    def __post_init__(self):
        k = self.manifold.k
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        means = np.asarray(self.latent_means, dtype=float).reshape(len(w), k)
        covs = np.asarray(self.latent_covs, dtype=float).reshape(len(w), k, k)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        for i, cov in enumerate(covs):
            if np.max(np.abs(cov - cov.T), initial=0.0) > SYM_TOL:
                raise ValueError(f"latent covariance {i} is not symmetric")
            if np.linalg.eigvalsh(cov).min() < -PSD_TOL:
                raise ValueError(f"latent covariance {i} is not positive semidefinite")
        for arr in (w, means, covs):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "latent_means", means)
        object.__setattr__(self, "latent_covs", covs)

    @classmethod
    def gaussian(cls, manifold, mean, cov) -> "MixturePrior":
        return cls(manifold, [1.0], [mean], [cov])

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def ambient_means(self) -> np.ndarray:
        return self.manifold.embed(self.latent_means)

    def latent(self) -> "MixturePrior":
        """The same mixture expressed in latent coordinates z = U^T x over R^k."""
        return MixturePrior(LinearManifold.ambient(self.manifold.k), self.weights,
                            self.latent_means, self.latent_covs)

    def to_dict(self, manifold_ref: str | None = None) -> dict:
        return {
            "manifold_ref": manifold_ref,
            "weights": self.weights.tolist(),
            "latent_means": self.latent_means.tolist(),
            "latent_covs": self.latent_covs.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict, manifold: LinearManifold) -> "MixturePrior":
        return cls(manifold, doc["weights"], doc["latent_means"], doc["latent_covs"])


@dataclass(frozen=True)
class GaussianPosterior:
    mean: np.ndarray
    covariance: np.ndarray
    latent_mean: np.ndarray
    latent_covariance: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def random_prior(manifold: LinearManifold, n_components: int, seed, mean_scale: float = 2.0,
                 cov_scale: float = 1.0) -> MixturePrior:
    """A random full-rank mixture on ``manifold``; reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    k = manifold.k
    weights = rng.dirichlet(np.full(n_components, 5.0))
    means = mean_scale * rng.standard_normal((n_components, k))
    covs = []
    for _ in range(n_components):
        a = rng.standard_normal((k, k)) / math.sqrt(k)
        covs.append(cov_scale * (a @ a.T + 0.1 * np.eye(k)))
    return MixturePrior(manifold, weights, means, np.array(covs))


def sample_prior(prior: MixturePrior, n: int, rng) -> np.ndarray:
    """Draw ``n`` points from the mixture; returns an (n, d) array on the manifold."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng)
    labels = rng.choice(prior.n_components, size=n, p=prior.weights)
    k = prior.manifold.k
    z = np.empty((n, k))
    for i in range(prior.n_components):
        idx = np.flatnonzero(labels == i)
        noise = rng.standard_normal((len(idx), k))
        z[idx] = prior.latent_means[i] + noise @ _psd_sqrt(prior.latent_covs[i]).T
    return prior.manifold.embed(z)


def _cholesky(mat: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        return np.linalg.cholesky(mat + CHOL_JITTER * np.eye(mat.shape[-1]))


class _NoisyMixture:
    """Per-noise-level factorisation shared by the density, score and Hessian."""

    def __init__(self, prior: MixturePrior, alpha_bar: float):
        self.prior = prior
        self.alpha_bar = alpha_bar
        self.noise_var = 1.0 - alpha_bar
        k = prior.manifold.k
        self.latent_cov = alpha_bar * prior.latent_covs + self.noise_var * np.eye(k)
        self.chol = np.array([_cholesky(c) for c in self.latent_cov])
        eye = np.eye(k)
        self.prec = np.array([np.linalg.solve(c.T, np.linalg.solve(c, eye)) for c in self.chol])
        self.half_logdet = np.log(np.diagonal(self.chol, axis1=-2, axis2=-1)).sum(-1)
        self.scaled_means = math.sqrt(alpha_bar) * prior.latent_means

    def split(self, x):
        m = self.prior.manifold
        z = m.coordinates(x)
        return z, x - m.embed(z)

    def component_terms(self, z):
        """Log-weighted latent densities (..., m) and latent scores a_i (..., m, k)."""
        diff = z[..., None, :] - self.scaled_means
        a = -np.einsum("mij,...mj->...mi", self.prec, diff)
        maha = -np.einsum("...mi,...mi->...m", diff, a)
        k = self.prior.manifold.k
        log_comp = -0.5 * maha - self.half_logdet - 0.5 * k * LOG_2PI
        with np.errstate(divide="ignore"):
            log_w = np.log(self.prior.weights)
        return log_w + log_comp, a

    def responsibilities(self, z):
        terms, a = self.component_terms(z)
        return np.exp(terms - logsumexp(terms, axis=-1, keepdims=True)), a

    def score(self, x):
        z, perp = self.split(x)
        r, a = self.responsibilities(z)
        tangent = np.einsum("...m,...mk->...k", r, a)
        return self.prior.manifold.embed(tangent) - perp / self.noise_var

    def hessian(self, x):
        """Hessian of log p_t at a single point x (d x d)."""
        z, _ = self.split(x)
        r, a = self.responsibilities(z)
        mean_a = r @ a
        centred = a - mean_a
        latent = -np.einsum("m,mij->ij", r, self.prec) + (centred.T * r) @ centred
        u = self.prior.manifold.basis
        d = u.shape[0]
        return u @ latent @ u.T - (np.eye(d) - u @ u.T) / self.noise_var

    def hessian_vp(self, x, v):
        """Hessian-vector product without forming the d x d matrix."""
        m = self.prior.manifold
        z, _ = self.split(x)
        r, a = self.responsibilities(z)
        vz = m.coordinates(v)
        centred = a - r @ a
        latent = -np.einsum("m,mij,j->i", r, self.prec, vz) + (centred.T * r) @ (centred @ vz)
        return m.embed(latent) - (v - m.embed(vz)) / self.noise_var


def _check_alpha(alpha_bar_t: float):
    if not 0 < alpha_bar_t < 1:
        raise ValueError(f"alpha_bar_t must lie strictly inside (0, 1), got {alpha_bar_t}")


def noisy_log_density(prior: MixturePrior, alpha_bar_t: float, x_t):
    """log p_t(x_t) for the forward-noised mixture, log-sum-exp stabilised.

    At alpha_bar_t = 1 the ambient density does not exist (the support is
    k-dimensional); the value returned is then the density on the manifold
    with respect to k-dimensional Lebesgue measure, which requires every
    component covariance to be positive definite and ``x_t`` to lie on M.
    """
    x_t = np.asarray(x_t, dtype=float)
    if not 0 < alpha_bar_t <= 1:
        raise ValueError(f"alpha_bar_t must lie in (0, 1], got {alpha_bar_t}")
    m = prior.manifold
    if alpha_bar_t == 1.0:
        if min(np.linalg.eigvalsh(c).min() for c in prior.latent_covs) <= 0:
            raise ValueError("singular component covariance at alpha_bar_t = 1")
        if np.any(off_manifold_distance(x_t, 1.0, m) > 1e-9 * (1 + np.linalg.norm(x_t, axis=-1))):
            raise ValueError("clean density is only defined on the manifold")
        fam = _NoisyMixture(prior, alpha_bar_t)
        terms, _ = fam.component_terms(m.coordinates(x_t))
        return logsumexp(terms, axis=-1)
    fam = _NoisyMixture(prior, alpha_bar_t)
    z, perp = fam.split(x_t)
    terms, _ = fam.component_terms(z)
    var = fam.noise_var
    normal = -0.5 * np.sum(perp**2, axis=-1) / var - 0.5 * m.codim * (LOG_2PI + math.log(var))
    return logsumexp(terms, axis=-1) + normal


def noisy_score(prior: MixturePrior, alpha_bar_t: float, x_t):
    """grad_x log p_t(x_t); accepts (..., d)."""
    _check_alpha(alpha_bar_t)
    return _NoisyMixture(prior, alpha_bar_t).score(np.asarray(x_t, dtype=float))


def optimal_denoiser(prior: MixturePrior, alpha_bar_t: float, x_t):
    """The MMSE noise predictor eps*(x_t) = -sqrt(1 - abar) grad log p_t(x_t)."""
    return -math.sqrt(1.0 - alpha_bar_t) * noisy_score(prior, alpha_bar_t, x_t)


def denoiser_jacobian(prior: MixturePrior, alpha_bar_t: float, x_t) -> np.ndarray:
    """d eps*/d x_t = -sqrt(1 - abar) Hess log p_t(x_t) at a single point."""
    _check_alpha(alpha_bar_t)
    x_t = np.asarray(x_t, dtype=float)
    return -math.sqrt(1.0 - alpha_bar_t) * _NoisyMixture(prior, alpha_bar_t).hessian(x_t)


def denoiser_vjp(prior: MixturePrior, alpha_bar_t: float, x_t, v) -> np.ndarray:
    """v^T (d eps*/d x_t), returned as a d-vector (the Jacobian is symmetric)."""
    _check_alpha(alpha_bar_t)
    fam = _NoisyMixture(prior, alpha_bar_t)
    return -math.sqrt(1.0 - alpha_bar_t) * fam.hessian_vp(np.asarray(x_t, dtype=float),
                                                         np.asarray(v, dtype=float))


class AnalyticDenoiser:
    """Exact noise predictor for a mixture prior, with a Jacobian-product counter.

    Not thread safe: give each chain its own instance (``fresh()``).
    """

    def __init__(self, prior: MixturePrior):
        self.prior = prior
        self.jacobian_products = 0
        self.evaluations = 0

    def fresh(self) -> "AnalyticDenoiser":
        return AnalyticDenoiser(self.prior)

    def __call__(self, x_t, alpha_bar_t: float):
        self.evaluations += 1
        return optimal_denoiser(self.prior, alpha_bar_t, x_t)

    def score(self, x_t, alpha_bar_t: float):
        return noisy_score(self.prior, alpha_bar_t, x_t)

    def jacobian(self, x_t, alpha_bar_t: float) -> np.ndarray:
        return denoiser_jacobian(self.prior, alpha_bar_t, x_t)

    def vjp(self, x_t, alpha_bar_t: float, v) -> np.ndarray:
        self.jacobian_products += 1
        return denoiser_vjp(self.prior, alpha_bar_t, x_t, v)


def tweedie_on_manifold_check(prior: MixturePrior, alpha_bar_t: float, x_t, manifold=None):
    """Normal-component norm of the posterior-mean estimate x_{0|t}.

    Measured against ``manifold`` (default: the prior's own support).
    """
    eps = optimal_denoiser(prior, alpha_bar_t, x_t)
    x0 = (np.asarray(x_t) - math.sqrt(1.0 - alpha_bar_t) * eps) / math.sqrt(alpha_bar_t)
    return off_manifold_distance(x0, 1.0, prior.manifold if manifold is None else manifold)


def exact_linear_posterior(prior: MixturePrior, A, y, noise_var: float) -> GaussianPosterior:
    """Posterior of x given y = A x + z, z ~ N(0, noise_var I), for a Gaussian prior.

    Solved in latent coordinates (B = A U) in covariance form, so singular
    prior covariances are allowed; the result is embedded back on the manifold.
    """
    if prior.n_components != 1:
        raise ValueError("the conjugate oracle needs a single-component prior")
    if not noise_var > 0:
        raise ValueError("noise_var must be positive")
    m = prior.manifold
    A = np.atleast_2d(np.asarray(A, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    mu, sigma = prior.latent_means[0], prior.latent_covs[0]
    b = A @ m.basis
    innov = b @ sigma @ b.T + noise_var * np.eye(len(y))
    gain = np.linalg.solve(innov, b @ sigma).T
    mean_z = mu + gain @ (y - b @ mu)
    cov_z = sigma - gain @ b @ sigma
    cov_z = 0.5 * (cov_z + cov_z.T)
    cov_x = m.basis @ cov_z @ m.basis.T
    return GaussianPosterior(m.embed(mean_z), 0.5 * (cov_x + cov_x.T), mean_z, cov_z)
