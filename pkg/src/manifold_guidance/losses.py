"""Differentiable guidance losses L(x; y).

Each loss carries its own condition ``y`` and exposes ``value(x)`` and
``gradient(x)``; both broadcast over leading batch axes where noted.
"""

from __future__ import annotations

import numpy as np

from .autoencoder import projected_gradient


class GuidanceLoss:
    y = None

    def value(self, x):
        raise NotImplementedError

    def gradient(self, x):
        raise NotImplementedError

    def __call__(self, x):
        return self.value(x)


class LinearInverseLoss(GuidanceLoss):
    """gamma * ||y - A x||^2 for a noisy linear measurement y = A x + z."""

    def __init__(self, A, y, gamma: float = 1.0):
        if not gamma > 0:
            raise ValueError("gamma must be positive")
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.y = np.atleast_1d(np.asarray(y, dtype=float))
        if self.A.shape[0] != self.y.shape[0]:
            raise ValueError("A and y disagree on the measurement dimension")
        self.gamma = float(gamma)

    def residual(self, x):
        return self.y - np.asarray(x) @ self.A.T

    def value(self, x):
        r = self.residual(x)
        return self.gamma * np.sum(r * r, axis=-1)

    def gradient(self, x):
        return -2.0 * self.gamma * self.residual(x) @ self.A


class QuadraticLoss(GuidanceLoss):
    """0.5 * (x - target)^T Q (x - target); Q defaults to the identity."""

    def __init__(self, target, Q=None):
        self.y = self.target = np.asarray(target, dtype=float)
        d = self.target.shape[-1]
        self.Q = np.eye(d) if Q is None else np.asarray(Q, dtype=float)
        if self.Q.shape != (d, d) or np.max(np.abs(self.Q - self.Q.T)) > 1e-12:
            raise ValueError("Q must be a symmetric d x d matrix")

    def value(self, x):
        diff = np.asarray(x) - self.target
        return 0.5 * np.sum((diff @ self.Q) * diff, axis=-1)

    def gradient(self, x):
        return (np.asarray(x) - self.target) @ self.Q


class ProjectedLoss(GuidanceLoss):
    """x -> L(D(E(x))); its gradient is the autoencoder-projected gradient."""

    def __init__(self, loss: GuidanceLoss, pair):
        self.loss, self.pair, self.y = loss, pair, loss.y

    def value(self, x):
        return self.loss.value(self.pair.reconstruct(x))

    def gradient(self, x):
        return projected_gradient(self.pair, x, self.loss)


class LatentLoss(GuidanceLoss):
    """z -> L(D(z)) on the latent space of an autoencoder."""

    def __init__(self, loss: GuidanceLoss, pair):
        self.loss, self.pair, self.y = loss, pair, loss.y

    def value(self, z):
        return self.loss.value(self.pair.decode(z))

    def gradient(self, z):
        g = self.loss.gradient(self.pair.decode(z))
        return self.pair.decode_vjp(z, g)


def random_measurement(manifold, x_true, m: int, noise_var: float, seed, gamma: float | None = None,
                       noisy: bool = True) -> LinearInverseLoss:
    """Gaussian m x d operator and a noisy measurement of ``x_true``.

    Entries of A are N(0, 1/k), so the rows of A U have roughly unit norm.
    ``gamma`` defaults to 1 / (2 noise_var), which makes exp(-L) the likelihood.
    """
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((m, manifold.d)) / np.sqrt(manifold.k)
    y = A @ np.asarray(x_true, dtype=float)
    if noisy:
        y = y + np.sqrt(noise_var) * rng.standard_normal(m)
    if gamma is None:
        gamma = 1.0 / (2.0 * noise_var)
    return LinearInverseLoss(A, y, gamma)
