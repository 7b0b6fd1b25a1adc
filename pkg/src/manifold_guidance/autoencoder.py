"""Encoder/decoder pairs for a linear manifold and tangent-space projection."""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import subspace_angles

from .geometry import LinearManifold


class AutoencoderPair:
    """Linear encoder E(x) = U^T x with decoder D(z) = U z + scale * B tanh(W z + b).

    With ``scale == 0`` this is the perfect pair: D o E is the orthogonal
    projector onto M and E o D is the identity on R^k.  The perturbation acts
    on the decoder only.  B has orthonormal columns, so the reconstruction
    error of an on-manifold point is at most ``RECONSTRUCTION_CONSTANT * scale``
    with RECONSTRUCTION_CONSTANT = sqrt(rank of the perturbation).
    """

    def __init__(self, manifold: LinearManifold, scale: float = 0.0, seed=0, rank: int | None = None):
        if scale < 0:
            raise ValueError("scale must be nonnegative")
        self.manifold = manifold
        self.scale = float(scale)
        self.seed = seed
        self.rank = manifold.k if rank is None else int(rank)
        rng = np.random.default_rng(seed)
        self._out, _ = np.linalg.qr(rng.standard_normal((manifold.d, self.rank)))
        self._mix = rng.standard_normal((self.rank, manifold.k)) / math.sqrt(manifold.k)
        self._shift = rng.standard_normal(self.rank)

    @property
    def kind(self) -> str:
        return "perfect-linear" if self.scale == 0 else "perturbed"

    @property
    def reconstruction_constant(self) -> float:
        return math.sqrt(self.rank)

    def metadata(self) -> dict:
        return {"kind": self.kind, "scale": self.scale, "seed": self.seed, "rank": self.rank,
                "reconstruction_constant": self.reconstruction_constant}

    def encode(self, x):
        return np.asarray(x) @ self.manifold.basis

    def decode(self, z):
        z = np.asarray(z, dtype=float)
        x = z @ self.manifold.basis.T
        if self.scale:
            x = x + self.scale * np.tanh(z @ self._mix.T + self._shift) @ self._out.T
        return x

    def encode_jacobian(self, x=None) -> np.ndarray:
        return self.manifold.basis.T

    def decode_jacobian(self, z) -> np.ndarray:
        jac = self.manifold.basis.copy()
        if self.scale:
            sech2 = 1.0 - np.tanh(self._mix @ np.asarray(z, dtype=float) + self._shift) ** 2
            jac = jac + self.scale * self._out @ (sech2[:, None] * self._mix)
        return jac

    def decode_vjp(self, z, v):
        """(dD/dz)^T v for a single latent point."""
        return self.decode_jacobian(z).T @ np.asarray(v, dtype=float)

    def reconstruct(self, x):
        return self.decode(self.encode(x))


def perfect_linear_autoencoder(m: LinearManifold) -> AutoencoderPair:
    return AutoencoderPair(m, 0.0)


def perturbed_autoencoder(m: LinearManifold, scale: float, seed) -> AutoencoderPair:
    return AutoencoderPair(m, scale, seed)


def projected_gradient(pair: AutoencoderPair, x0, loss):
    """grad_x L(D(E(x)); y) = J_E^T J_D^T grad L evaluated at D(E(x0))."""
    x0 = np.asarray(x0, dtype=float)
    z = pair.encode(x0)
    g = np.asarray(loss.gradient(pair.decode(z)), dtype=float)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite loss gradient")
    return pair.encode_jacobian(x0).T @ pair.decode_vjp(z, g)


def jacobian_identity_report(pair: AutoencoderPair, x0) -> tuple[float, float]:
    """(max |J_E J_D - I|, largest principal angle between range(J_E^T) and range(J_D))."""
    z = pair.encode(x0)
    je, jd = pair.encode_jacobian(x0), pair.decode_jacobian(z)
    identity_gap = float(np.max(np.abs(je @ jd - np.eye(je.shape[0]))))
    angle_gap = float(np.max(subspace_angles(je.T, jd)))
    return identity_gap, angle_gap
