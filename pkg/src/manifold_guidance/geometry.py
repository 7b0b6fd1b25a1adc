"""Linear-subspace data manifolds and the noisy-shell geometry around them.

A k-dimensional subspace M of R^d is stored through an orthonormal basis U
(d x k).  Under the forward process x_t = sqrt(abar) x + sqrt(1 - abar) eps,
samples from a distribution supported on M concentrate on a shell M_t at
orthogonal distance r_t = sqrt((1 - abar)(d - k)) from M.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

ORTHONORMAL_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class LinearManifold:
    """A linear subspace of R^d spanned by the orthonormal columns of ``basis``."""

    d: int
    k: int
    basis: np.ndarray

    def __post_init__(self):
        basis = np.array(self.basis, dtype=float)
        if basis.shape != (self.d, self.k):
            raise ValueError(f"basis has shape {basis.shape}, expected ({self.d}, {self.k})")
        if not 1 <= self.k <= self.d:
            raise ValueError(f"need 1 <= k <= d, got k={self.k}, d={self.d}")
        gram_err = np.max(np.abs(basis.T @ basis - np.eye(self.k)))
        if gram_err >= ORTHONORMAL_TOL:
            raise ValueError(f"basis columns are not orthonormal (max deviation {gram_err:.3e})")
        basis.setflags(write=False)
        object.__setattr__(self, "basis", basis)

    @classmethod
    def ambient(cls, d: int) -> "LinearManifold":
        """The whole space R^d, used as the coordinate space of latent priors."""
        return cls(d, d, np.eye(d))

    @property
    def codim(self) -> int:
        return self.d - self.k

    @property
    def projector(self) -> np.ndarray:
        return self.basis @ self.basis.T

    def project(self, x):
        """Orthogonal projection onto the subspace; works on (..., d) arrays."""
        return (np.asarray(x) @ self.basis) @ self.basis.T

    def normal_component(self, x):
        x = np.asarray(x, dtype=float)
        return x - self.project(x)

    def coordinates(self, x):
        return np.asarray(x) @ self.basis

    def embed(self, z):
        return np.asarray(z) @ self.basis.T

    def to_dict(self) -> dict:
        return {"d": self.d, "k": self.k, "basis": self.basis.ravel().tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "LinearManifold":
        d, k = int(doc["d"]), int(doc["k"])
        return cls(d, k, np.asarray(doc["basis"], dtype=float).reshape(d, k))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "LinearManifold":
        return cls.from_dict(json.loads(text))

    def __eq__(self, other):
        if not isinstance(other, LinearManifold):
            return NotImplemented
        return self.d == other.d and self.k == other.k and np.array_equal(self.basis, other.basis)

    __hash__ = None


def make_manifold(d: int, k: int, seed) -> LinearManifold:
    """Random k-dimensional subspace of R^d, deterministic in ``seed``.

    The basis is the Q factor of a Gaussian d x k matrix, with each column's
    sign fixed so that its first nonzero entry is positive.
    """
    if not 1 <= k < d:
        raise ValueError(f"need 1 <= k < d, got k={k}, d={d}")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((d, k)))
    for j in range(k):
        nonzero = np.flatnonzero(q[:, j])
        if q[nonzero[0], j] < 0:
            q[:, j] = -q[:, j]
    return LinearManifold(d, k, q)


def off_manifold_distance(x, nu: float, m: LinearManifold):
    """d(x, nu, M) = inf_{x' in M} ||x - nu x'||.

    For a subspace nu M = M, so the value is the norm of the normal component
    of ``x`` whatever ``nu`` is.  Accepts (..., d) arrays.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("x must be finite")
    if not nu > 0:
        raise ValueError(f"nu must be positive, got {nu}")
    return np.linalg.norm(m.normal_component(x), axis=-1)


def shell_radius(alpha_bar_t: float, codim: int) -> float:
    return math.sqrt((1.0 - alpha_bar_t) * codim)


def concentration_epsilon(delta: float, dof: int) -> float:
    """Relative half-width of the band that holds x_t with probability >= 1 - delta.

    Derived from the Laurent-Massart chi-square tail bounds with
    eps' = -log(delta / 2) / dof.
    """
    if not 0 < delta <= 1:
        raise ValueError(f"delta must lie in (0, 1], got {delta}")
    if dof < 1:
        raise ValueError(f"dof must be >= 1, got {dof}")
    ep = -math.log(delta / 2.0) / dof
    lower = 1.0 - math.sqrt(max(0.0, 1.0 - 2.0 * math.sqrt(ep)))
    upper = math.sqrt(1.0 + 2.0 * math.sqrt(ep) + 2.0 * ep) - 1.0
    return min(lower, upper)


@dataclass(frozen=True)
class ShellSpec:
    nu: float
    radius: float
    band_epsilon: float

    @classmethod
    def at(cls, m: LinearManifold, alpha_bar_t: float, delta: float) -> "ShellSpec":
        return cls(
            nu=math.sqrt(alpha_bar_t),
            radius=shell_radius(alpha_bar_t, m.codim),
            band_epsilon=concentration_epsilon(delta, m.codim),
        )


def shell_residual(x_t, m: LinearManifold, alpha_bar_t: float):
    """Unsigned gap |d(x_t, sqrt(abar), M) - r_t| between x_t and the shell M_t."""
    r_t = shell_radius(alpha_bar_t, m.codim)
    return np.abs(off_manifold_distance(x_t, math.sqrt(alpha_bar_t), m) - r_t)


def shell_band_test(x_t, m: LinearManifold, alpha_bar_t: float, epsilon: float):
    """Membership of x_t in B(M_t; epsilon * r_t).

    Returns a bool for a single point, or a bool array for a (n, d) batch.
    """
    if not 0 < alpha_bar_t < 1:
        raise ValueError(f"alpha_bar_t must lie in (0, 1), got {alpha_bar_t}")
    if not 0 < epsilon <= 1:
        raise ValueError(f"epsilon must lie in (0, 1], got {epsilon}")
    r_t = shell_radius(alpha_bar_t, m.codim)
    inside = shell_residual(x_t, m, alpha_bar_t) < epsilon * r_t
    return bool(inside) if np.ndim(inside) == 0 else inside
