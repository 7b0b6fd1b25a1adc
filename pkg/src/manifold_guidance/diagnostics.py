"""Post-processing of trajectories: manifold deviation, score alignment, bound audits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .geometry import LinearManifold, off_manifold_distance, shell_radius, shell_residual
from .guidance import dps_equivalent_c, dps_step, mpgd_step
from .sampler import NoiseSchedule, TrajectoryRecord

CSV_HEADER = ("method", "chain", "t", "shell_residual", "off_manifold_norm", "cosine",
              "bound_lhs", "bound_rhs", "kappa")


@dataclass
class CurveRow:
    t: int
    shell_residual: float | None = None
    off_manifold_norm: float | None = None
    cosine: float | None = None
    bound_lhs: float | None = None
    bound_rhs: float | None = None
    kappa: float | None = None


@dataclass
class DeviationCurve:
    method: str = ""
    chain: int = 0
    rows: list[CurveRow] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        """Values of one column as floats, with NaN where absent."""
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in self.rows])

    def times(self) -> np.ndarray:
        return np.array([r.t for r in self.rows])

    def csv_rows(self):
        for r in self.rows:
            values = [getattr(r, f.name) for f in fields(CurveRow)[1:]]
            yield [self.method, self.chain, r.t] + ["" if v is None else repr(float(v)) for v in values]


def write_curves_csv(path, curves) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for curve in curves:
            writer.writerows(curve.csv_rows())


def deviation_curve(trajectory: TrajectoryRecord, manifold: LinearManifold, schedule: NoiseSchedule,
                    method: str = "", decode=None) -> DeviationCurve:
    """Relative shell residual of x_t and off-manifold norm of x_{0|t} along a chain.

    ``decode`` maps latent estimates to data space (latent-diffusion chains);
    the shell residual is then absent since the latent space has no normal part.
    """
    curve = DeviationCurve(method, trajectory.chain)
    for step in trajectory.steps:
        x0 = step.x0 if step.x0 is not None else step.x_t
        row = CurveRow(step.t)
        if decode is not None:
            x0 = decode(x0)
        elif 0 < step.t:
            a_t = schedule[step.t]
            row.shell_residual = float(shell_residual(step.x_t, manifold, a_t)) / shell_radius(a_t, manifold.codim)
        row.off_manifold_norm = float(off_manifold_distance(x0, 1.0, manifold))
        curve.rows.append(row)
    return curve


def cosine(u, v) -> float | None:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return None
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def alignment_curve(trajectory: TrajectoryRecord, denoiser, schedule: NoiseSchedule) -> list:
    """(t, cosine) between the unit score at x_t and the unit applied guidance direction.

    The cosine is None wherever no guidance (or a zero direction) was applied.
    """
    out = []
    for step in trajectory.steps:
        if step.t == 0:
            continue
        if step.guidance is None:
            out.append((step.t, None))
            continue
        score = denoiser.score(step.x_t, schedule[step.t])
        out.append((step.t, cosine(score, step.guidance)))
    return out


def spectral_norm(mat, iters: int = 100, tol: float = 1e-10) -> float:
    """Largest singular value by power iteration on M^T M, falling back to SVD."""
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    v = np.random.default_rng(0).standard_normal(mat.shape[1])
    v /= np.linalg.norm(v)
    estimate = 0.0
    for _ in range(iters):
        w = mat.T @ (mat @ v)
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0
        v = w / norm
        new = math.sqrt(norm)
        if abs(new - estimate) <= tol * max(new, 1.0):
            return float(np.linalg.norm(mat @ v))
        estimate = new
    return float(np.linalg.norm(mat, 2))


@dataclass(frozen=True)
class BoundAudit:
    lhs: float
    rhs: float
    kappa: float

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs + 1e-9


def bound_audit(x_t, denoiser, schedule: NoiseSchedule, t: int, loss, rho_t: float, noise) -> BoundAudit:
    """Distance between paired DPS and shortcut updates against kappa rho sqrt(1-a)/sqrt(a).

    Both rules see the same noise draw; the shortcut uses the DPS-equivalent
    weight c_t = rho_t / sqrt(a_{t-1} a_t).  kappa is the spectral norm of
    (dL/dx0)(d eps/d x_t) at this step.
    """
    a_t = schedule[t]
    c_t = dps_equivalent_c(rho_t, schedule[t - 1], a_t)
    dps = dps_step(x_t, denoiser, schedule, t, loss, rho_t, noise=noise)
    short = mpgd_step(x_t, denoiser, schedule, t, loss, c_t, noise=noise)
    row = np.asarray(loss.gradient(dps.x0)) @ denoiser.jacobian(x_t, a_t)
    kappa = spectral_norm(row[None, :])
    lhs = float(np.linalg.norm(dps.x_prev - short.x_prev))
    rhs = kappa * rho_t * math.sqrt(1.0 - a_t) / math.sqrt(a_t)
    return BoundAudit(lhs, rhs, kappa)


def fd_audit(func, point, analytic, h: float | None = None) -> float:
    """Max central-difference error against an analytic derivative, relative to its scale.

    ``func`` maps a d-vector to a scalar or p-vector and ``analytic`` is its
    gradient (d,) or Jacobian (p, d).  The error is divided by
    max(max |analytic|, 1e-8).  The default step is 1e-5 (1 + ||x||).
    """
    x = np.asarray(point, dtype=float)
    if h is None:
        h = 1e-5 * (1.0 + np.linalg.norm(x))
    if not h > 0:
        raise ValueError("h must be positive")
    analytic = np.asarray(analytic, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(func(x + e), dtype=float) - np.asarray(func(x - e), dtype=float)) / (2 * h))
    numeric = np.stack(cols, axis=-1)
    numeric = numeric.reshape(analytic.shape)
    scale = max(float(np.max(np.abs(analytic))), 1e-8)
    return float(np.max(np.abs(numeric - analytic)) / scale)
