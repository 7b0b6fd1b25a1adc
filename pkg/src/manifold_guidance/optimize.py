"""Inner optimisation of the clean estimate: gradient descent and nonlinear CG."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .losses import GuidanceLoss, ProjectedLoss

ARMIJO_C1 = 1e-4
BACKTRACK_FACTOR = 0.5
MAX_HALVINGS = 30


class InnerResult(NamedTuple):
    x: np.ndarray
    losses: list
    line_search_failed: bool


def _backtrack(objective, x, f0, direction, slope, step):
    """Armijo backtracking; returns (step, x_new, f_new) or None on failure."""
    for _ in range(MAX_HALVINGS + 1):
        x_new = x + step * direction
        f_new = float(objective.value(x_new))
        if np.isfinite(f_new) and f_new <= f0 + ARMIJO_C1 * step * slope:
            return step, x_new, f_new
        step *= BACKTRACK_FACTOR
    return None


def _secant_step(objective, x, g, direction, probe):
    """Step length minimising the 1-d quadratic model along ``direction``.

    The curvature comes from a gradient difference at ``x + probe * direction``,
    which makes the step exact on quadratic objectives.
    """
    curvature = (objective.gradient(x + probe * direction) - g) @ direction / probe
    if curvature > 0:
        return -(g @ direction) / curvature
    return probe


def multi_step_optimize(x0_est, loss: GuidanceLoss, steps: int, method: str, c_t: float,
                        pair=None) -> InnerResult:
    """Run ``steps`` inner iterations on L (or on L o D o E when ``pair`` is given).

    ``gd``: a single iteration is the plain update x - c_t grad L; with more
    iterations each step starts at c_t and is Armijo-backtracked.
    ``cg``: Polak-Ribiere (clipped at zero) with restart on non-descent,
    secant initial step and Armijo backtracking.

    On a line-search failure after MAX_HALVINGS halvings the best iterate so
    far is returned with ``line_search_failed`` set.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if method not in ("gd", "cg"):
        raise ValueError(f"unknown optimizer {method!r}")
    objective = ProjectedLoss(loss, pair) if pair is not None else loss
    x = np.asarray(x0_est, dtype=float)
    g = objective.gradient(x)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite loss gradient")
    if method == "gd" and steps == 1:
        x_new = x - c_t * g
        return InnerResult(x_new, [float(objective.value(x)), float(objective.value(x_new))], False)

    f = float(objective.value(x))
    history = [f]
    direction = -g
    for _ in range(steps):
        gnorm2 = float(g @ g)
        if gnorm2 == 0.0:
            break
        slope = float(g @ direction)
        if slope >= 0:
            direction, slope = -g, -gnorm2
        if method == "cg":
            start = _secant_step(objective, x, g, direction, c_t)
        else:
            start = c_t
        found = _backtrack(objective, x, f, direction, slope, start)
        if found is None:
            return InnerResult(x, history, True)
        _, x, f = found
        history.append(f)
        g_new = objective.gradient(x)
        if method == "cg":
            beta = max(0.0, float(g_new @ (g_new - g)) / gnorm2)
            direction = -g_new + beta * direction
        else:
            direction = -g_new
        g = g_new
    return InnerResult(x, history, False)
