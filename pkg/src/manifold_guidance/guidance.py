"""Guided DDIM steps: DPS and the manifold-preserving shortcut family.

All step rules share one shape: evaluate the noise predictor at x_t, form the
Tweedie estimate x_{0|t}, modify it (or x_{t-1}) with the guidance loss, and
recombine with the DDIM update.  Each rule returns a ``GuidedStep`` carrying the
new state together with what diagnostics need.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autoencoder import projected_gradient
from .losses import GuidanceLoss, LatentLoss
from .optimize import multi_step_optimize
from .sampler import (NoiseSchedule, StepRecord, TrajectoryRecord, chain_rng, ddim_step, renoise,
                      tweedie_estimate)

LOSS_NORMALIZED_EPS = 1e-8
LOSS_NORMALIZED_CAP = 1e3
METHODS = ("ddim", "dps", "mpgd", "mpgd-ae", "mpgd-z", "mpgd-ldm")


@dataclass
class GuidedStep:
    x_t: np.ndarray
    x_prev: np.ndarray
    eps_hat: np.ndarray
    x0: np.ndarray
    x0_guided: np.ndarray
    # displacement of x_{t-1} caused by guidance
    direction: np.ndarray | None
    line_search_failed: bool = False


@dataclass(frozen=True)
class StepSizeSchedule:
    mode: str = "constant"
    rho: float = 1.0
    match_dps: bool = False

    def __post_init__(self):
        if self.mode not in ("constant", "loss-normalized", "linear-decay"):
            raise ValueError(f"unknown step-size mode {self.mode!r}")
        if not self.rho > 0:
            raise ValueError("rho must be positive")


def dps_equivalent_c(rho_t: float, alpha_bar_prev: float, alpha_bar_t: float) -> float:
    """c_t = rho_t / sqrt(abar_{t-1} abar_t), the shortcut weight matching a DPS weight."""
    return rho_t / math.sqrt(alpha_bar_prev * alpha_bar_t)


def resolve_step_size(schedule: StepSizeSchedule, t: int, current_loss: float | None = None,
                      noise: NoiseSchedule | None = None) -> tuple[float, float]:
    """(rho_t, c_t) for step t.

    ``linear-decay`` scales rho by t / T, ``loss-normalized`` divides it by
    sqrt(loss) + 1e-8 and caps the result at 1e3 * rho.  c_t equals rho_t
    unless ``match_dps`` asks for the DPS-equivalent conversion.
    """
    rho = schedule.rho
    if schedule.mode == "constant":
        rho_t = rho
    elif schedule.mode == "linear-decay":
        if noise is None:
            raise ValueError("linear-decay needs the noise schedule")
        rho_t = rho * t / noise.T
    else:
        if current_loss is None or current_loss < 0:
            raise ValueError("loss-normalized mode needs a nonnegative current loss")
        rho_t = min(rho / (math.sqrt(current_loss) + LOSS_NORMALIZED_EPS), LOSS_NORMALIZED_CAP * rho)
    if schedule.match_dps:
        if noise is None:
            raise ValueError("match_dps needs the noise schedule")
        return rho_t, dps_equivalent_c(rho_t, noise[t - 1], noise[t])
    return rho_t, rho_t


def _finite(g):
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite guidance gradient")
    return g


def _denoise(x_t, denoiser, schedule, t):
    a_t = schedule[t]
    eps_hat = denoiser(x_t, a_t)
    return eps_hat, tweedie_estimate(x_t, eps_hat, a_t)


def plain_step(x_t, denoiser, schedule: NoiseSchedule, t: int, rng=None, noise=None) -> GuidedStep:
    eps_hat, x0 = _denoise(x_t, denoiser, schedule, t)
    x_prev = ddim_step(x_t, eps_hat, x0, schedule, t, rng, noise)
    return GuidedStep(x_t, x_prev, eps_hat, x0, x0, None)


def dps_gradient(x_t, denoiser, schedule: NoiseSchedule, t: int, loss: GuidanceLoss, x0=None):
    """grad_{x_t} L(x_{0|t}) by the chain rule through the noise predictor.

    Uses one vector-Jacobian product of the predictor:
        (grad_{x0} L - sqrt(1 - abar) (dL/dx0)(d eps/d x_t)) / sqrt(abar).
    """
    a_t = schedule[t]
    if x0 is None:
        x0 = tweedie_estimate(x_t, denoiser(x_t, a_t), a_t)
    g0 = _finite(np.asarray(loss.gradient(x0), dtype=float))
    vjp = denoiser.vjp(x_t, a_t, g0)
    return (g0 - math.sqrt(1.0 - a_t) * vjp) / math.sqrt(a_t)


def dps_step(x_t, denoiser, schedule: NoiseSchedule, t: int, loss: GuidanceLoss, rho_t: float,
             rng=None, noise=None) -> GuidedStep:
    """Unguided DDIM step followed by x_{t-1} -= rho_t grad_{x_t} L(x_{0|t})."""
    eps_hat, x0 = _denoise(x_t, denoiser, schedule, t)
    grad = dps_gradient(x_t, denoiser, schedule, t, loss, x0)
    direction = -rho_t * grad
    x_prev = ddim_step(x_t, eps_hat, x0, schedule, t, rng, noise) + direction
    return GuidedStep(x_t, x_prev, eps_hat, x0, x0, direction)


def _shortcut(x_t, denoiser, schedule, t, update, rng, noise) -> GuidedStep:
    eps_hat, x0 = _denoise(x_t, denoiser, schedule, t)
    guided, failed = update(x0)
    x_prev = ddim_step(x_t, eps_hat, guided, schedule, t, rng, noise)
    direction = math.sqrt(schedule[t - 1]) * (guided - x0)
    return GuidedStep(x_t, x_prev, eps_hat, x0, guided, direction, failed)


def _x0_update(loss, c_t, pair=None, inner_steps=1, optimizer="gd"):
    def update(x0):
        if inner_steps == 1 and optimizer == "gd":
            if pair is None:
                g = _finite(np.asarray(loss.gradient(x0), dtype=float))
            else:
                g = projected_gradient(pair, x0, loss)
            return x0 - c_t * g, False
        res = multi_step_optimize(x0, loss, inner_steps, optimizer, c_t, pair)
        return res.x, res.line_search_failed

    return update


def mpgd_step(x_t, denoiser, schedule: NoiseSchedule, t: int, loss: GuidanceLoss, c_t: float,
              rng=None, noise=None, inner_steps: int = 1, optimizer: str = "gd") -> GuidedStep:
    """Shortcut without projection: x_{0|t} -= c_t grad L(x_{0|t}), then DDIM."""
    return _shortcut(x_t, denoiser, schedule, t, _x0_update(loss, c_t, None, inner_steps, optimizer),
                     rng, noise)


def in_window(t: int, T: int, window) -> bool:
    """Whether step t lies in [lo * T, hi * T] for window = (hi, lo) as fractions of T."""
    if window is None:
        return True
    hi, lo = window
    return lo * T <= t <= hi * T


def mpgd_ae_step(x_t, denoiser, schedule: NoiseSchedule, t: int, pair, loss: GuidanceLoss, c_t: float,
                 rng=None, active_window=None, noise=None, inner_steps: int = 1,
                 optimizer: str = "gd") -> GuidedStep:
    """x_{0|t} -= c_t grad_x L(D(E(x_{0|t}))) inside the window, plain shortcut outside."""
    if not in_window(t, schedule.T, active_window):
        return mpgd_step(x_t, denoiser, schedule, t, loss, c_t, rng, noise, inner_steps, optimizer)
    return _shortcut(x_t, denoiser, schedule, t, _x0_update(loss, c_t, pair, inner_steps, optimizer),
                     rng, noise)


def mpgd_z_step(x_t, denoiser, schedule: NoiseSchedule, t: int, pair, loss: GuidanceLoss, c_t: float,
                rng=None, noise=None, inner_steps: int = 1, optimizer: str = "gd") -> GuidedStep:
    """Guide the encoded latent and add the reconstruction residual back.

    z = E(x0); dx = x0 - D(z); z -= c_t grad_z L(D(z)); x0 = D(z) + dx.
    """
    latent_loss = LatentLoss(loss, pair)
    latent_update = _x0_update(latent_loss, c_t, None, inner_steps, optimizer)

    def update(x0):
        z = pair.encode(x0)
        residual = x0 - pair.decode(z)
        z_new, failed = latent_update(z)
        return pair.decode(z_new) + residual, failed

    return _shortcut(x_t, denoiser, schedule, t, update, rng, noise)


def time_travel(step_fn, x_t, schedule: NoiseSchedule, t: int, repeats: int, rng) -> GuidedStep:
    """Repeat (guided step to t-1, re-noise to t) ``repeats`` times, then step once more.

    ``step_fn(x_t, rng)`` must return a GuidedStep for level t.
    """
    if repeats < 0:
        raise ValueError("repeats must be >= 0")
    for _ in range(repeats):
        x_prev = step_fn(x_t, rng).x_prev
        x_t = renoise(x_prev, schedule, t, rng)
    return step_fn(x_t, rng)


@dataclass(frozen=True)
class GuidanceSettings:
    """Everything a guided chain needs beyond the denoiser and the loss."""

    method: str = "mpgd"
    step_size: StepSizeSchedule = StepSizeSchedule()
    pair: object = None
    window: tuple | None = None
    inner_steps: int = 1
    optimizer: str = "gd"
    travel: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.method in ("mpgd-ae", "mpgd-z", "mpgd-ldm") and self.pair is None:
            raise ValueError(f"method {self.method} needs an autoencoder pair")


def guided_step(x_t, denoiser, schedule, t, loss, settings: GuidanceSettings, rng=None, noise=None):
    """One step of ``settings.method`` at level t (no time travel)."""
    method = settings.method
    if method == "ddim" or loss is None:
        return plain_step(x_t, denoiser, schedule, t, rng, noise)
    current = None
    if settings.step_size.mode == "loss-normalized":
        _, x0 = _denoise(x_t, denoiser, schedule, t)
        current = float(loss.value(x0))
    rho_t, c_t = resolve_step_size(settings.step_size, t, current, schedule)
    opts = dict(inner_steps=settings.inner_steps, optimizer=settings.optimizer)
    if method == "dps":
        return dps_step(x_t, denoiser, schedule, t, loss, rho_t, rng, noise)
    if method == "mpgd":
        return mpgd_step(x_t, denoiser, schedule, t, loss, c_t, rng, noise, **opts)
    if method == "mpgd-ae":
        return mpgd_ae_step(x_t, denoiser, schedule, t, settings.pair, loss, c_t, rng,
                            settings.window, noise, **opts)
    if method == "mpgd-z":
        if not in_window(t, schedule.T, settings.window):
            return mpgd_step(x_t, denoiser, schedule, t, loss, c_t, rng, noise, **opts)
        return mpgd_z_step(x_t, denoiser, schedule, t, settings.pair, loss, c_t, rng, noise, **opts)
    if method == "mpgd-ldm":
        return mpgd_step(x_t, denoiser, schedule, t, LatentLoss(loss, settings.pair), c_t, rng, noise,
                         **opts)
    raise ValueError(f"unknown method {method!r}")


def guided_chain(x_T, denoiser, schedule: NoiseSchedule, loss, settings: GuidanceSettings, rng,
                 chain: int = 0) -> TrajectoryRecord:
    """Run one chain from x_T down to level 0, recording every step.

    For ``mpgd-ldm`` the chain lives in latent space and ``denoiser`` must be a
    latent noise predictor; decoding is left to the caller.
    """
    record = TrajectoryRecord(chain)
    x = np.asarray(x_T, dtype=float)
    for t in range(schedule.T, 0, -1):
        def step_fn(x_cur, gen, t=t):
            return guided_step(x_cur, denoiser, schedule, t, loss, settings, gen)

        step = time_travel(step_fn, x, schedule, t, settings.travel, rng)
        row = StepRecord(t, step.x_t, step.eps_hat, step.x0, step.direction)
        if step.line_search_failed:
            row.diagnostics["line_search_failed"] = True
        record.append(row)
        x = step.x_prev
    record.append(StepRecord(0, x, None, x))
    return record


def mpgd_ldm_sample(latent_denoiser, schedule: NoiseSchedule, pair, loss: GuidanceLoss,
                    step_schedule: StepSizeSchedule, rng, n: int, inner_steps: int = 1,
                    optimizer: str = "gd", travel: int = 0) -> np.ndarray:
    """Guided sampling entirely in the latent space; returns decoded (n, d) samples.

    ``rng`` is an integer master seed; chain i uses ``chain_rng(rng, i)``.
    """
    settings = GuidanceSettings("mpgd-ldm", step_schedule, pair, None, inner_steps, optimizer, travel)
    k = pair.manifold.k
    out = []
    for i in range(n):
        gen = chain_rng(rng, i)
        z_T = gen.standard_normal(k)
        record = guided_chain(z_T, latent_denoiser, schedule, loss, settings, gen, i)
        out.append(pair.decode(record.terminal))
    return np.array(out)
