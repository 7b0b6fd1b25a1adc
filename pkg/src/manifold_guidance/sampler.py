"""Noise schedules, Tweedie estimates, the DDIM update and re-noising."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

RADICAND_TOL = 1e-12
RNG_ALGORITHM = "numpy.random.PCG64 seeded by SeedSequence(master_seed, spawn_key=(chain,))"


def chain_rng(master_seed: int, chain: int) -> np.random.Generator:
    """Independent per-chain stream; depends only on (master_seed, chain)."""
    seq = np.random.SeedSequence(entropy=master_seed, spawn_key=(chain,))
    return np.random.Generator(np.random.PCG64(seq))


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """alpha_bar[0] = 1 > alpha_bar[1] > ... > alpha_bar[T] > 0, plus DDIM's eta."""

    alpha_bar: np.ndarray
    eta: float = 0.0

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=float)
        if ab.ndim != 1 or len(ab) < 2:
            raise ValueError("alpha_bar must be a 1-d array of length T + 1 >= 2")
        if ab[0] != 1.0:
            raise ValueError("alpha_bar[0] must equal 1")
        if np.any(np.diff(ab) >= 0) or ab[-1] <= 0:
            raise ValueError("alpha_bar must be strictly decreasing and positive")
        if not 0 <= self.eta <= 1:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def T(self) -> int:
        return len(self.alpha_bar) - 1

    def __getitem__(self, t: int) -> float:
        return float(self.alpha_bar[t])

    @classmethod
    def linear_beta(cls, T: int, eta: float = 0.0, beta_start: float = 1e-4,
                    beta_end: float = 0.02, train_steps: int = 1000) -> "NoiseSchedule":
        """DDPM's linear-beta schedule on ``train_steps`` levels, strided to T steps."""
        if not 1 <= T <= train_steps:
            raise ValueError(f"need 1 <= T <= {train_steps}, got {T}")
        betas = np.linspace(beta_start, beta_end, train_steps)
        cumulative = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        idx = np.round(np.arange(T + 1) * train_steps / T).astype(int)
        return cls(cumulative[idx], eta)

    @classmethod
    def log_linear(cls, T: int, eta: float = 0.0, alpha_bar_min: float = 1e-4) -> "NoiseSchedule":
        """log alpha_bar_t linear in t, ending at ``alpha_bar_min``."""
        return cls(np.exp(np.arange(T + 1) / T * math.log(alpha_bar_min)), eta)

    @classmethod
    def from_mode(cls, mode: str, T: int, eta: float) -> "NoiseSchedule":
        if mode == "linear_beta":
            return cls.linear_beta(T, eta)
        if mode == "log_linear":
            return cls.log_linear(T, eta)
        raise ValueError(f"unknown alpha_bar mode {mode!r}")

    def with_eta(self, eta: float) -> "NoiseSchedule":
        return NoiseSchedule(self.alpha_bar, eta)


def _check_t(schedule: NoiseSchedule, t: int):
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t must lie in [1, {schedule.T}], got {t}")


def sigma(schedule: NoiseSchedule, t: int) -> float:
    """DDIM noise level eta * sqrt((1 - a_{t-1}) / (1 - a_t)) * sqrt(1 - a_t / a_{t-1})."""
    _check_t(schedule, t)
    return ddim_sigma(schedule.eta, schedule[t], schedule[t - 1])


def ddim_sigma(eta: float, a_t: float, a_prev: float) -> float:
    """sigma_t from a raw pair of noise levels; zero on a flat segment."""
    if a_t == a_prev:
        return 0.0
    return eta * math.sqrt((1 - a_prev) / (1 - a_t)) * math.sqrt(1 - a_t / a_prev)


def tweedie_estimate(x_t, eps_hat, alpha_bar_t: float):
    """x_{0|t} = (x_t - sqrt(1 - abar) eps_hat) / sqrt(abar)."""
    if not 0 < alpha_bar_t <= 1:
        raise ValueError(f"alpha_bar_t must lie in (0, 1], got {alpha_bar_t}")
    return (np.asarray(x_t) - math.sqrt(1.0 - alpha_bar_t) * np.asarray(eps_hat)) / math.sqrt(alpha_bar_t)


def _noise_coefficient(a_prev: float, sig: float) -> float:
    radicand = 1.0 - a_prev - sig**2
    if radicand < -RADICAND_TOL:
        raise ValueError(f"negative radicand {radicand:.3e} in the DDIM update")
    return math.sqrt(max(radicand, 0.0))


def ddim_step(x_t, eps_hat, x0_est, schedule: NoiseSchedule, t: int, rng=None, noise=None):
    """x_{t-1} = sqrt(a_{t-1}) x0_est + sqrt(1 - a_{t-1} - s_t^2) eps_hat + s_t eps.

    ``x0_est`` may be a guided clean estimate.  Exactly one standard normal
    vector is drawn from ``rng`` per call (even when s_t = 0), unless ``noise``
    is given, so paired runs stay aligned.
    """
    _check_t(schedule, t)
    eps_hat = np.asarray(eps_hat, dtype=float)
    if noise is None:
        noise = np.random.default_rng(rng).standard_normal(eps_hat.shape)
    a_prev = schedule[t - 1]
    sig = sigma(schedule, t)
    out = math.sqrt(a_prev) * np.asarray(x0_est) + _noise_coefficient(a_prev, sig) * eps_hat
    if sig > 0:
        out = out + sig * noise
    return out


def renoise(x_prev, schedule: NoiseSchedule, t: int, rng):
    """Forward kernel from level t-1 back to level t (one time-travel hop)."""
    _check_t(schedule, t)
    return forward_hop(x_prev, schedule[t - 1], schedule[t], rng)


def forward_hop(x_prev, a_from: float, a_to: float, rng):
    """Sample x at level ``a_to`` given x at the less noisy level ``a_from``."""
    ratio = a_to / a_from
    x_prev = np.asarray(x_prev, dtype=float)
    noise = np.random.default_rng(rng).standard_normal(x_prev.shape)
    return math.sqrt(ratio) * x_prev + math.sqrt(max(0.0, 1.0 - ratio)) * noise


@dataclass
class StepRecord:
    t: int
    x_t: np.ndarray
    eps_hat: np.ndarray | None = None
    x0: np.ndarray | None = None
    guidance: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)


@dataclass
class TrajectoryRecord:
    """One chain: rows for t = T..1 with the state before each step, then t = 0."""

    chain: int = 0
    steps: list[StepRecord] = field(default_factory=list)

    def append(self, row: StepRecord):
        if self.steps:
            if row.t >= self.steps[-1].t:
                raise ValueError("time indices must strictly decrease")
            if row.x_t.shape != self.steps[-1].x_t.shape:
                raise ValueError("inconsistent state dimension")
        self.steps.append(row)

    @property
    def terminal(self) -> np.ndarray:
        return self.steps[-1].x_t

    def times(self) -> list[int]:
        return [s.t for s in self.steps]

    def states(self) -> np.ndarray:
        return np.array([s.x_t for s in self.steps])


def sample_unconditional(denoiser, schedule: NoiseSchedule, d: int, n: int, rng) -> list[TrajectoryRecord]:
    """Plain DDIM from x_T ~ N(0, I) with the given noise predictor.

    ``rng`` is an integer master seed; chain i draws from ``chain_rng(seed, i)``.
    """
    return [_unconditional_chain(denoiser, schedule, d, rng, i) for i in range(n)]


def _unconditional_chain(denoiser, schedule, d, master_seed, chain) -> TrajectoryRecord:
    gen = chain_rng(master_seed, chain)
    x = gen.standard_normal(d)
    record = TrajectoryRecord(chain)
    for t in range(schedule.T, 0, -1):
        a_t = schedule[t]
        eps_hat = denoiser(x, a_t)
        x0 = tweedie_estimate(x, eps_hat, a_t)
        record.append(StepRecord(t, x, eps_hat, x0))
        x = ddim_step(x, eps_hat, x0, schedule, t, gen)
    record.append(StepRecord(0, x, None, x))
    return record
