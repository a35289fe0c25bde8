"""Noise schedule, forward corruption and DDPM/DDIM reverse steps.

Step indices are 1-based (t in 1..T). Index 0 denotes the clean endpoint,
for which alpha_bar is defined as 1.
"""
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from ppg2resp.core.errors import ScheduleError, ShapeError
from ppg2resp.core.logging import get_logger
from ppg2resp.models.schemas import SamplerName, ScheduleConfig

logger = get_logger(__name__)

# (y_t batch, t, x_ppg batch) -> eps_hat batch
Denoiser = Callable[[np.ndarray, int, np.ndarray], np.ndarray]


class NoiseSchedule(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    config: ScheduleConfig

    def _check(self, t: int, allow_zero: bool = False) -> None:
        low = 0 if allow_zero else 1
        if not low <= int(t) <= self.T:
            raise ScheduleError(f"step {t} outside [{low}, {self.T}]")

    def beta(self, t: int) -> float:
        self._check(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        self._check(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def alpha_bar_array(self, t: np.ndarray) -> np.ndarray:
        """Vectorised alpha_bar lookup for an array of steps in [1, T]"""
        t = np.asarray(t, dtype=np.int64)
        if t.size and (t.min() < 1 or t.max() > self.T):
            raise ScheduleError(f"steps outside [1, {self.T}]")
        return self.alpha_bars[t - 1]


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule with precomputed alpha and alpha_bar tables"""
    if T < 1:
        raise ScheduleError("T must be >= 1")
    if not 0 < beta_start < 1 or not 0 < beta_end < 1:
        raise ScheduleError("beta bounds must lie in (0, 1)")
    if T > 1 and not beta_start < beta_end:
        raise ScheduleError("beta_start must be < beta_end")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(
        T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars,
        config=ScheduleConfig(T=T, beta_start=beta_start, beta_end=beta_end),
    )


def schedule_from_config(config: ScheduleConfig) -> NoiseSchedule:
    return make_schedule(config.T, config.beta_start, config.beta_end)


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def forward_diffuse(y0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    y0 = np.asarray(y0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _same_shape(y0, eps, "forward_diffuse")
    ab = schedule.alpha_bar(t)
    return np.sqrt(ab) * y0 + np.sqrt(1.0 - ab) * eps


def estimate_x0(y_t: np.ndarray, t: int, eps_hat: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Single-step clean estimate (y_t - sqrt(1 - ab_t) * eps_hat) / sqrt(ab_t)"""
    y_t = np.asarray(y_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    _same_shape(y_t, eps_hat, "estimate_x0")
    ab = schedule.alpha_bar(t)
    return (y_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def posterior_std(t: int, schedule: NoiseSchedule) -> float:
    """sigma_t with sigma_t^2 = beta_t (1 - ab_{t-1}) / (1 - ab_t); zero at t = 1"""
    if t == 1:
        return 0.0
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t - 1)
    return float(np.sqrt(schedule.beta(t) * (1.0 - ab_prev) / (1.0 - ab_t)))


def ddpm_step(
    y_t: np.ndarray, t: int, eps_hat: np.ndarray, schedule: NoiseSchedule, z: np.ndarray,
) -> np.ndarray:
    """Ancestral update y_t -> y_{t-1}"""
    y_t = np.asarray(y_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    _same_shape(y_t, eps_hat, "ddpm_step")
    _same_shape(y_t, z, "ddpm_step")
    schedule._check(t)
    if t == 1 and np.any(z != 0):
        raise ScheduleError("z must be the zero vector at t = 1")

    beta = schedule.beta(t)
    mean = (y_t - beta / np.sqrt(1.0 - schedule.alpha_bar(t)) * eps_hat) / np.sqrt(schedule.alpha(t))
    return mean + posterior_std(t, schedule) * z


def ddim_step(
    y_t: np.ndarray, t: int, t_prev: int, eps_hat: np.ndarray, schedule: NoiseSchedule,
) -> np.ndarray:
    """Deterministic (eta = 0) jump from step t to t_prev < t"""
    if not t_prev < t:
        raise ScheduleError(f"ddim step requires t_prev < t (got {t_prev} -> {t})")
    schedule._check(t)
    schedule._check(t_prev, allow_zero=True)
    x0 = estimate_x0(y_t, t, eps_hat, schedule)
    ab_prev = schedule.alpha_bar(t_prev)
    return np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * np.asarray(eps_hat, dtype=np.float64)


def ddim_step_grid(T: int, nfe: int) -> List[int]:
    """Evenly spaced descending steps from T that always end at 1"""
    if nfe < 1:
        raise ScheduleError("nfe must be >= 1")
    if nfe > T:
        raise ScheduleError(f"nfe {nfe} exceeds the schedule length T={T}")
    if nfe == T:
        return list(range(T, 0, -1))
    if nfe == 1:
        return [T]
    grid = np.round(np.linspace(T, 0, nfe)).astype(int)
    grid[-1] = 1
    steps = sorted(set(int(s) for s in grid), reverse=True)
    if len(steps) != nfe:
        steps = sorted(set(int(s) for s in np.round(np.linspace(T, 1, nfe))), reverse=True)
    return steps


def full_grid(T: int) -> List[int]:
    return list(range(T, 0, -1))


def validate_steps(steps: Sequence[int], schedule: NoiseSchedule, sampler: SamplerName) -> List[int]:
    steps = [int(s) for s in steps]
    if not steps:
        raise ScheduleError("empty step list")
    for s in steps:
        if not 1 <= s <= schedule.T:
            raise ScheduleError(f"step {s} outside [1, {schedule.T}]")
    if any(b >= a for a, b in zip(steps, steps[1:])):
        raise ScheduleError("steps must be strictly decreasing")
    if sampler == SamplerName.DDPM:
        if any(a - b != 1 for a, b in zip(steps, steps[1:])) or steps[-1] != 1:
            raise ScheduleError("ddpm sampling needs a contiguous grid ending at 1")
    return steps


def sample(
    denoiser: Denoiser,
    x_ppg: np.ndarray,
    sampler: Union[SamplerName, str],
    steps: Sequence[int],
    seed: int,
    schedule: NoiseSchedule,
    progress: Optional[Callable[[int], None]] = None,
) -> np.ndarray:
    """Reverse diffusion from seeded Gaussian noise, conditioned on ``x_ppg``.

    ``x_ppg`` may be one segment (L,) or a batch (B, L); the result has the
    same shape. The generator draws y_T first, then one z per DDPM step.
    """
    sampler = SamplerName(sampler)
    steps = validate_steps(steps, schedule, sampler)
    x = np.asarray(x_ppg, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2:
        raise ShapeError("x_ppg must be (L,) or (B, L)")

    rng = np.random.default_rng(seed)
    y = rng.standard_normal(x.shape)
    for i, t in enumerate(steps):
        eps_hat = np.asarray(denoiser(y, t, x), dtype=np.float64)
        _same_shape(y, eps_hat, "denoiser output")
        if sampler == SamplerName.DDIM:
            t_prev = steps[i + 1] if i + 1 < len(steps) else 0
            y = ddim_step(y, t, t_prev, eps_hat, schedule)
        else:
            z = rng.standard_normal(y.shape) if t > 1 else np.zeros_like(y)
            y = ddpm_step(y, t, eps_hat, schedule, z)
        if progress is not None:
            progress(t)

    return y[0] if single else y


def timestep_embedding(t: Union[int, np.ndarray], dim: int) -> np.ndarray:
    """Sinusoidal embedding [sin(t w_k), cos(t w_k)] with w_k = 10000^(-k/half)"""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
