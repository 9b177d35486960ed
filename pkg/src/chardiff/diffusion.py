"""Linear-beta noise schedule, forward noising, training loss and the sampler."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import Tensor, make_rng, no_grad
from .numerics import functional as F


@dataclass
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    taus: np.ndarray  # restoration timesteps, increasing, last = T - 1

    @property
    def num_steps(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        """ᾱ at timestep t; t = -1 stands for the clean image (ᾱ = 1)."""
        return 1.0 if t < 0 else float(self.alpha_bars[t])

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if t.size and (t.min() < 0 or t.max() >= self.num_steps):
            raise ValueError(f"timestep out of range [0, {self.num_steps})")
        return t


def make_schedule(num_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                  sample_steps: int = 50) -> NoiseSchedule:
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    if not 1 <= sample_steps <= num_steps:
        raise ValueError(f"sample_steps must be in [1, {num_steps}], got {sample_steps}")
    if not 0.0 <= beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 <= beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    stride = num_steps // sample_steps
    taus = num_steps - 1 - stride * np.arange(sample_steps)[::-1]
    return NoiseSchedule(betas, alphas, alpha_bars, taus)


def q_sample(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) eps, with t broadcast over the batch axis."""
    t = schedule.check_t(t)
    ab = schedule.alpha_bars[t]
    if np.ndim(ab):
        ab = ab.reshape((-1,) + (1,) * (np.ndim(x0) - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def training_loss(x0: np.ndarray, x_lq: np.ndarray, priors, model: Callable, schedule: NoiseSchedule,
                  rng: np.random.Generator) -> Tensor:
    """Mean squared error between drawn noise and the model's prediction.

    One timestep per sample is drawn uniformly from {0, ..., T-1}.
    """
    x0 = np.asarray(x0)
    if x0.shape[0] == 0:
        raise ValueError("training_loss needs a non-empty batch")
    t = rng.integers(0, schedule.num_steps, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape)
    x_t = q_sample(x0, t, eps, schedule)
    dtype = x0.dtype if x0.dtype in (np.float32, np.float64) else np.float32
    pred = model(x_t.astype(dtype), np.asarray(x_lq, dtype=dtype), t, priors)
    return F.mse(pred, eps.astype(pred.dtype))


def posterior(schedule: NoiseSchedule, t: int, t_prev: int, x0_hat: np.ndarray, x_t: np.ndarray):
    """Mean and variance of q(x_{t_prev} | x_t, x0) for a strided step t -> t_prev.

    The per-step beta is 1 - ᾱ_t / ᾱ_prev, which reduces to the usual DDPM
    posterior when t_prev = t - 1.
    """
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t_prev)
    beta = 1.0 - ab_t / ab_prev
    coef_x0 = np.sqrt(ab_prev) * beta / (1.0 - ab_t)
    coef_xt = np.sqrt(ab_t / ab_prev) * (1.0 - ab_prev) / (1.0 - ab_t)
    var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
    return coef_x0 * x0_hat + coef_xt * x_t, var


def restore(x_lq: np.ndarray, priors, model: Callable, schedule: NoiseSchedule,
            mode: str = "ancestral", seed: int = 0, trajectory: list | None = None) -> np.ndarray:
    """Sample x0 given the low-quality batch ``x_lq`` (B, ch, H, W) in [-1, 1].

    Walks the restoration timesteps from last to first.  ``ancestral`` draws
    from the strided posterior; ``deterministic`` takes the noiseless (eta=0)
    step.  The clamped x0 estimate of every step is appended to
    ``trajectory`` when given.
    """
    if mode not in ("ancestral", "deterministic"):
        raise ValueError(f"unknown sampler mode {mode!r}")
    x_lq = np.asarray(x_lq)
    dtype = x_lq.dtype if x_lq.dtype in (np.float32, np.float64) else np.float32
    rng = make_rng(seed, "restore")
    x = rng.standard_normal(x_lq.shape)
    taus = schedule.taus
    x0_hat = x
    with no_grad():
        for k in range(len(taus) - 1, -1, -1):
            t = int(taus[k])
            t_prev = int(taus[k - 1]) if k > 0 else -1
            eps = model(x.astype(dtype), x_lq.astype(dtype), np.full(x.shape[0], t), priors)
            eps = np.asarray(eps.data if isinstance(eps, Tensor) else eps, dtype=np.float64)
            ab_t = schedule.alpha_bar(t)
            x0_hat = np.clip((x - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t), -1.0, 1.0)
            if trajectory is not None:
                trajectory.append(x0_hat.copy())
            if t_prev < 0:
                break
            if mode == "ancestral":
                mean, var = posterior(schedule, t, t_prev, x0_hat, x)
                x = mean + np.sqrt(var) * rng.standard_normal(x.shape)
            else:
                ab_prev = schedule.alpha_bar(t_prev)
                eps_dir = (x - np.sqrt(ab_t) * x0_hat) / np.sqrt(1.0 - ab_t)
                x = np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_dir
    return x0_hat
