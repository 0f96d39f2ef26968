"""Denoising-diffusion training objective, DDIM sampling, classifier-free guidance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ConfigError
from .tensor import ShapeError, Tensor, no_grad


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta ramp with cumulative signal levels, kept in fp64."""

    timesteps: int
    betas: np.ndarray
    alpha_bars: np.ndarray


@dataclass(frozen=True)
class GuidanceSpec:
    scale: float
    null_class: int


def make_schedule(timesteps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if timesteps < 1:
        raise ConfigError("timesteps must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(timesteps, betas, alpha_bars)


def q_sample(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Forward noising: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if x0.shape != eps.shape:
        raise ShapeError(f"q_sample: x0 {x0.shape} and eps {eps.shape} differ")
    t = np.asarray(t)
    if t.min() < 0 or t.max() >= schedule.timesteps:
        raise ValueError(f"timestep outside [0, {schedule.timesteps})")
    ab = schedule.alpha_bars[t].reshape(-1, *([1] * (x0.ndim - 1)))
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype)


def denoise_loss(model, x0_batch: np.ndarray, labels: np.ndarray, schedule: NoiseSchedule,
                 rng: np.random.Generator, p_null: float = 0.1) -> Tensor:
    """Epsilon-prediction MSE with label dropout for classifier-free guidance."""
    b = x0_batch.shape[0]
    t = rng.integers(0, schedule.timesteps, size=b)
    eps = rng.standard_normal(x0_batch.shape).astype(x0_batch.dtype)
    labels = np.asarray(labels).copy()
    if p_null > 0:
        null = model.cfg.n_classes
        labels[rng.random(b) < p_null] = null
    x_t = q_sample(x0_batch, t, eps, schedule)
    pred = model(x_t, labels, t)
    return ((pred - Tensor(eps)) ** 2).mean()


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, scale: float) -> np.ndarray:
    """eps_uncond + s * (eps_cond - eps_uncond); s=1 is the conditional prediction."""
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError(f"cfg_combine: shapes {eps_cond.shape} and {eps_uncond.shape} differ")
    return eps_uncond + scale * (eps_cond - eps_uncond)


def sampling_timesteps(timesteps: int, n_steps: int) -> np.ndarray:
    """Evenly spaced descending subsequence of [0, timesteps)."""
    if n_steps > timesteps:
        raise ConfigError(f"n_steps={n_steps} exceeds schedule length {timesteps}")
    # anchored at the noisiest step so even n_steps=1 denoises from pure noise
    ts = np.linspace(timesteps - 1, 0, n_steps).round().astype(np.int64)
    return np.unique(ts)[::-1]


def ddim_sample(model, labels: np.ndarray, schedule: NoiseSchedule, n_steps: int,
                guidance: GuidanceSpec, rng: np.random.Generator, image_size: int,
                channels: int = 1, clip_x0: bool = True) -> np.ndarray:
    """Deterministic (eta=0) sampling over a timestep subsequence.

    Per step, with e the (guided) noise estimate at t:
        x0_hat = (x_t - sqrt(1 - abar_t) e) / sqrt(abar_t)
        x_prev = sqrt(abar_prev) x0_hat + sqrt(1 - abar_prev) e
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    ts = sampling_timesteps(schedule.timesteps, n_steps)
    x = rng.standard_normal((n, channels, image_size, image_size)).astype(np.float32)
    null = np.full(n, guidance.null_class, dtype=labels.dtype)
    with no_grad():
        for i, t in enumerate(ts):
            tb = np.full(n, t, dtype=np.int64)
            eps = model(x, labels, tb).numpy()
            if guidance.scale != 1.0:
                eps_uncond = model(x, null, tb).numpy()
                eps = cfg_combine(eps, eps_uncond, guidance.scale)
            ab_t = schedule.alpha_bars[t]
            ab_prev = schedule.alpha_bars[ts[i + 1]] if i + 1 < len(ts) else 1.0
            x0_hat = (x - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
            if clip_x0:
                x0_hat = np.clip(x0_hat, -1.0, 1.0)
            x = (np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps).astype(np.float32)
    return x
