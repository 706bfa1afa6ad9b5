"""Noise schedule and deterministic DDIM transport over a pluggable denoiser.

The engine never touches a neural network directly: anything satisfying the
Denoiser protocol can drive inversion and denoising. The bundled reference
denoisers are analytic, so the whole pipeline runs on a desk CPU and every
trajectory is exactly reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np
import torch


class ShapeMismatch(ValueError):
    """Tensor shapes disagree with the latent they should match."""


class DenoiserFailure(RuntimeError):
    """A denoiser backend could not produce a noise prediction."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients of a variance-preserving diffusion.

    alphas[t] is the cumulative signal coefficient at step t for t = 0..T,
    with alphas[0] == 1 by convention; values are strictly decreasing and
    lie in (0, 1].
    """

    alphas: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.alphas, dtype=float)
        if a.ndim != 1 or len(a) < 2:
            raise ValueError("schedule needs alphas for t = 0..T with T >= 1")
        if a[0] != 1.0:
            raise ValueError("alphas[0] must be 1.0")
        if np.any(a <= 0.0) or np.any(a > 1.0):
            raise ValueError("alphas must lie in (0, 1]")
        if np.any(np.diff(a) >= 0.0):
            raise ValueError("alphas must be strictly decreasing")
        object.__setattr__(self, "alphas", a)

    @property
    def total_steps(self) -> int:
        return len(self.alphas) - 1

    def alpha(self, t: int) -> float:
        if not 0 <= t <= self.total_steps:
            raise ValueError(f"timestep {t} outside [0, {self.total_steps}]")
        return float(self.alphas[t])

    @classmethod
    def scaled_linear(
        cls,
        total_steps: int = 1000,
        beta_start: float = 0.00085,
        beta_end: float = 0.012,
    ) -> "NoiseSchedule":
        """Scaled-linear beta schedule common in latent-diffusion deployments."""
        betas = (
            np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), total_steps) ** 2
        )
        alphas = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(alphas)


DEFAULT_SCHEDULE = NoiseSchedule.scaled_linear()


@dataclass
class LatentCode:
    """Spatial latent tensor (C, H, W) tagged with the timestep it lives at."""

    data: torch.Tensor
    timestep: int = 0

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise ShapeMismatch(f"latent must be (C, H, W), got {tuple(self.data.shape)}")
        if self.timestep < 0:
            raise ValueError("timestep must be >= 0")

    def clone(self) -> "LatentCode":
        return LatentCode(self.data.clone(), self.timestep)

    @property
    def spatial(self) -> tuple[int, int]:
        return int(self.data.shape[1]), int(self.data.shape[2])


class Denoiser(Protocol):
    """Noise predictor: deterministic given (latent, t, prompt)."""

    def predict_noise(self, latent: LatentCode, t: int, prompt: str) -> torch.Tensor:
        ...


class ZeroDenoiser:
    """Predicts zero noise; DDIM steps become exact rescalings."""

    def predict_noise(self, latent: LatentCode, t: int, prompt: str) -> torch.Tensor:
        return torch.zeros_like(latent.data)


class LinearDenoiser:
    """Predicts coef * latent; handy for closed-form trajectory oracles."""

    def __init__(self, coef: float = 0.1) -> None:
        self.coef = coef

    def predict_noise(self, latent: LatentCode, t: int, prompt: str) -> torch.Tensor:
        return self.coef * latent.data


def trajectory_indices(t_target: int, n_steps: int) -> list[int]:
    """Uniformly spaced integer schedule indices from 0 to t_target.

    Returns n_steps + 1 ascending indices when t_target allows it; duplicate
    rounded indices collapse, so very fine trajectories over a short range
    may hold fewer entries.
    """
    if t_target < 1:
        raise ValueError("t_target must be >= 1")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    idx = np.unique(np.linspace(0.0, float(t_target), n_steps + 1).round().astype(int))
    return [int(i) for i in idx]


def forward_diffuse(
    x0: LatentCode, t: int, noise: torch.Tensor, schedule: NoiseSchedule = DEFAULT_SCHEDULE
) -> LatentCode:
    """Closed-form forward diffusion: sqrt(a_t) x0 + sqrt(1 - a_t) noise."""
    if x0.timestep != 0:
        raise ValueError("forward diffusion starts from a clean latent (timestep 0)")
    if not 1 <= t <= schedule.total_steps:
        raise ValueError(f"t must be in [1, {schedule.total_steps}]")
    if noise.shape != x0.data.shape:
        raise ShapeMismatch(
            f"noise shape {tuple(noise.shape)} != latent shape {tuple(x0.data.shape)}"
        )
    a = schedule.alpha(t)
    return LatentCode(math.sqrt(a) * x0.data + math.sqrt(1.0 - a) * noise, t)


def ddim_step(
    z: LatentCode,
    t_to: int,
    denoiser: Denoiser,
    prompt: str = "",
    schedule: NoiseSchedule = DEFAULT_SCHEDULE,
) -> LatentCode:
    """One deterministic DDIM transition from z.timestep to t_to.

    Works in both directions: t_to < t is a denoising step, t_to > t an
    inversion step (noise predicted at the current point, as usual for
    ODE-reversal inversion). Differentiable through the denoiser.
    """
    t_from = z.timestep
    if t_to == t_from:
        return z.clone()
    a_from = schedule.alpha(t_from)
    a_to = schedule.alpha(t_to)
    eps = denoiser.predict_noise(z, t_from, prompt)
    if eps.shape != z.data.shape:
        raise ShapeMismatch("denoiser output shape differs from latent shape")
    x0_hat = (z.data - math.sqrt(1.0 - a_from) * eps) / math.sqrt(a_from)
    data = math.sqrt(a_to) * x0_hat + math.sqrt(1.0 - a_to) * eps
    return LatentCode(data, t_to)


def ddim_invert(
    x0: LatentCode,
    t_target: int,
    denoiser: Denoiser,
    prompt: str = "",
    n_steps: int = 50,
    schedule: NoiseSchedule = DEFAULT_SCHEDULE,
) -> LatentCode:
    """Deterministic inversion of a clean latent up to t_target."""
    if x0.timestep != 0:
        raise ValueError("inversion starts from a clean latent (timestep 0)")
    if not 1 <= t_target <= schedule.total_steps:
        raise ValueError(f"t_target must be in [1, {schedule.total_steps}]")
    z = x0
    for t in trajectory_indices(t_target, n_steps)[1:]:
        z = ddim_step(z, t, denoiser, prompt, schedule)
    return z


def ddim_denoise(
    z: LatentCode,
    denoiser: Denoiser,
    prompt: str = "",
    n_steps: int = 50,
    schedule: NoiseSchedule = DEFAULT_SCHEDULE,
) -> LatentCode:
    """Deterministic reverse trajectory from z down to timestep 0."""
    if z.timestep < 1:
        raise ValueError("latent is already clean (timestep 0)")
    grid = trajectory_indices(z.timestep, n_steps)
    out = z
    for t in reversed(grid[:-1]):
        out = ddim_step(out, t, denoiser, prompt, schedule)
    return out
