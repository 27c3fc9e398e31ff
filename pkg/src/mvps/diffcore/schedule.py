"""Stable Diffusion's "linear" variance schedule and the closed-form forward (noising) process."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class ScheduleConfig:
    T: int = 1000
    # Stable Diffusion's endpoints, spaced linearly in sqrt(beta); alpha_bar[T-1] is about 4.7e-3
    beta_start: float = 8.5e-4
    beta_end: float = 1.2e-2


class NoiseSchedule:
    """``alpha_bar[t]`` is the signal fraction after ``t`` noising steps.

    ``alpha_bar[0] == 1`` so t = 0 leaves the sample untouched; training draws
    t from [1, T). Betas follow the latent-diffusion "linear" convention, which
    interpolates sqrt(beta) and squares.
    """

    def __init__(self, T: int = 1000, beta_start: float = 8.5e-4, beta_end: float = 1.2e-2):
        if T < 2:
            raise ValueError("schedule needs T >= 2")
        self.T = T
        self.betas = np.linspace(beta_start ** 0.5, beta_end ** 0.5, T, dtype=np.float64) ** 2
        self.alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - self.betas)[:-1]])

    @classmethod
    def from_config(cls, cfg: ScheduleConfig) -> "NoiseSchedule":
        return cls(cfg.T, cfg.beta_start, cfg.beta_end)

    def ab(self, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        a = torch.as_tensor(self.alpha_bar, device=like.device)[t.long()].to(like.dtype)
        return a.reshape(-1, *([1] * (like.ndim - 1)))

    def q_sample(self, x0: torch.Tensor, t: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        a = self.ab(t, x0)
        return a.sqrt() * x0 + (1 - a).sqrt() * noise

    def variance(self, t: int, x0_var: float = 0.0) -> float:
        """Closed-form Var[x_t] for x0 with variance ``x0_var`` and unit Gaussian noise."""
        a = self.alpha_bar[t]
        return a * x0_var + (1 - a)

    def ddim_timesteps(self, steps: int) -> np.ndarray:
        """Descending, uniformly strided timesteps ending at stride - 1 ("trailing" spacing)."""
        if steps < 1:
            raise ValueError(f"DDIM needs steps >= 1, got {steps}")
        if steps > self.T:
            raise ValueError(f"steps {steps} exceeds T={self.T}")
        ts = np.round(np.arange(self.T, 0, -self.T / steps)).astype(np.int64) - 1
        return ts
