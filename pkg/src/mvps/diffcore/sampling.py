"""Deterministic DDIM sampling with classifier-free guidance."""

from __future__ import annotations

from typing import Callable

import torch

from .schedule import NoiseSchedule

EpsFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def guided_eps(eps_cond: EpsFn, eps_uncond: EpsFn | None, cfg_scale: float) -> EpsFn:
    """eps_u + s * (eps_c - eps_u); a scale of exactly 1 returns the conditional prediction."""
    if cfg_scale == 1.0 or eps_uncond is None:
        return eps_cond

    def fn(x, t):
        c = eps_cond(x, t)
        u = eps_uncond(x, t)
        return u + cfg_scale * (c - u)

    return fn


def ddim_loop(eps_fn: EpsFn, x_T: torch.Tensor, schedule: NoiseSchedule, steps: int = 50,
              eta: float = 0.0, generator: torch.Generator | None = None,
              return_trajectory: bool = False, x0_fn: Callable[[torch.Tensor], torch.Tensor] | None = None):
    """Run the DDIM update over ``schedule.ddim_timesteps(steps)``; the final target is alpha_bar = 1.

    ``x0_fn`` maps each clean estimate onto the data domain (e.g. a range clip).
    The noise direction is then re-derived from the mapped estimate so the
    update stays consistent with the current sample.
    """
    ts = schedule.ddim_timesteps(steps)
    ab = torch.as_tensor(schedule.alpha_bar, dtype=torch.float64)
    x = x_T
    traj = [x]
    for i, t in enumerate(ts):
        a = ab[t].to(x.dtype)
        a_prev = ab[ts[i + 1]].to(x.dtype) if i + 1 < len(ts) else torch.ones((), dtype=x.dtype)
        tt = torch.full((x.shape[0],), int(t), dtype=torch.long, device=x.device)
        eps = eps_fn(x, tt)
        x0 = (x - (1 - a).sqrt() * eps) / a.sqrt()
        if x0_fn is not None and a < 1:
            x0 = x0_fn(x0)
            eps = (x - a.sqrt() * x0) / (1 - a).sqrt()
        if eta > 0 and a < 1:
            sigma = eta * ((1 - a_prev) / (1 - a) * (1 - a / a_prev)).clamp(min=0).sqrt()
        else:
            sigma = torch.zeros((), dtype=x.dtype)
        direction = (1 - a_prev - sigma ** 2).clamp(min=0).sqrt() * eps
        x = a_prev.sqrt() * x0 + direction
        if sigma > 0:
            x = x + sigma * torch.randn(x.shape, generator=generator, dtype=x.dtype).to(x.device)
        if return_trajectory:
            traj.append(x)
    return (x, traj) if return_trajectory else x
