"""Noise schedule, forward noising, deterministic DDIM updates and few-step plans.

Timesteps are 0-indexed: ``alpha_bars[t]`` is the cumulative signal fraction
after ``t + 1`` noising steps, so ``t`` ranges over ``[0, T - 1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch

# Passed as ``tau_prev`` to ``ddim_step`` to request the clean (alpha_bar = 1) endpoint.
FINAL_STEP = -1

Timestep = Union[int, torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    betas: tuple[float, ...]
    alpha_bars: tuple[float, ...]

    @property
    def total_steps(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: Timestep, like: torch.Tensor | None = None) -> torch.Tensor:
        """Gather alpha_bar at integer timestep(s) ``t``.

        A scalar ``t`` gives a 0-d tensor; a 1-d tensor of timesteps gives one
        value per batch element, shaped to broadcast against ``like``.
        """
        dtype = like.dtype if like is not None else torch.float64
        table = torch.tensor(self.alpha_bars, dtype=torch.float64)
        t_idx = torch.as_tensor(t, dtype=torch.long)
        if t_idx.numel() and (int(t_idx.min()) < 0 or int(t_idx.max()) >= self.total_steps):
            raise ValueError(f"timestep out of range [0, {self.total_steps - 1}]: {t}")
        out = table[t_idx].to(dtype)
        if like is not None and out.dim() == 1:
            out = out.view(-1, *([1] * (like.dim() - 1)))
        return out


def _from_betas(betas: np.ndarray) -> NoiseSchedule:
    if betas.ndim != 1 or betas.size < 1:
        raise ValueError("schedule needs at least one beta")
    if np.any(betas <= 0.0) or np.any(betas >= 1.0):
        raise ValueError("betas must lie in (0, 1)")
    alpha_bars = np.cumprod(1.0 - betas, dtype=np.float64)
    return NoiseSchedule(tuple(float(b) for b in betas), tuple(float(a) for a in alpha_bars))


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be positive, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return _from_betas(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def make_scaled_linear_schedule(
    T: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012
) -> NoiseSchedule:
    """Betas linear in sqrt-space (the latent-diffusion convention)."""
    if T < 1:
        raise ValueError(f"T must be positive, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return _from_betas(np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), T, dtype=np.float64) ** 2)


SCHEDULES = {"linear": make_linear_schedule, "scaled_linear": make_scaled_linear_schedule}


def make_schedule(kind: str, T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    try:
        factory = SCHEDULES[kind]
    except KeyError:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {sorted(SCHEDULES)}") from None
    return factory(T, beta_start, beta_end)


def forward_diffuse(z0: torch.Tensor, t: Timestep, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps."""
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch: z0 {tuple(z0.shape)} vs eps {tuple(eps.shape)}")
    abar = sched.alpha_bar(t, like=z0)
    return abar.sqrt() * z0 + (1.0 - abar).sqrt() * eps


def ddim_step(
    z_tau: torch.Tensor,
    eps_hat: torch.Tensor,
    tau: int,
    tau_prev: int,
    sched: NoiseSchedule,
    clip_x0: Optional[tuple[float, float]] = None,
) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM move from ``tau`` to ``tau_prev``.

    ``tau_prev == FINAL_STEP`` treats alpha_bar as 1 and returns the x0 estimate.
    ``clip_x0`` clamps the x0 estimate to a known data range before re-noising;
    eps_hat itself is reused unchanged.
    """
    if z_tau.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: z {tuple(z_tau.shape)} vs eps_hat {tuple(eps_hat.shape)}")
    if tau_prev != FINAL_STEP and not tau_prev < tau:
        raise ValueError(f"timesteps must descend: tau={tau}, tau_prev={tau_prev}")
    abar = sched.alpha_bar(tau, like=z_tau)
    x0 = (z_tau - (1.0 - abar).sqrt() * eps_hat) / abar.sqrt()
    if clip_x0 is not None:
        x0 = x0.clamp(*clip_x0)
    if tau_prev == FINAL_STEP:
        return x0
    abar_prev = sched.alpha_bar(tau_prev, like=z_tau)
    return abar_prev.sqrt() * x0 + (1.0 - abar_prev).sqrt() * eps_hat


@dataclass(frozen=True)
class TimestepPlan:
    taus: tuple[int, ...]

    def __post_init__(self):
        if not self.taus:
            raise ValueError("empty timestep plan")
        if any(b >= a for a, b in zip(self.taus, self.taus[1:])):
            raise ValueError(f"plan must be strictly decreasing: {self.taus}")
        if self.taus[-1] < 0:
            raise ValueError(f"negative timestep in plan: {self.taus}")

    @property
    def n_steps(self) -> int:
        return len(self.taus)

    def prev(self, i: int) -> int:
        """Target timestep after step ``i`` (0-based); FINAL_STEP after the last."""
        return self.taus[i + 1] if i + 1 < len(self.taus) else FINAL_STEP


def make_timestep_plan(n_steps: int, T: int) -> TimestepPlan:
    """Trailing spacing: tau_i = ceil(T * i / n) - 1 for i = n..1."""
    if n_steps < 1:
        raise ValueError(f"n_steps must be positive, got {n_steps}")
    if n_steps > T:
        raise ValueError(f"n_steps={n_steps} exceeds T={T}")
    # integer ceil avoids float rounding at exact multiples
    taus = tuple(-(-T * i // n_steps) - 1 for i in range(n_steps, 0, -1))
    return TimestepPlan(taus)


def plan_from_taus(taus: Sequence[int]) -> TimestepPlan:
    return TimestepPlan(tuple(int(t) for t in taus))
