"""Ancestral sampling of the reverse chain on a T-step discretization.

The chain starts from unit Gaussian noise and applies

    z_{t-1} = (z_t - beta_t / sqrt(1 - gamma_t) * eps_hat) / sqrt(alpha_t)
              + sqrt(beta_t) * eps,

with eps forced to zero on the final step. Three table modes are supported:
the learned rate divided by T (the continuum approximation), the exact
consecutive-gamma ratio, and a fixed linear ramp for the tuned-schedule
baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch

from .errors import NonFiniteError
from .schedule import EPS_CLIP, EPS_SIGMA, ScheduleBase, _bcast_time
from .trainer import derive_seed


@dataclass
class SamplerConfig:
    T: int = 100
    beta_mode: str = "learned_over_T"  # or "ratio_exact", "fixed_linear"
    linear_start: float = 1e-4
    linear_end: float = 0.03
    seed: int = 0
    n_samples: int = 1
    target_channels: int = 1

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.beta_mode not in ("learned_over_T", "ratio_exact", "fixed_linear"):
            raise ValueError(f"unknown beta_mode {self.beta_mode!r}")
        if self.beta_mode == "fixed_linear" and not (
            0.0 < self.linear_start <= self.linear_end < 1.0
        ):
            raise ValueError("fixed_linear needs 0 < start <= end < 1")


def build_tables(schedule: Optional[ScheduleBase], x, config: SamplerConfig, *, lam_map=None):
    """Per-step (beta_t, gamma_t) tables, indexed by step t = 1..T.

    In 'learned_over_T' mode gamma_t is the running product of alpha_t; in
    'ratio_exact' mode it is the schedule's own gamma on the grid, so the
    discretization gap between the two modes is directly measurable.
    """
    T = config.T
    if config.beta_mode == "fixed_linear":
        beta = torch.linspace(config.linear_start, config.linear_end, T, dtype=torch.float64)
        beta = beta.reshape(T, 1, 1, 1, 1)
        gamma = torch.cumprod(1.0 - beta, dim=0)
        return beta, gamma
    if schedule is None:
        raise ValueError("schedule required for learned beta modes")
    lam = lam_map if lam_map is not None else schedule.lam(x)
    t_grid = torch.arange(0, T + 1, dtype=lam.dtype) / T
    if config.beta_mode == "learned_over_T":
        beta = lam.unsqueeze(0) * _bcast_time(schedule.tau(t_grid[1:]), lam).unsqueeze(1) / T
        beta = torch.clamp(beta, EPS_CLIP, 1.0 - EPS_CLIP)
        gamma = torch.cumprod(1.0 - beta, dim=0)
    else:  # ratio_exact
        gamma_grid = torch.exp(-lam.unsqueeze(0) * _bcast_time(schedule.rho(t_grid), lam).unsqueeze(1))
        beta = 1.0 - gamma_grid[1:] / gamma_grid[:-1]
        gamma = gamma_grid[1:]
    return beta, gamma


def sample(
    x: torch.Tensor,
    denoiser,
    schedule: Optional[ScheduleBase],
    config: SamplerConfig,
    *,
    generator: Optional[torch.Generator] = None,
    tables=None,
) -> torch.Tensor:
    """Run one reverse chain and return the final latent (the reconstruction)."""
    if generator is None:
        generator = torch.Generator().manual_seed(derive_seed(config.seed, "chain", 0))
    beta, gamma = tables if tables is not None else build_tables(schedule, x, config)
    batch = x.shape[0]
    elem = (config.target_channels, *x.shape[2:])
    z = torch.randn((batch, *elem), generator=generator, dtype=torch.float64)
    with torch.no_grad():
        for step in range(config.T, 0, -1):
            beta_t = beta[step - 1].expand(batch, *elem)
            gamma_t = gamma[step - 1].expand(batch, *elem)
            alpha_t = 1.0 - beta_t
            eps_hat = denoiser(x, gamma_t, z)
            denom = torch.sqrt(torch.clamp(1.0 - gamma_t, min=EPS_SIGMA))
            mean = (z - beta_t / denom * eps_hat) / torch.sqrt(alpha_t)
            if step == 1:
                z = mean
            else:
                noise = torch.randn(z.shape, generator=generator, dtype=z.dtype)
                z = mean + torch.sqrt(beta_t) * noise
            if not torch.isfinite(z).all():
                raise NonFiniteError(f"non-finite latent at reverse step {step}")
    return z


@dataclass
class SampleStack:
    """A stack of reconstructions with its element-wise moments."""

    samples: torch.Tensor  # (n_samples, B, C, H, W)
    mean: torch.Tensor
    variance: torch.Tensor
    chain_seeds: list = field(default_factory=list)


def sample_batch(
    x: torch.Tensor,
    denoiser,
    schedule: Optional[ScheduleBase],
    config: SamplerConfig,
    *,
    chain_seeds: Optional[list] = None,
) -> SampleStack:
    """Draw ``config.n_samples`` independent chains and summarize them.

    The variance map needs at least two samples; chains are seeded from
    (seed, chain index) unless explicit seeds are given.
    """
    n = config.n_samples
    if n < 1:
        raise ValueError("n_samples must be >= 1")
    if chain_seeds is None:
        chain_seeds = [derive_seed(config.seed, "chain", i) for i in range(n)]
    if len(chain_seeds) != n:
        raise ValueError("need one chain seed per sample")
    tables = build_tables(schedule, x, config)
    draws = []
    for s in chain_seeds:
        g = torch.Generator().manual_seed(int(s))
        draws.append(sample(x, denoiser, schedule, config, generator=g, tables=tables))
    samples = torch.stack(draws, dim=0)
    mean = samples.mean(dim=0)
    variance = (
        samples.var(dim=0, unbiased=True) if n >= 2 else torch.zeros_like(mean)
    )
    return SampleStack(samples=samples, mean=mean, variance=variance,
                       chain_seeds=list(chain_seeds))


def beta_time_integral(schedule: ScheduleBase, x, n_points: int = 101) -> torch.Tensor:
    """Per-element integral of the rate over time (trapezoid on a uniform grid).

    This is the schedule-side quantity whose spatial pattern tracks the
    sample-variance map of the reconstructions.
    """
    with torch.no_grad():
        lam = schedule.lam(x)
        t = torch.linspace(0.0, 1.0, n_points, dtype=lam.dtype)
        tau = schedule.tau(t)  # (n_points,)
        integral = torch.trapz(tau, t)
        return lam * integral
