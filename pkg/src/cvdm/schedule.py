"""Learned variance schedules factorized as gamma(t, x) = exp(-lambda(x) * rho(t)).

The time side is carried by two positive-weight monotone nets (``rho`` for the
integrated decay, ``tau`` for the instantaneous rate) and the condition side
by a softplus-output U-Net producing one positive rate per output element.
Closed-form stand-ins with the same interface back the numerical tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ._unet import UNetBackbone
from .errors import DomainError, SingularityError

DTYPE = torch.float64

# Numerical floors used throughout the package.
EPS_SIGMA = 1e-8   # variance floor wherever sigma appears in a denominator
EPS_GAMMA = 1e-8   # gamma floor for divisions by sqrt(gamma)
EPS_CLIP = 1e-5    # keeps per-step noise increments away from 0 and 1
EPS_MONO = 1e-4    # strict-monotonicity slope added to the integrated decay


def as_time(t, dtype=DTYPE) -> torch.Tensor:
    """Coerce a time argument to a 1-d tensor."""
    tt = torch.as_tensor(t, dtype=dtype)
    if tt.ndim == 0:
        tt = tt.reshape(1)
    if tt.ndim != 1:
        raise ValueError(f"time must be scalar or 1-d, got shape {tuple(tt.shape)}")
    return tt


def check_time_domain(t: torch.Tensor) -> None:
    with torch.no_grad():
        if bool((t < 0).any()) or bool((t > 1).any()):
            raise DomainError("time outside [0, 1]")


def _bcast_time(factor: torch.Tensor, lam: torch.Tensor) -> torch.Tensor:
    """Reshape a per-sample time factor (B,) against a rate map (B or 1, ...)."""
    return factor.reshape(-1, *([1] * (lam.ndim - 1)))


class MonotoneTimeNet(nn.Module):
    """Positive-weight residual block, nondecreasing in t, times t.

    The block is linear -> sigmoid (wide) -> linear with a skip around the
    hidden layer; weights go through softplus so every path is nondecreasing,
    and a final softplus keeps the pre-multiplication factor positive. The
    output is multiplied by t, so the function vanishes exactly at t = 0.
    A 1x1-convolutional reading of the same block is identical on the
    constant-in-space time input, so we use plain per-sample arithmetic.

    ``strict_slope`` adds that multiple of t, guaranteeing a strictly
    increasing output even where the learned factor plateaus near zero.
    """

    def __init__(self, hidden: int = 1024, strict_slope: float = 0.0, dtype=DTYPE):
        super().__init__()
        self.strict_slope = strict_slope
        self.w1 = nn.Parameter(torch.full((1,), -1.0, dtype=dtype))
        self.b1 = nn.Parameter(torch.zeros(1, dtype=dtype))
        self.w2 = nn.Parameter(torch.randn(hidden, dtype=dtype) * 0.5 - 1.0)
        self.b2 = nn.Parameter(torch.randn(hidden, dtype=dtype) * 0.5)
        self.w3 = nn.Parameter(torch.randn(hidden, dtype=dtype) * 0.05 - 4.0)
        self.b3 = nn.Parameter(torch.zeros(1, dtype=dtype))

    def factor(self, t: torch.Tensor) -> torch.Tensor:
        """The positive, nondecreasing factor before multiplication by t."""
        tt = t.reshape(-1, 1)
        h1 = F.softplus(self.w1) * tt + self.b1
        h2 = torch.sigmoid(h1 * F.softplus(self.w2) + self.b2)
        out = h2 @ F.softplus(self.w3).reshape(-1, 1) + self.b3 + h1
        return F.softplus(out).reshape(-1)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return t * (self.factor(t) + self.strict_slope)


class ConditionNet(nn.Module):
    """Per-element positive rate map lambda(x), matching the target's shape."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int = 1,
        scales: int = 3,
        base_filters: int = 16,
        use_norm: bool = True,
        dtype=DTYPE,
    ):
        super().__init__()
        self.backbone = UNetBackbone(
            in_channels, scales=scales, base_filters=base_filters,
            use_norm=use_norm, dtype=dtype,
        )
        self.head = nn.Conv2d(self.backbone.out_channels, out_channels,
                              kernel_size=3, padding=1, dtype=dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.softplus(self.head(self.backbone(x)))


class ScheduleBase:
    """Shared evaluation logic over the (rho, tau, lambda) factorization."""

    eps_sigma = EPS_SIGMA

    def rho(self, t: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def tau(self, t: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def lam(self, x: Optional[torch.Tensor]) -> torch.Tensor:
        raise NotImplementedError

    def _lam_map(self, x, lam_map):
        return lam_map if lam_map is not None else self.lam(x)

    def gamma(self, t, x=None, *, lam_map=None) -> torch.Tensor:
        t = as_time(t)
        check_time_domain(t)
        lam = self._lam_map(x, lam_map)
        return torch.exp(-lam * _bcast_time(self.rho(t), lam))

    def beta(self, t, x=None, *, lam_map=None) -> torch.Tensor:
        t = as_time(t)
        check_time_domain(t)
        lam = self._lam_map(x, lam_map)
        return lam * _bcast_time(self.tau(t), lam)

    def sigma(self, t, x=None, *, lam_map=None) -> torch.Tensor:
        return 1.0 - self.gamma(t, x, lam_map=lam_map)

    def snr(self, t, x=None, *, lam_map=None) -> torch.Tensor:
        g = self.gamma(t, x, lam_map=lam_map)
        s = 1.0 - g
        if bool((s < self.eps_sigma).any()):
            raise SingularityError(
                f"sigma below floor {self.eps_sigma:g}; SNR undefined this close to t=0"
            )
        return g / s


class ScheduleModel(ScheduleBase, nn.Module):
    """Learnable schedule: monotone time nets plus a condition net.

    mode 'pixelwise' keeps one rate per output element; 'global' collapses the
    rate map to its spatial mean, giving a single schedule per sample.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int = 1,
        mode: str = "pixelwise",
        scales: int = 3,
        base_filters: int = 16,
        time_hidden: int = 1024,
        use_norm: bool = True,
        dtype=DTYPE,
    ):
        nn.Module.__init__(self)
        if mode not in ("pixelwise", "global"):
            raise ValueError(f"unknown schedule mode {mode!r}")
        self.mode = mode
        self.rho_net = MonotoneTimeNet(time_hidden, strict_slope=EPS_MONO, dtype=dtype)
        self.tau_net = MonotoneTimeNet(time_hidden, strict_slope=0.0, dtype=dtype)
        self.lambda_net = ConditionNet(
            in_channels, out_channels, scales=scales, base_filters=base_filters,
            use_norm=use_norm, dtype=dtype,
        )

    def rho(self, t: torch.Tensor) -> torch.Tensor:
        return self.rho_net(t)

    def tau(self, t: torch.Tensor) -> torch.Tensor:
        return self.tau_net(t)

    def lam(self, x: torch.Tensor) -> torch.Tensor:
        if x is None:
            raise ValueError("learned schedule needs a condition tensor")
        if not torch.isfinite(x).all():
            raise ValueError("condition contains non-finite values")
        rates = self.lambda_net(x)
        if self.mode == "global":
            rates = rates.mean(dim=(1, 2, 3), keepdim=True).expand_as(rates)
        return rates


class AnalyticSchedule(ScheduleBase):
    """Closed-form schedule for tests and the discretization study.

    ``rho_fn`` and ``tau_fn`` are torch-traceable callables on 1-d time
    tensors; ``lam`` is a constant array broadcast against them. When
    ``tau_fn`` is the exact derivative of ``rho_fn`` the schedule satisfies
    the rate equation d(gamma)/dt = -beta * gamma identically.
    """

    def __init__(self, rho_fn: Callable, tau_fn: Callable, lam=1.0, dtype=DTYPE):
        self.rho_fn = rho_fn
        self.tau_fn = tau_fn
        lam_t = torch.as_tensor(lam, dtype=dtype)
        if lam_t.ndim == 0:
            lam_t = lam_t.reshape(1)
        self.lam_const = lam_t.unsqueeze(0)  # leading broadcast batch dim

    def rho(self, t: torch.Tensor) -> torch.Tensor:
        return self.rho_fn(t)

    def tau(self, t: torch.Tensor) -> torch.Tensor:
        return self.tau_fn(t)

    def lam(self, x=None) -> torch.Tensor:
        if x is None:
            return self.lam_const
        batch = x.shape[0] if hasattr(x, "shape") and x.ndim > 0 else 1
        return self.lam_const.expand(batch, *self.lam_const.shape[1:])

    @classmethod
    def exponential(cls, rate: float = 10.0, lam=1.0) -> "AnalyticSchedule":
        """gamma = exp(-lam * rate * t): rho(t) = rate*t, tau = rho'."""
        return cls(lambda t: rate * t, lambda t: torch.full_like(t, float(rate)), lam)

    @classmethod
    def sigmoidal(cls, sharpness: float = 20.0, midpoint: float = 0.5, lam=1.0) -> "AnalyticSchedule":
        """Smooth but steep decay of gamma around ``midpoint``.

        rho is a shifted softplus ramp with rho(0) = 0 and tau its exact
        derivative; larger ``sharpness`` concentrates the decay and inflates
        the curvature of the signal-to-noise ratio.
        """
        k, t0 = float(sharpness), float(midpoint)

        def rho_fn(t):
            return F.softplus(k * (t - t0)) - F.softplus(torch.as_tensor(-k * t0, dtype=t.dtype))

        def tau_fn(t):
            return k * torch.sigmoid(k * (t - t0))

        return cls(rho_fn, tau_fn, lam)


@dataclass
class DiscretizationTables:
    """Per-step noise increments and cumulative signal on the grid t_i = i/T.

    ``beta_hat[i-1]`` belongs to step i (i = 1..T); ``gamma_hat`` has T+1
    entries starting at 1 and is the running product of (1 - beta_hat).
    ``gamma_exact`` evaluates the schedule directly on the grid.
    """

    t: torch.Tensor
    beta_hat: torch.Tensor
    gamma_hat: torch.Tensor
    gamma_exact: torch.Tensor
    mode: str


def discretize(
    schedule: ScheduleBase,
    T: int,
    x=None,
    *,
    mode: str = "ratio",
    eps_clip: float = EPS_CLIP,
    lam_map=None,
) -> DiscretizationTables:
    """Discretize the schedule into T steps.

    mode 'ratio' defines the increment as one minus the ratio of consecutive
    grid gammas (telescopes exactly); mode 'over_T' divides the instantaneous
    rate by T, the continuum approximation, clamped into [0, 1 - eps_clip].
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if mode not in ("ratio", "over_T"):
        raise ValueError(f"unknown discretization mode {mode!r}")
    lam = lam_map if lam_map is not None else schedule.lam(x)
    t = torch.linspace(0.0, 1.0, T + 1, dtype=lam.dtype)
    gamma_exact = torch.exp(-lam.unsqueeze(0) * _bcast_time(schedule.rho(t), lam).unsqueeze(1))
    if mode == "ratio":
        beta_hat = 1.0 - gamma_exact[1:] / gamma_exact[:-1]
    else:
        beta_grid = lam.unsqueeze(0) * _bcast_time(schedule.tau(t[1:]), lam).unsqueeze(1)
        beta_hat = torch.clamp(beta_grid / T, 0.0, 1.0 - eps_clip)
    ones = torch.ones_like(gamma_exact[:1])
    gamma_hat = torch.cat([ones, torch.cumprod(1.0 - beta_hat, dim=0)], dim=0)
    return DiscretizationTables(t=t, beta_hat=beta_hat, gamma_hat=gamma_hat,
                                gamma_exact=gamma_exact, mode=mode)


def schedule_report_table(
    schedule: ScheduleBase,
    x: torch.Tensor,
    mask: Optional[np.ndarray] = None,
    n_points: int = 101,
) -> list[dict]:
    """Mean gamma/beta over a uniform time grid, optionally split by a mask.

    Returns one dict per grid time with keys t, gamma_mean, beta_mean and,
    when a boolean mask is given, *_masked / *_unmasked region means.
    """
    rows = []
    with torch.no_grad():
        lam = schedule.lam(x)
        mask_t = None
        if mask is not None:
            mask_t = torch.as_tensor(np.asarray(mask, dtype=bool))
            flat = lam[0, 0]
            if mask_t.shape != flat.shape:
                raise ValueError("mask shape must match the rate map's spatial shape")
        for t in np.linspace(0.0, 1.0, n_points):
            g = schedule.gamma(float(t), lam_map=lam)
            b = schedule.beta(float(t), lam_map=lam)
            row = {
                "t": float(t),
                "gamma_mean": float(g.mean()),
                "beta_mean": float(b.mean()),
            }
            if mask_t is not None:
                m = mask_t.expand_as(g[0]).unsqueeze(0).expand_as(g)
                row["gamma_masked"] = float(g[m].mean())
                row["gamma_unmasked"] = float(g[~m].mean())
                row["beta_masked"] = float(b[m].mean())
                row["beta_unmasked"] = float(b[~m].mean())
            rows.append(row)
    return rows
