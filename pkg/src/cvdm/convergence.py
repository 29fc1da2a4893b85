"""Measures how fast the discrete diffusion loss approaches its continuous
limit as the step count grows.

Both quantities are truncated to the same interval [t_start, 1], with
t_start fixed by the largest step count studied, because the signal-to-noise
ratio blows up toward t = 0. A closed-form error surrogate replaces a trained
predictor so the discretization effect is isolated from model quality. The
gap between the two losses shrinks like 1/T with a constant that grows with
the curvature of the signal-to-noise ratio, which is the behaviour the
schedule regularizer exists to control.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .autodiff import time_derivative
from .diffusion import sample_forward
from .schedule import ScheduleBase, _bcast_time
from .trainer import derive_seed

ERROR_PROFILES: dict[str, Callable] = {
    "linear": lambda t: t,
    "quadratic": lambda t: t**2,
    "sine": lambda t: torch.sin(torch.pi * t),
    "const": lambda t: torch.ones_like(t),
}


@dataclass
class SurrogatePredictor:
    """Deterministic stand-in predictor y_hat = y + delta * g(t).

    Profiles other than 'const' vanish at t = 0, matching the assumption
    that a competent predictor is exact where no noise has been injected.
    'const' exists because it telescopes the discrete sum exactly and so
    pins the implementation against a closed form.
    """

    y: torch.Tensor
    delta: float = 0.1
    profile: str = "linear"

    def g(self, t: torch.Tensor) -> torch.Tensor:
        try:
            return ERROR_PROFILES[self.profile](t)
        except KeyError:
            raise ValueError(f"unknown error profile {self.profile!r}") from None

    def predict(self, z_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        del z_t  # closed-form surrogate; independent of the latent
        return self.y + self.delta * _bcast_time(self.g(t), self.y.unsqueeze(0))


def _snr_fn(schedule: ScheduleBase):
    lam = schedule.lam(None)

    def fn(t: torch.Tensor) -> torch.Tensor:
        gamma = torch.exp(-lam * _bcast_time(schedule.rho(t), lam))
        return gamma / (1.0 - gamma)

    return fn


def _squared_error(surrogate: SurrogatePredictor, schedule: ScheduleBase,
                   t: torch.Tensor, mc_draws: int, seed: int) -> torch.Tensor:
    """E over noise draws of (y - y_hat)^2, element-wise, at each time."""
    lam = schedule.lam(None)
    gamma = torch.exp(-lam * _bcast_time(schedule.rho(t), lam))
    y = surrogate.y.unsqueeze(0)
    gen = torch.Generator().manual_seed(derive_seed(seed, "surrogate-eps"))
    total = None
    for _ in range(mc_draws):
        eps = torch.randn((t.shape[0], *surrogate.y.shape), generator=gen, dtype=y.dtype)
        z_t = sample_forward(y.expand_as(eps), gamma, eps)
        sq = (y - surrogate.predict(z_t, t)) ** 2
        total = sq if total is None else total + sq
    return total / mc_draws


def discrete_diffusion_loss(
    schedule: ScheduleBase,
    surrogate: SurrogatePredictor,
    T: int,
    *,
    t_start: float,
    mc_draws: int = 8,
    seed: int = 0,
) -> float:
    """Full-sum discrete loss on a T-point uniform grid over [t_start, 1]."""
    if T < 2:
        raise ValueError("T must be >= 2")
    t = torch.linspace(t_start, 1.0, T, dtype=torch.float64)
    snr = _snr_fn(schedule)(t)  # (T, elem...)
    err = _squared_error(surrogate, schedule, t, mc_draws, seed)
    terms = (snr[:-1] - snr[1:]) * err[1:]
    return float(0.5 * terms.sum(dim=tuple(range(1, terms.ndim))).sum())


def continuous_diffusion_loss(
    schedule: ScheduleBase,
    surrogate: SurrogatePredictor,
    *,
    t_start: float,
    n_nodes: int = 1024,
    mc_draws: int = 8,
    seed: int = 0,
    check_tol: Optional[float] = 1e-8,
) -> float:
    """Quadrature value of the continuous-limit loss over [t_start, 1].

    Gauss-Legendre nodes; the rate of change of the signal-to-noise ratio is
    taken by autodiff. With ``check_tol`` set, the node count is doubled and
    disagreement beyond the tolerance raises.
    """

    def integrate(n: int) -> float:
        nodes, weights = np.polynomial.legendre.leggauss(n)
        half = 0.5 * (1.0 - t_start)
        t = torch.as_tensor(t_start + half * (nodes + 1.0), dtype=torch.float64)
        snr_prime = time_derivative(_snr_fn(schedule), t, order=1).detach()
        err = _squared_error(surrogate, schedule, t, mc_draws, seed)
        integrand = (-snr_prime * err).sum(dim=tuple(range(1, err.ndim)))
        return float(0.5 * half * (torch.as_tensor(weights, dtype=torch.float64) * integrand).sum())

    value = integrate(n_nodes)
    if check_tol is not None:
        refined = integrate(2 * n_nodes)
        if abs(refined - value) > check_tol * max(1.0, abs(value)):
            raise RuntimeError(
                f"quadrature not converged: {value!r} vs {refined!r} at {n_nodes} nodes"
            )
    return value


def snr_curvature_norm(schedule: ScheduleBase, *, t_start: float,
                       n_nodes: int = 512) -> float:
    """L2([t_start, 1]) norm of the second derivative of the SNR (element mean)."""
    nodes, weights = np.polynomial.legendre.leggauss(n_nodes)
    half = 0.5 * (1.0 - t_start)
    t = torch.as_tensor(t_start + half * (nodes + 1.0), dtype=torch.float64)
    second = time_derivative(_snr_fn(schedule), t, order=2).detach()
    mean_sq = (second**2).mean(dim=tuple(range(1, second.ndim)))
    return float(torch.sqrt(half * (torch.as_tensor(weights, dtype=torch.float64) * mean_sq).sum()))


@dataclass
class ConvergenceReport:
    """Gap measurements for one schedule across a grid of step counts."""

    label: str
    T_grid: list[int]
    L_T: list[float]
    L_inf: float
    gaps: list[float] = field(default_factory=list)
    slope: float = float("nan")
    snr_curvature: float = float("nan")

    def fit_slope(self) -> None:
        logs = np.log(np.maximum(np.abs(self.gaps), 1e-300))
        self.slope = float(np.polyfit(np.log(self.T_grid), logs, 1)[0])


def convergence_report(
    schedules: list[tuple[str, ScheduleBase]],
    surrogate: SurrogatePredictor,
    T_grid: list[int],
    *,
    t_start: Optional[float] = None,
    mc_draws: int = 8,
    seed: int = 0,
    check_dominance: bool = True,
) -> list[ConvergenceReport]:
    """Per-schedule gap curves and fitted log-log slopes.

    With ``check_dominance`` the schedule with the larger SNR-curvature norm
    must show the larger gap at every common step count; a violation raises.
    """
    T_grid = sorted(T_grid)
    if t_start is None:
        t_start = 1.0 / max(T_grid)
    reports = []
    for label, schedule in schedules:
        L_inf = continuous_diffusion_loss(
            schedule, surrogate, t_start=t_start, mc_draws=mc_draws, seed=seed
        )
        L_T = [
            discrete_diffusion_loss(schedule, surrogate, T, t_start=t_start,
                                    mc_draws=mc_draws, seed=seed)
            for T in T_grid
        ]
        report = ConvergenceReport(
            label=label, T_grid=list(T_grid), L_T=L_T, L_inf=L_inf,
            gaps=[abs(lt - L_inf) for lt in L_T],
            snr_curvature=snr_curvature_norm(schedule, t_start=t_start),
        )
        report.fit_slope()
        reports.append(report)
    if check_dominance and len(reports) >= 2:
        ordered = sorted(reports, key=lambda r: r.snr_curvature)
        for low, high in zip(ordered[:-1], ordered[1:]):
            for T, g_low, g_high in zip(T_grid, low.gaps, high.gaps):
                if g_high <= g_low:
                    raise RuntimeError(
                        f"gap ordering violated at T={T}: "
                        f"{high.label} ({g_high:g}) <= {low.label} ({g_low:g})"
                    )
    return reports


def write_convergence_outputs(reports: list[ConvergenceReport], out_dir) -> dict:
    """CSV of the gap table plus a log-log plot; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "convergence.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "T", "L_T", "L_inf", "gap", "slope", "snr_curvature"])
        for r in reports:
            for T, lt, gap in zip(r.T_grid, r.L_T, r.gaps):
                writer.writerow([r.label, T, lt, r.L_inf, gap, r.slope, r.snr_curvature])

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for r in reports:
        ax.loglog(r.T_grid, r.gaps, "o-", label=f"{r.label} (slope {r.slope:.2f})")
    ax.set_xlabel("steps T")
    ax.set_ylabel("|L_T - L_inf|")
    ax.legend()
    fig.tight_layout()
    plot_path = out_dir / "convergence.png"
    fig.savefig(plot_path, dpi=120)
    plt.close(fig)
    return {"csv": csv_path, "plot": plot_path}
