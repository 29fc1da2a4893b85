"""The four training-loss terms and their Monte Carlo assembly.

Per batch element one time draw and one unit-noise draw feed every
time-sampled term. Element sums follow the squared-L2 convention; batch
averaging happens last, so scalar fixtures reproduce closed-form values
exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .autodiff import elementwise_time_grad, time_derivative, time_derivative_fd
from .diffusion import sample_forward
from .errors import SingularityError
from .schedule import EPS_SIGMA, ScheduleBase, _bcast_time, as_time


def _sum_elements(v: torch.Tensor) -> torch.Tensor:
    """Sum over all but the leading (sample) dimension."""
    return v.reshape(v.shape[0], -1).sum(dim=1)


def draw_t_eps(y: torch.Tensor, generator: torch.Generator):
    """One uniform time and one unit-normal noise field per batch element."""
    t = torch.rand(y.shape[0], generator=generator, dtype=y.dtype)
    eps = torch.randn(y.shape, generator=generator, dtype=y.dtype)
    return t, eps


def loss_beta(schedule: ScheduleBase, x=None, t=None, *, lam_map=None) -> torch.Tensor:
    """Rate-equation residual plus the two endpoint penalties.

    The residual d(gamma)/dt + beta * gamma is evaluated at the sampled times
    with the time derivative taken by autodiff; the endpoint terms pin
    gamma(0) to one and gamma(1) to zero and are evaluated exactly at t = 0
    and t = 1 rather than sampled.
    """
    lam = lam_map if lam_map is not None else schedule.lam(x)
    t = as_time(t).detach().clone().requires_grad_(True)

    def gamma_fn(tt):
        return torch.exp(-lam * _bcast_time(schedule.rho(tt), lam))

    gamma = gamma_fn(t)
    dgamma_dt = elementwise_time_grad(gamma, t)
    beta = lam * _bcast_time(schedule.tau(t), lam)
    residual = _sum_elements((dgamma_dt + beta * gamma) ** 2).mean()

    t0 = torch.zeros(1, dtype=lam.dtype)
    t1 = torch.ones(1, dtype=lam.dtype)
    gamma0 = torch.exp(-lam * _bcast_time(schedule.rho(t0), lam))
    gamma1 = torch.exp(-lam * _bcast_time(schedule.rho(t1), lam))
    boundary = _sum_elements((gamma0 - 1.0) ** 2).mean() + _sum_elements(gamma1**2).mean()
    return residual + boundary


def kl_prior(schedule: ScheduleBase, y, x=None, *, lam_map=None,
             eps_sigma=EPS_SIGMA) -> torch.Tensor:
    """Closed-form KL from the endpoint forward marginal to the unit Gaussian.

    Element-wise 0.5 * (sigma + gamma * y^2 - 1 - log sigma) at t = 1, summed
    over elements and averaged over the batch.
    """
    lam = lam_map if lam_map is not None else schedule.lam(x)
    gamma1 = torch.exp(-lam * _bcast_time(schedule.rho(torch.ones(1, dtype=lam.dtype)), lam))
    sigma1 = 1.0 - gamma1
    if bool((sigma1 < eps_sigma).any()):
        raise SingularityError(f"sigma(1, x) below floor {eps_sigma:g} in prior KL")
    kl = 0.5 * (sigma1 + gamma1 * y**2 - 1.0 - torch.log(sigma1))
    return _sum_elements(kl).mean()


def gaussian_kl_elementwise(gamma, y):
    """Per-element KL(N(sqrt(gamma) y, 1 - gamma) || N(0, 1)); test oracle hook."""
    sigma = 1.0 - gamma
    return 0.5 * (sigma + gamma * y**2 - 1.0 - torch.log(sigma))


def loss_diffusion_hat(
    denoiser,
    schedule: ScheduleBase,
    y,
    x,
    t,
    eps,
    *,
    lam_map=None,
    include_snr_ratio: bool = False,
) -> torch.Tensor:
    """Noise-prediction objective 0.5 * ||eps - eps_hat||^2, batch averaged.

    ``include_snr_ratio`` restores the rational schedule weight that the
    plain objective drops; it is off by default because it admits degenerate
    schedules that flatten the signal-to-noise ratio.
    """
    lam = lam_map if lam_map is not None else schedule.lam(x)
    t = as_time(t)
    gamma = torch.exp(-lam * _bcast_time(schedule.rho(t), lam))
    z_t = sample_forward(y, gamma, eps)
    eps_hat = denoiser(x, gamma, z_t)
    sq = (eps - eps_hat) ** 2
    if include_snr_ratio:
        tg = t.detach().clone().requires_grad_(True)
        gamma_g = torch.exp(-lam * _bcast_time(schedule.rho(tg), lam))
        dgamma_dt = elementwise_time_grad(gamma_g, tg)
        # -SNR'/SNR = -gamma' / (gamma * (1 - gamma)), positive for decaying gamma
        weight = -dgamma_dt / (gamma_g * torch.clamp(1.0 - gamma_g, min=EPS_SIGMA))
        sq = weight * sq
    return 0.5 * _sum_elements(sq).mean()


def curvature_penalty(gamma_fn, t, *, method: str = "autodiff",
                      fd_step: float = 1e-3) -> torch.Tensor:
    """Mean over times of the squared element sum of the second time derivative."""
    t = as_time(t)
    if method == "autodiff":
        second = time_derivative(gamma_fn, t, order=2)
    elif method == "fd":
        t = torch.clamp(t, fd_step, 1.0 - fd_step)
        second = time_derivative_fd(gamma_fn, t, order=2, step=fd_step)
    else:
        raise ValueError(f"unknown curvature method {method!r}")
    return _sum_elements(second**2).mean()


def loss_gamma_reg(schedule: ScheduleBase, x=None, t=None, *, lam_map=None,
                   method: str = "autodiff", fd_step: float = 1e-3) -> torch.Tensor:
    """Curvature regularizer applied to the schedule's gamma."""
    lam = lam_map if lam_map is not None else schedule.lam(x)

    def gamma_fn(tt):
        return torch.exp(-lam * _bcast_time(schedule.rho(tt), lam))

    return curvature_penalty(gamma_fn, t, method=method, fd_step=fd_step)


@dataclass
class LossTerms:
    """Unweighted loss terms, still attached to the autograd graph."""

    l_beta: torch.Tensor
    kl_prior: torch.Tensor
    l_inf_hat: torch.Tensor
    l_gamma: torch.Tensor


@dataclass
class LossBreakdown:
    """Scalar record of one loss evaluation."""

    l_beta: float
    kl_prior: float
    l_inf_hat: float
    l_gamma: float
    alpha: float
    total: float

    FIELDS = ("l_beta", "kl_prior", "l_inf_hat", "l_gamma", "alpha", "total")

    def as_row(self):
        return [getattr(self, f) for f in self.FIELDS]


def compute_terms(
    schedule: ScheduleBase,
    denoiser,
    y,
    x,
    t,
    eps,
    *,
    curvature_method: str = "autodiff",
    include_snr_ratio: bool = False,
) -> LossTerms:
    """Evaluate the four terms with a single shared rate-map forward pass."""
    lam = schedule.lam(x)
    return LossTerms(
        l_beta=loss_beta(schedule, t=t, lam_map=lam),
        kl_prior=kl_prior(schedule, y, lam_map=lam),
        l_inf_hat=loss_diffusion_hat(
            denoiser, schedule, y, x, t, eps,
            lam_map=lam, include_snr_ratio=include_snr_ratio,
        ),
        l_gamma=loss_gamma_reg(schedule, t=t, lam_map=lam, method=curvature_method),
    )


def assemble(terms: LossTerms, alpha: float):
    """Weight and sum the terms; returns the graph total and a float record."""
    total = terms.l_beta + terms.kl_prior + terms.l_inf_hat + alpha * terms.l_gamma
    breakdown = LossBreakdown(
        l_beta=float(terms.l_beta),
        kl_prior=float(terms.kl_prior),
        l_inf_hat=float(terms.l_inf_hat),
        l_gamma=float(terms.l_gamma),
        alpha=float(alpha),
        total=float(total),
    )
    return total, breakdown


def loss_total(
    schedule: ScheduleBase,
    denoiser,
    y,
    x,
    *,
    alpha: float,
    generator: torch.Generator,
    curvature_method: str = "autodiff",
    include_snr_ratio: bool = False,
):
    """One full loss evaluation with fresh (t, eps) draws from ``generator``."""
    t, eps = draw_t_eps(y, generator)
    terms = compute_terms(
        schedule, denoiser, y, x, t, eps,
        curvature_method=curvature_method, include_snr_ratio=include_snr_ratio,
    )
    return assemble(terms, alpha)


class AlphaPolicy:
    """Schedule-regularizer weight: fixed, or auto-balanced then frozen.

    The auto policy sets alpha to ``scale`` times the running ratio of the
    diffusion term to the curvature term over the first ``freeze_step``
    observations, then freezes. This keeps the regularizer a fixed small
    fraction of the dominant term without per-task tuning.
    """

    def __init__(self, fixed: float | None = None, scale: float = 1e-3,
                 freeze_step: int = 100):
        self.fixed = fixed
        self.scale = scale
        self.freeze_step = freeze_step
        self._sum_inf = 0.0
        self._sum_gamma = 0.0
        self._n = 0
        self._frozen: float | None = None

    def observe(self, step: int, l_inf_hat: float, l_gamma: float) -> float:
        if self.fixed is not None:
            return self.fixed
        if self._frozen is not None:
            return self._frozen
        self._sum_inf += l_inf_hat
        self._sum_gamma += l_gamma
        self._n += 1
        alpha = self.scale * self._sum_inf / max(self._sum_gamma, 1e-12)
        if step + 1 >= self.freeze_step:
            self._frozen = alpha
        return alpha

    def state(self) -> dict:
        return {
            "fixed": self.fixed, "scale": self.scale, "freeze_step": self.freeze_step,
            "sum_inf": self._sum_inf, "sum_gamma": self._sum_gamma,
            "n": self._n, "frozen": self._frozen,
        }

    @classmethod
    def from_state(cls, state: dict) -> "AlphaPolicy":
        policy = cls(state["fixed"], state["scale"], state["freeze_step"])
        policy._sum_inf = state["sum_inf"]
        policy._sum_gamma = state["sum_gamma"]
        policy._n = state["n"]
        policy._frozen = state["frozen"]
        return policy
