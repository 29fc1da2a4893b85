"""Forward-process sampling, Markov transition and posterior parameters, and
the algebra between noise prediction and target prediction.

All functions are pure given the schedule: the corruption of a target y at
time t is z_t = sqrt(gamma) * y + sqrt(1 - gamma) * eps under the
variance-preserving convention sigma = 1 - gamma. Finite-step quantities use
the exact ratio form of the per-step increment, 1 - gamma_i / gamma_{i-1},
which telescopes back to the marginal without approximation.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import SingularityError
from .schedule import EPS_GAMMA, EPS_SIGMA, ScheduleBase


@dataclass
class PosteriorParams:
    """Gaussian parameters of the reverse-step posterior."""

    mu: torch.Tensor
    var: torch.Tensor


def sample_forward(y, gamma, eps) -> torch.Tensor:
    """Draw z_t from the forward marginal given gamma(t, x) and unit noise."""
    if eps.shape != y.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != y shape {tuple(y.shape)}")
    return torch.sqrt(gamma) * y + torch.sqrt(1.0 - gamma) * eps


def transition_params(gamma_prev, gamma_cur):
    """Mean coefficient and variance of one forward Markov step.

    The step variance is the ratio increment 1 - gamma_cur / gamma_prev and
    the mean coefficient its complementary square root.
    """
    beta_hat = 1.0 - gamma_cur / gamma_prev
    return torch.sqrt(1.0 - beta_hat), beta_hat


def posterior_params(z, y, gamma_prev, gamma_cur, *, eps_sigma=EPS_SIGMA) -> PosteriorParams:
    """Parameters of q(z_{t_{i-1}} | z_{t_i}, y, x) in terms of grid gammas."""
    sigma_cur = 1.0 - gamma_cur
    if bool((sigma_cur < eps_sigma).any()):
        raise SingularityError(f"sigma below floor {eps_sigma:g} in posterior")
    beta_hat = 1.0 - gamma_cur / gamma_prev
    sigma_prev = 1.0 - gamma_prev
    mu = (
        torch.sqrt(1.0 - beta_hat) * sigma_prev / sigma_cur * z
        + torch.sqrt(gamma_prev) * beta_hat / sigma_cur * y
    )
    var = beta_hat * sigma_prev / sigma_cur
    return PosteriorParams(mu=mu, var=var)


def posterior_params_at(
    schedule: ScheduleBase, z, y, i: int, T: int, x=None, *, lam_map=None
) -> PosteriorParams:
    """Posterior at grid step i of T, evaluating the schedule on t = i/T."""
    if not 1 <= i <= T:
        raise ValueError(f"step index {i} outside 1..{T}")
    lam = lam_map if lam_map is not None else schedule.lam(x)
    gamma_prev = schedule.gamma((i - 1) / T, lam_map=lam)
    gamma_cur = schedule.gamma(i / T, lam_map=lam)
    return posterior_params(z, y, gamma_prev, gamma_cur)


def predict_y_from_eps(z, gamma, eps_hat, *, eps_gamma=EPS_GAMMA) -> torch.Tensor:
    """Invert the forward reparametrization: y_hat = (z - sqrt(1-gamma) * eps_hat) / sqrt(gamma)."""
    if bool((gamma < eps_gamma).any()):
        raise SingularityError(
            f"gamma below floor {eps_gamma:g}; target recovery unstable near t=1"
        )
    return (z - torch.sqrt(1.0 - gamma) * eps_hat) / torch.sqrt(gamma)


def eps_from_target(z, gamma, y, *, eps_sigma=EPS_SIGMA) -> torch.Tensor:
    """The noise consistent with (z, y) under the forward reparametrization."""
    sigma = 1.0 - gamma
    if bool((sigma < eps_sigma).any()):
        raise SingularityError(f"sigma below floor {eps_sigma:g}")
    return (z - torch.sqrt(gamma) * y) / torch.sqrt(sigma)
