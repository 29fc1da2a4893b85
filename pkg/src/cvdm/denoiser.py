"""Noise prediction model conditioned by concatenation.

The network sees the condition x, the current signal fraction gamma(t, x) as
a map, and the latent z_t, stacked along channels. Time never enters as an
embedding; it reaches the network only through the schedule value, which is
what lets a trained model run at a different step count or grid without
retraining.
"""

from __future__ import annotations

import torch
from torch import nn

from ._unet import UNetBackbone
from .errors import NonFiniteError
from .schedule import DTYPE, ScheduleBase


class DenoiserModel(nn.Module):
    """Encoder-decoder noise predictor with a linear, zero-initialized head.

    Zero initialization makes the initial prediction identically zero, which
    pins the early diffusion loss at its known constant and keeps the first
    schedule updates well scaled.
    """

    def __init__(
        self,
        cond_channels: int,
        target_channels: int = 1,
        scales: int = 3,
        base_filters: int = 16,
        use_norm: bool = True,
        padding_mode: str = "zeros",
        dtype=DTYPE,
    ):
        super().__init__()
        self.backbone = UNetBackbone(
            cond_channels + 2 * target_channels,
            scales=scales,
            base_filters=base_filters,
            use_norm=use_norm,
            padding_mode=padding_mode,
            dtype=dtype,
        )
        self.head = nn.Conv2d(
            self.backbone.out_channels, target_channels,
            kernel_size=3, padding=1, padding_mode=padding_mode, dtype=dtype,
        )
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor, gamma: torch.Tensor, z_t: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] != z_t.shape[-2:]:
            raise ValueError(
                f"condition {tuple(x.shape)} and latent {tuple(z_t.shape)} not spatially aligned"
            )
        if gamma.shape != z_t.shape:
            gamma = gamma.expand_as(z_t)
        h = torch.cat([x, gamma, z_t], dim=1)
        if not torch.isfinite(h).all():
            raise NonFiniteError("non-finite denoiser input")
        return self.head(self.backbone(h))


def predict_noise(
    denoiser: DenoiserModel,
    schedule: ScheduleBase,
    z_t: torch.Tensor,
    t,
    x: torch.Tensor,
) -> torch.Tensor:
    """Evaluate the denoiser at time t, feeding it the current schedule value."""
    gamma = schedule.gamma(t, x)
    return denoiser(x, gamma, z_t)


class OracleDenoiser:
    """Idealized plug-in predictor that knows the true target.

    It returns the noise exactly consistent with (z_t, gamma, y_true), which
    makes the reverse chain's behaviour analyzable; useful for sampler and
    loss tests, never for real inference.
    """

    def __init__(self, y_true: torch.Tensor, eps_sigma: float = 1e-12):
        self.y_true = y_true
        self.eps_sigma = eps_sigma

    def __call__(self, x, gamma, z_t):
        sigma = torch.clamp(1.0 - gamma, min=self.eps_sigma)
        return (z_t - torch.sqrt(gamma) * self.y_true) / torch.sqrt(sigma)
