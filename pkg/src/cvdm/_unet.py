"""Fully convolutional encoder-decoder backbone shared by the condition net
and the noise predictor.

Blocks are two (conv -> softplus -> instance norm) sequences; downsampling is
a strided convolution that doubles the filter count, upsampling a transposed
convolution, with mirrored feature maps concatenated on the way up. There is
no dense layer anywhere, so the parameter count does not depend on the input
resolution and the same weights run at any spatial size divisible by
``2 ** (scales - 1)``.
"""

from __future__ import annotations

import torch
from torch import nn


class ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch, use_norm=True, padding_mode="zeros", dtype=torch.float64):
        super().__init__()
        kw = dict(kernel_size=3, padding=1, padding_mode=padding_mode, dtype=dtype)
        self.conv1 = nn.Conv2d(in_ch, out_ch, **kw)
        self.conv2 = nn.Conv2d(out_ch, out_ch, **kw)
        self.act = nn.Softplus()
        if use_norm:
            self.norm1 = nn.InstanceNorm2d(out_ch, affine=True, dtype=dtype)
            self.norm2 = nn.InstanceNorm2d(out_ch, affine=True, dtype=dtype)
        else:
            self.norm1 = nn.Identity()
            self.norm2 = nn.Identity()

    def forward(self, h):
        h = self.norm1(self.act(self.conv1(h)))
        h = self.norm2(self.act(self.conv2(h)))
        return h


class UNetBackbone(nn.Module):
    """Encoder-decoder trunk; the task head (final projection) is the caller's."""

    def __init__(
        self,
        in_channels: int,
        scales: int = 3,
        base_filters: int = 16,
        use_norm: bool = True,
        padding_mode: str = "zeros",
        dtype=torch.float64,
    ):
        super().__init__()
        if scales < 1:
            raise ValueError("scales must be >= 1")
        self.scales = scales
        widths = [base_filters * 2**s for s in range(scales)]
        self.out_channels = widths[0]

        kw = dict(padding_mode=padding_mode, dtype=dtype)
        self.enc = nn.ModuleList(
            [ConvBlock(in_channels if s == 0 else widths[s], widths[s], use_norm, **kw)
             for s in range(scales)]
        )
        self.down = nn.ModuleList(
            [nn.Conv2d(widths[s], widths[s + 1], kernel_size=3, stride=2, padding=1, **kw)
             for s in range(scales - 1)]
        )
        self.up = nn.ModuleList(
            [nn.ConvTranspose2d(widths[s + 1], widths[s], kernel_size=2, stride=2, dtype=dtype)
             for s in reversed(range(scales - 1))]
        )
        self.dec = nn.ModuleList(
            [ConvBlock(2 * widths[s], widths[s], use_norm, **kw)
             for s in reversed(range(scales - 1))]
        )

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        divisor = 2 ** (self.scales - 1)
        if h.shape[-1] % divisor or h.shape[-2] % divisor:
            raise ValueError(
                f"spatial size {tuple(h.shape[-2:])} not divisible by {divisor} "
                f"(scales={self.scales})"
            )
        skips = []
        for s in range(self.scales):
            h = self.enc[s](h)
            if s < self.scales - 1:
                skips.append(h)
                h = self.down[s](h)
        for up, dec in zip(self.up, self.dec):
            h = up(h)
            h = dec(torch.cat([h, skips.pop()], dim=1))
        return h
