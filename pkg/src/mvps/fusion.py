"""Attention-guided latent condition features and their injection into copied encoders."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

RANGE_TOL = 1e-6


def zero_module(m: nn.Module) -> nn.Module:
    for p in m.parameters():
        nn.init.zeros_(p)
    return m


def zero_conv(cin: int, cout: int) -> nn.Conv2d:
    return zero_module(nn.Conv2d(cin, cout, 1))


class ConditionEncoder(nn.Module):
    """Stacked convolutions, two of them stride 2: (B, 3, H, W) -> (B, C, H/4, W/4)."""

    def __init__(self, out_channels: int = 128, in_channels: int = 3):
        super().__init__()
        c = out_channels
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, c // 4, 3, padding=1), nn.SiLU(),
            nn.Conv2d(c // 4, c // 2, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(c // 2, c, 3, stride=2, padding=1),
        )
        self.out_channels = c

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim != 4 or image.shape[-2] % 4 or image.shape[-1] % 4:
            raise ValueError(f"condition image must be (B, C, H, W) with H, W divisible by 4, got {tuple(image.shape)}")
        return self.net(image)


def to_latent(image: torch.Tensor, extractor: ConditionEncoder) -> torch.Tensor:
    return extractor(image)


def mask_to_latent(mask: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """(B, h, w) or (B, 1, h, w) attention -> (B, 1, *size), bilinear."""
    if mask.ndim == 3:
        mask = mask[:, None]
    if tuple(mask.shape[-2:]) == tuple(size):
        return mask
    return F.interpolate(mask, size=size, mode="bilinear", align_corners=False)


def hadamard_fuse(features: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """(1 + M) * F with M in [0, 1] broadcast over channels."""
    lo, hi = float(mask.detach().min()), float(mask.detach().max())
    if lo < -RANGE_TOL or hi > 1 + RANGE_TOL:
        raise ValueError(f"attention mask must lie in [0, 1], got [{lo:.3g}, {hi:.3g}]")
    if mask.ndim == features.ndim - 1:
        mask = mask.unsqueeze(1)
    return (1 + mask) * features


def spatial_norm(z: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Parameter-free per-channel normalization over spatial positions."""
    mean = z.mean((-2, -1), keepdim=True)
    var = z.var((-2, -1), keepdim=True, unbiased=False)
    return (z - mean) / torch.sqrt(var + eps)


class FDN(nn.Module):
    """Feature denormalization: norm(Z) * (1 + conv_gamma(c)) + conv_beta(c).

    ``c`` is expected to already be the zero-convolved extractor output, so at
    initialization the modulation terms vanish.
    """

    def __init__(self, cond_channels: int, channels: int):
        super().__init__()
        self.conv_gamma = nn.Conv2d(cond_channels, channels, 3, padding=1)
        self.conv_beta = nn.Conv2d(cond_channels, channels, 3, padding=1)
        nn.init.zeros_(self.conv_gamma.bias)
        nn.init.zeros_(self.conv_beta.bias)

    def forward(self, z: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        return fdn_inject(z, c, self)

    def modulation(self, z: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        """FDN(z, c) - norm(z): the part added onto the copied encoder's own features."""
        if z.shape[-2:] != c.shape[-2:]:
            raise ValueError(f"noise features {tuple(z.shape)} and condition {tuple(c.shape)} not aligned")
        return spatial_norm(z) * self.conv_gamma(c) + self.conv_beta(c)


def fdn_inject(z: torch.Tensor, c: torch.Tensor, fdn: FDN) -> torch.Tensor:
    if z.shape[-2:] != c.shape[-2:] or z.shape[0] != c.shape[0]:
        raise ValueError(f"noise features {tuple(z.shape)} and condition {tuple(c.shape)} not aligned")
    return spatial_norm(z) * (1 + fdn.conv_gamma(c)) + fdn.conv_beta(c)


class MultiscaleExtractor(nn.Module):
    """Fused condition (B, C, h, w) -> four zero-convolved maps at h, h/2, h/4, h/8."""

    def __init__(self, in_channels: int, level_channels: tuple[int, ...]):
        super().__init__()
        if len(level_channels) != 4:
            raise ValueError("injection needs exactly four levels")
        convs = []
        prev = in_channels
        for i, c in enumerate(level_channels):
            convs.append(nn.Conv2d(prev, c, 3, stride=1 if i == 0 else 2, padding=1))
            prev = c
        self.convs = nn.ModuleList(convs)
        self.zeros = nn.ModuleList(zero_conv(c, c) for c in level_channels)
        self.level_channels = tuple(level_channels)

    def forward(self, conditions: torch.Tensor | list[torch.Tensor]) -> list[torch.Tensor]:
        x = torch.cat(list(conditions), 1) if isinstance(conditions, (list, tuple)) else conditions
        out = []
        for conv, zero in zip(self.convs, self.zeros):
            x = F.silu(conv(x))
            out.append(zero(x))
        return out


def multiscale_extract(fused_conditions, extractor: MultiscaleExtractor,
                       expected_shapes: list[tuple[int, int, int]] | None = None) -> list[torch.Tensor]:
    bundle = extractor(fused_conditions)
    if expected_shapes is not None:
        got = [tuple(t.shape[1:]) for t in bundle]
        if got != [tuple(s) for s in expected_shapes]:
            raise ValueError(f"injection bundle shapes {got} do not match encoder blocks {expected_shapes}")
    return bundle
