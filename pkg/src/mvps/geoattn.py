"""Geospatial attention: local per-panorama maps, weighted descriptors, global overhead map."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

# logits are clamped before the sigmoid so float32 outputs stay strictly inside (0, 1)
_LOGIT_CLAMP = 15.0


class FeatureEncoder(nn.Module):
    """Four conv stages with total stride 8, then a 1x1 projection with ReLU.

    Stands in for a pretrained backbone; anything mapping (B, 3, H, W) to
    (B, C, H/8, W/8) can be swapped in.
    """

    def __init__(self, out_channels: int = 32, width: int = 16, zero_init_final: bool = False):
        super().__init__()
        w = width
        self.stages = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1), nn.ReLU(),
            nn.Conv2d(w, w, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1), nn.ReLU(),
        )
        self.proj = nn.Conv2d(2 * w, out_channels, 1)
        self.out_channels = out_channels
        if zero_init_final:
            nn.init.zeros_(self.proj.weight)
            nn.init.zeros_(self.proj.bias)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return F.relu(self.proj(self.stages(image)))


def pool_channels(features: torch.Tensor) -> torch.Tensor:
    """(B, C, h, w) -> (B, 2, h, w): channel max and channel mean."""
    return torch.cat([features.amax(1, keepdim=True), features.mean(1, keepdim=True)], 1)


def encode_pooled(image: torch.Tensor, encoder: nn.Module,
                  size: tuple[int, int] | None = None) -> torch.Tensor:
    """Pooled 2-channel map of ``image``, optionally bilinearly resized to ``size``."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise ValueError(f"expected (B, 3, H, W) image, got {tuple(image.shape)}")
    pooled = pool_channels(encoder(image))
    if size is not None and tuple(pooled.shape[-2:]) != tuple(size):
        pooled = F.interpolate(pooled, size=size, mode="bilinear", align_corners=False)
    return pooled


def build_attention_input(pano2: torch.Tensor, sat2: torch.Tensor, dist1: torch.Tensor,
                          orient3: torch.Tensor) -> torch.Tensor:
    """Concatenate to (B, 8, h, w): pano max/mean, sat max/mean, distance, orientation e/n/u."""
    parts = {"pano": (pano2, 2), "sat": (sat2, 2), "dist": (dist1, 1), "orient": (orient3, 3)}
    shape = pano2.shape[-2:]
    for name, (t, c) in parts.items():
        if t.ndim != 4 or t.shape[1] != c or t.shape[-2:] != shape or t.shape[0] != pano2.shape[0]:
            raise ValueError(f"{name} input has shape {tuple(t.shape)}, expected (B, {c}, {tuple(shape)})")
    return torch.cat([pano2, sat2, dist1, orient3], 1)


class LocalAttention(nn.Module):
    """Parallel 3x3 / 5x5 convs, 1x1 fusion to one channel, softmax over all positions."""

    def __init__(self, hidden: int = 8):
        super().__init__()
        self.conv3 = nn.Conv2d(8, hidden, 3, padding=1)
        self.conv5 = nn.Conv2d(8, hidden, 5, padding=2)
        self.fuse = nn.Conv2d(2 * hidden, 1, 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.cat([F.relu(self.conv3(x)), F.relu(self.conv5(x))], 1)
        return self.fuse(h)[:, 0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 8, h, w) -> (B, h, w) distribution over positions."""
        z = self.logits(x)
        B, h, w = z.shape
        return torch.softmax(z.reshape(B, h * w), dim=1).reshape(B, h, w)


def upsample_attention(weights: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear copy of a (B, h, w) map at ``size``; values are not renormalized."""
    return F.interpolate(weights[:, None], size=size, mode="bilinear", align_corners=False)[:, 0]


def attention_descriptor(features: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Per-channel Frobenius inner product: (B, C, h, w) x (B, h, w) -> (B, C)."""
    if features.shape[0] != weights.shape[0] or features.shape[-2:] != weights.shape[-2:]:
        raise ValueError(
            f"feature map {tuple(features.shape)} and attention {tuple(weights.shape)} do not align")
    return torch.einsum("bchw,bhw->bc", features, weights)


def geometry_code(distance: torch.Tensor, bearing_deg: torch.Tensor) -> torch.Tensor:
    """(..., ) scaled distance and bearing -> (..., 3) [distance, sin, cos]."""
    b = torch.deg2rad(bearing_deg)
    return torch.stack([distance, torch.sin(b), torch.cos(b)], -1)


class GlobalAttention(nn.Module):
    """Masked mean of geometry-augmented descriptors -> affine -> grid -> upsample -> BN -> sigmoid."""

    def __init__(self, descriptor_dim: int, grid: int = 32, out_size: int = 256):
        super().__init__()
        self.grid = grid
        self.out_size = out_size
        self.affine = nn.Linear(descriptor_dim + 3, grid * grid)
        self.norm = nn.BatchNorm2d(1)

    def forward(self, descriptors: torch.Tensor, geometry: torch.Tensor,
                mask: torch.Tensor | None = None) -> torch.Tensor:
        """descriptors (B, N, C), geometry (B, N, 3), mask (B, N) true = present -> (B, S, S)."""
        B, N, _ = descriptors.shape
        if mask is None:
            mask = torch.ones(B, N, dtype=torch.bool, device=descriptors.device)
        counts = mask.sum(1)
        if (counts == 0).any():
            raise ValueError("global attention needs at least one unmasked descriptor per item")
        x = torch.cat([descriptors, geometry.to(descriptors.dtype)], -1)
        m = mask.to(x.dtype)[..., None]
        pooled = (x * m).sum(1) / counts.to(x.dtype)[:, None]
        grid = self.affine(pooled).reshape(B, 1, self.grid, self.grid)
        up = F.interpolate(grid, size=(self.out_size, self.out_size), mode="bilinear", align_corners=False)
        z = self.norm(up).clamp(-_LOGIT_CLAMP, _LOGIT_CLAMP)
        return torch.sigmoid(z)[:, 0]


class GeoAttentionAdapter(nn.Module):
    """Bundles the encoders and both attention heads.

    ``forward`` consumes an attention set of panoramas per item and returns the
    local maps (feature grid), descriptors and the global overhead map.
    """

    def __init__(self, feat_channels: int = 32, encoder_width: int = 16, local_hidden: int = 8,
                 global_grid: int = 32, global_size: int = 256):
        super().__init__()
        self.pano_encoder = FeatureEncoder(feat_channels, encoder_width)
        self.sat_encoder = FeatureEncoder(feat_channels, encoder_width)
        self.local = LocalAttention(local_hidden)
        self.glob = GlobalAttention(feat_channels, global_grid, global_size)

    def forward(self, panos: torch.Tensor, mask: torch.Tensor, sat: torch.Tensor,
                distance: torch.Tensor, bearing: torch.Tensor, orientation: torch.Tensor):
        """
        panos (B, N, 3, H, W); mask (B, N); sat (B, 3, S, S); distance, bearing (B, N);
        orientation (B, N, 3, h, w) at the feature grid. Returns (local (B, N, h, w),
        descriptors (B, N, C), global (B, S', S')).
        """
        B, N = panos.shape[:2]
        flat = panos.flatten(0, 1)
        feats = self.pano_encoder(flat)
        h, w = feats.shape[-2:]
        if orientation.shape[-2:] != (h, w):
            raise ValueError(f"orientation grid {tuple(orientation.shape[-2:])} != feature grid {(h, w)}")
        pano2 = pool_channels(feats)
        sat2 = encode_pooled(sat, self.sat_encoder, (h, w))
        sat2 = sat2[:, None].expand(B, N, 2, h, w).flatten(0, 1)
        dist1 = distance.reshape(B * N, 1, 1, 1).expand(B * N, 1, h, w).to(feats.dtype)
        x8 = build_attention_input(pano2, sat2, dist1, orientation.flatten(0, 1).to(feats.dtype))
        local = self.local(x8)
        desc = attention_descriptor(feats, local)
        local, desc = local.reshape(B, N, h, w), desc.reshape(B, N, -1)
        glob = self.glob(desc, geometry_code(distance, bearing), mask)
        return local, desc, glob
