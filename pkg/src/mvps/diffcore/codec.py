"""Fixed latent codecs: 8-bit image <-> diffusion latent at 1/4 resolution."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

FACTOR = 4


def image_to_tensor(img: np.ndarray) -> torch.Tensor:
    """uint8 (H, W, 3) or (B, H, W, 3) -> float (B, 3, H, W) in [-1, 1]."""
    x = torch.as_tensor(np.asarray(img), dtype=torch.float32)
    if x.ndim == 3:
        x = x[None]
    return x.permute(0, 3, 1, 2) / 127.5 - 1.0


def tensor_to_image(x: torch.Tensor) -> np.ndarray:
    """float (B, 3, H, W) in [-1, 1] -> uint8 (B, H, W, 3)."""
    y = ((x.detach().float().clamp(-1, 1) + 1.0) * 127.5).round()
    return y.permute(0, 2, 3, 1).cpu().numpy().astype(np.uint8)


def _dct_matrix(n: int) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    m[0] /= np.sqrt(2.0)
    return m


def _zigzag(n: int) -> list[tuple[int, int]]:
    return sorted(((u, v) for u in range(n) for v in range(n)), key=lambda p: (p[0] + p[1], p[0]))


class BlockDCTCodec:
    """Orthonormal 4x4 block DCT per color channel.

    Latent channels are ordered by frequency (zig-zag) and then color, so
    channels 0-2 are the block means (area downsample) and the rest carry the
    detail. With all 48 channels the transform is exactly invertible.
    """

    def __init__(self, channels: int = 48):
        full = 3 * FACTOR * FACTOR
        if channels % 3 or not 3 <= channels <= full:
            raise ValueError(f"DCT codec channels must be a multiple of 3 in [3, {full}]")
        self.channels = channels
        d = _dct_matrix(FACTOR)
        basis = np.einsum("ui,vj->uvij", d, d)  # (u, v, i, j)
        freqs = _zigzag(FACTOR)[: channels // 3]
        kernels = np.stack([basis[u, v] for u, v in freqs])  # (F, 4, 4)
        # DC scaled so channels 0-2 equal the 4x4 area mean exactly
        scale = np.ones(len(freqs))
        scale[0] = 1.0 / FACTOR
        self.scale = torch.tensor(np.repeat(scale, 3), dtype=torch.float32)
        w = np.zeros((3 * len(freqs), 3, FACTOR, FACTOR))
        for f, k in enumerate(kernels):
            for c in range(3):
                w[3 * f + c, c] = k
        self.weight = torch.tensor(w, dtype=torch.float32)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % FACTOR or x.shape[-2] % FACTOR:
            raise ValueError(f"image size {tuple(x.shape[-2:])} must be divisible by {FACTOR}")
        w = self.weight.to(x)
        return F.conv2d(x, w, stride=FACTOR) * self.scale.to(x)[None, :, None, None]

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        w = self.weight.to(z)
        return F.conv_transpose2d(z / self.scale.to(z)[None, :, None, None], w, stride=FACTOR)


class AreaLatentCodec:
    """4x area downsample with a fixed linear lift 3 -> C; bilinear upsampling on decode."""

    def __init__(self, channels: int = 4):
        if channels < 3:
            raise ValueError("area codec needs at least 3 channels")
        self.channels = channels
        lift = np.zeros((channels, 3))
        lift[:3] = np.eye(3)
        for c in range(3, channels):
            lift[c] = 1.0 / 3.0  # extra channels carry luminance
        self.lift = torch.tensor(lift, dtype=torch.float32)
        self.unlift = torch.tensor(np.linalg.pinv(lift), dtype=torch.float32)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % FACTOR or x.shape[-2] % FACTOR:
            raise ValueError(f"image size {tuple(x.shape[-2:])} must be divisible by {FACTOR}")
        z = F.avg_pool2d(x, FACTOR)
        return torch.einsum("oc,bchw->bohw", self.lift.to(z), z)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        rgb = torch.einsum("co,bohw->bchw", self.unlift.to(z), z)
        return F.interpolate(rgb, scale_factor=FACTOR, mode="bilinear", align_corners=False)


def make_codec(kind: str, channels: int):
    if kind == "dct":
        return BlockDCTCodec(channels)
    if kind == "area":
        return AreaLatentCodec(channels)
    raise ValueError(f"unknown codec {kind!r}")


def encode_latent(image: np.ndarray, codec=None) -> torch.Tensor:
    codec = codec or BlockDCTCodec()
    return codec.encode(image_to_tensor(image))


def decode_latent(latent: torch.Tensor, codec=None) -> np.ndarray:
    codec = codec or BlockDCTCodec()
    return tensor_to_image(codec.decode(latent))


def latent_size(image_hw: tuple[int, int]) -> tuple[int, int]:
    return (image_hw[0] // FACTOR, image_hw[1] // FACTOR)

