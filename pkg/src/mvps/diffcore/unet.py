"""Miniature latent-diffusion UNet with Stable-Diffusion block layout and control branches.

Encoder blocks 1..12: conv_in, then per resolution level two residual blocks
(levels 0-2 followed by a downsampler). Decoder block i (1-based) receives
``concat(m, f_12)`` for i = 1 and ``concat(g_{i-1}, f_{13-i})`` afterwards.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ..fusion import FDN, zero_conv

N_LEVELS = 4
INJECTION_BLOCKS = (1, 4, 7, 10)


@dataclass
class DenoiserConfig:
    latent_channels: int = 48
    latent_size: tuple[int, int] = (16, 64)
    base_channels: int = 32
    channel_mult: tuple[int, ...] = (1, 2, 3, 4)
    attention_levels: tuple[int, ...] = (0, 1, 2)
    text_width: int = 128
    text_vocab: int = 4096
    text_max_len: int = 16
    heads: int = 4
    groups: int = 32

    n_encoder_blocks = 12
    n_middle_blocks = 1
    n_decoder_blocks = 12

    def __post_init__(self):
        self.latent_size = tuple(self.latent_size)
        self.channel_mult = tuple(self.channel_mult)
        self.attention_levels = tuple(self.attention_levels)
        if len(self.channel_mult) != N_LEVELS:
            raise ValueError(f"need {N_LEVELS} channel multipliers, got {self.channel_mult}")
        h, w = self.latent_size
        if h % 8 or w % 8:
            raise ValueError(f"latent size {self.latent_size} must be divisible by 8")

    @property
    def level_channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mult]

    def encoder_block_shapes(self) -> list[tuple[int, int, int]]:
        """(C, h, w) of encoder block outputs f_1..f_12."""
        ch = self.level_channels
        h, w = self.latent_size
        shapes = [(ch[0], h, w)]
        for lvl in range(N_LEVELS):
            s = (h >> lvl, w >> lvl)
            shapes += [(ch[lvl], *s), (ch[lvl], *s)]
            if lvl < N_LEVELS - 1:
                shapes.append((ch[lvl], h >> (lvl + 1), w >> (lvl + 1)))
        return shapes

    def injection_shapes(self) -> list[tuple[int, int, int]]:
        shapes = self.encoder_block_shapes()
        return [shapes[b - 1] for b in INJECTION_BLOCKS]


def _groups(ch: int, groups: int) -> int:
    return math.gcd(ch, groups)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half).to(t.device)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], -1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin, groups), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout, groups), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Residual cross-attention from image tokens to text tokens."""

    def __init__(self, ch: int, ctx_dim: int, heads: int, groups: int):
        super().__init__()
        self.heads = heads if ch % heads == 0 else 1
        self.norm = nn.GroupNorm(_groups(ch, groups), ch)
        self.q = nn.Linear(ch, ch, bias=False)
        self.k = nn.Linear(ctx_dim, ch, bias=False)
        self.v = nn.Linear(ctx_dim, ch, bias=False)
        self.out = nn.Linear(ch, ch)

    def forward(self, x, ctx, ctx_mask):
        B, C, H, W = x.shape
        nh = self.heads
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        q = self.q(tokens).reshape(B, H * W, nh, C // nh).transpose(1, 2)
        k = self.k(ctx).reshape(B, -1, nh, C // nh).transpose(1, 2)
        v = self.v(ctx).reshape(B, -1, nh, C // nh).transpose(1, 2)
        mask = None if ctx_mask is None else ctx_mask[:, None, None, :]
        a = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        a = a.transpose(1, 2).reshape(B, H * W, C)
        return x + self.out(a).transpose(1, 2).reshape(B, C, H, W)


class Downsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x, *_):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x, *_):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Block(nn.Module):
    """Sequential container whose layers see (x, temb, ctx, ctx_mask) as needed."""

    def __init__(self, *layers):
        super().__init__()
        self.layers = nn.ModuleList(layers)

    def forward(self, x, temb, ctx, ctx_mask):
        for layer in self.layers:
            if isinstance(layer, ResBlock):
                x = layer(x, temb)
            elif isinstance(layer, CrossAttention):
                x = layer(x, ctx, ctx_mask)
            else:
                x = layer(x)
        return x


class Encoder(nn.Module):
    """Encoder blocks 1..12 plus the middle block; copied wholesale by control branches."""

    def __init__(self, cfg: DenoiserConfig, temb_dim: int):
        super().__init__()
        ch, g = cfg.level_channels, cfg.groups
        blocks = [Block(nn.Conv2d(cfg.latent_channels, ch[0], 3, padding=1))]
        prev = ch[0]
        for lvl in range(N_LEVELS):
            for _ in range(2):
                layers = [ResBlock(prev, ch[lvl], temb_dim, g)]
                if lvl in cfg.attention_levels:
                    layers.append(CrossAttention(ch[lvl], cfg.text_width, cfg.heads, g))
                blocks.append(Block(*layers))
                prev = ch[lvl]
            if lvl < N_LEVELS - 1:
                blocks.append(Block(Downsample(prev)))
        self.blocks = nn.ModuleList(blocks)
        self.middle = Block(
            ResBlock(prev, prev, temb_dim, g),
            CrossAttention(prev, cfg.text_width, cfg.heads, g),
            ResBlock(prev, prev, temb_dim, g),
        )
        assert len(self.blocks) == cfg.n_encoder_blocks

    def forward(self, x, temb, ctx, ctx_mask, inject=None):
        """Returns ([f_1, ..., f_12], m). ``inject`` maps block number -> fn(h) -> h."""
        feats = []
        h = x
        for i, block in enumerate(self.blocks, 1):
            h = block(h, temb, ctx, ctx_mask)
            if inject is not None and i in inject:
                h = inject[i](h)
            feats.append(h)
        m = self.middle(h, temb, ctx, ctx_mask)
        return feats, m


class Decoder(nn.Module):
    def __init__(self, cfg: DenoiserConfig, temb_dim: int):
        super().__init__()
        ch, g = cfg.level_channels, cfg.groups
        skip_ch = [s[0] for s in cfg.encoder_block_shapes()]
        prev = ch[-1]
        blocks = []
        for lvl in reversed(range(N_LEVELS)):
            for i in range(3):
                layers = [ResBlock(prev + skip_ch.pop(), ch[lvl], temb_dim, g)]
                if lvl in cfg.attention_levels:
                    layers.append(CrossAttention(ch[lvl], cfg.text_width, cfg.heads, g))
                prev = ch[lvl]
                if lvl > 0 and i == 2:
                    layers.append(Upsample(prev))
                blocks.append(Block(*layers))
        self.blocks = nn.ModuleList(blocks)
        assert len(self.blocks) == cfg.n_decoder_blocks

    def forward(self, feats, m, temb, ctx, ctx_mask):
        """Block i consumes concat(m or g_{i-1}, f_{13-i})."""
        g = m
        for i, block in enumerate(self.blocks, 1):
            g = block(torch.cat([g, feats[12 - i]], 1), temb, ctx, ctx_mask)
        return g


class UNet(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        c0 = cfg.base_channels
        temb_dim = 4 * c0
        self.time_embed = nn.Sequential(nn.Linear(c0, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.encoder = Encoder(cfg, temb_dim)
        self.decoder = Decoder(cfg, temb_dim)
        self.out_norm = nn.GroupNorm(_groups(c0, cfg.groups), c0)
        self.out_conv = nn.Conv2d(c0, cfg.latent_channels, 3, padding=1)

    def temb(self, t: torch.Tensor) -> torch.Tensor:
        dtype = next(self.parameters()).dtype
        return self.time_embed(timestep_embedding(t, self.cfg.base_channels).to(dtype))

    def decode(self, feats, m, temb, ctx, ctx_mask, residuals=None, ablate_skip=None):
        if residuals is not None:
            res, mres = residuals
            feats = [f + r for f, r in zip(feats, res)]
            m = m + mres
        if ablate_skip is not None:
            if not 1 <= ablate_skip <= 12:
                raise ValueError(f"skip index must be in [1, 12], got {ablate_skip}")
            feats = list(feats)
            feats[ablate_skip - 1] = torch.zeros_like(feats[ablate_skip - 1])
        g = self.decoder(feats, m, temb, ctx, ctx_mask)
        return self.out_conv(F.silu(self.out_norm(g)))

    def check_inputs(self, x_t: torch.Tensor, t: torch.Tensor, T: int | None = None):
        expect = (self.cfg.latent_channels, *self.cfg.latent_size)
        if x_t.ndim != 4 or tuple(x_t.shape[1:]) != expect:
            raise ValueError(f"x_t has shape {tuple(x_t.shape)}, expected (B, {expect})")
        if t.ndim != 1 or t.shape[0] != x_t.shape[0]:
            raise ValueError(f"t must be a length-{x_t.shape[0]} vector")
        if T is not None and (int(t.min()) < 0 or int(t.max()) >= T):
            raise ValueError(f"timesteps must lie in [0, {T})")

    def forward(self, x_t, t, ctx, ctx_mask=None, residuals=None, ablate_skip=None):
        self.check_inputs(x_t, t)
        temb = self.temb(t)
        feats, m = self.encoder(x_t, temb, ctx, ctx_mask)
        return self.decode(feats, m, temb, ctx, ctx_mask, residuals, ablate_skip)


def base_unet_forward(unet: UNet, x_t, t, text_emb, text_mask=None, ablate_skip=None):
    return unet(x_t, t, text_emb, text_mask, ablate_skip=ablate_skip)


class ControlBranch(nn.Module):
    """Trainable copy of the encoder and middle block for one condition.

    Blocks 1, 4, 7, 10 receive FDN modulation from the injection bundle; every
    encoder output and the middle output leave through a zero convolution.
    """

    def __init__(self, name: str, base_encoder: Encoder, cfg: DenoiserConfig):
        super().__init__()
        self.name = name
        self.encoder = copy.deepcopy(base_encoder)
        shapes = cfg.encoder_block_shapes()
        self.zero_convs = nn.ModuleList(zero_conv(c, c) for c, _, _ in shapes)
        mid = cfg.level_channels[-1]
        self.zero_mid = zero_conv(mid, mid)
        self.fdn = nn.ModuleList(FDN(c, c) for c, _, _ in cfg.injection_shapes())

    def forward(self, x_t, temb, ctx, ctx_mask, bundle: list[torch.Tensor]):
        if len(bundle) != len(INJECTION_BLOCKS):
            raise ValueError(f"branch {self.name}: expected {len(INJECTION_BLOCKS)} injection maps, got {len(bundle)}")
        inject = {b: (lambda h, f=f, c=c: h + f.modulation(h, c))
                  for b, f, c in zip(INJECTION_BLOCKS, self.fdn, bundle)}
        feats, m = self.encoder(x_t, temb, ctx, ctx_mask, inject)
        res = [z(f) for z, f in zip(self.zero_convs, feats)]
        return res, self.zero_mid(m)


def controlled_forward(unet: UNet, x_t, t, text_emb, text_mask, branches, bundles, ablate_skip=None):
    """Base UNet whose decoder inputs get the summed zero-convolved residuals of every branch."""
    if len(branches) != len(bundles):
        raise ValueError(f"{len(branches)} branches but {len(bundles)} condition bundles")
    unet.check_inputs(x_t, t)
    temb = unet.temb(t)
    feats, m = unet.encoder(x_t, temb, text_emb, text_mask)
    res = mres = None
    for branch, bundle in zip(branches, bundles):
        r, rm = branch(x_t, temb, text_emb, text_mask, bundle)
        if res is None:
            res, mres = r, rm
        else:
            res = [a + b for a, b in zip(res, r)]
            mres = mres + rm
    residuals = None if res is None else (res, mres)
    return unet.decode(feats, m, temb, text_emb, text_mask, residuals, ablate_skip)
