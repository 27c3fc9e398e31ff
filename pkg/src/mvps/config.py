"""Run configuration: one nested dataclass tree, saved as YAML, overridable by ``key.path=value``."""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .dataio import DEFAULT_PROMPT
from .diffcore.codec import FACTOR
from .diffcore.dropout import DropoutPolicy
from .diffcore.schedule import ScheduleConfig
from .diffcore.unet import DenoiserConfig
from .synthworld import DatasetParams

CONFIG_VERSION = 1


@dataclass
class DataConfig:
    manifest: str = "data/manifest.jsonl"
    image_height: int = 32  # panoramas and condition images are H x 4H
    overhead_size: int = 64  # satellite resolution seen by the attention encoder
    n_cond_panos: int = 2
    n_attn_panos: int = 20
    resize_filter: str = "bilinear"
    prompt: str = DEFAULT_PROMPT
    distance_scale: float = 100.0
    val_fraction: float = 0.0
    test_fraction: float = 0.0


@dataclass
class AttentionConfig:
    feat_channels: int = 32
    encoder_width: int = 16
    local_hidden: int = 8
    global_grid: int = 32
    global_size: int = 64
    local_mask_norm: str = "max"  # "max" rescales each upsampled local map to peak 1; "none" keeps softmax mass


@dataclass
class FusionConfig:
    cond_channels: int = 128


@dataclass
class CodecConfig:
    kind: str = "dct"
    # must not exceed denoiser.base_channels: the full-resolution path is base wide and
    # predicting eps needs the whole latent. 24 keeps >= 30 dB PSNR on 32 x 128 renders
    channels: int = 24
    # latents are multiplied by this before diffusion (synthworld DCT latents have std ~0.19)
    scale: float = 5.0


@dataclass
class TrainConfig:
    # the desk base UNet trains from scratch; the full preset uses the fine-tuning rate 2e-5
    lr: float = 1e-3
    weight_decay: float = 1e-2
    batch_size: int = 16
    steps: int = 1000
    log_every: int = 10
    ckpt_every: int = 500
    grad_clip: float = 1.0
    train_base: bool = True
    # "cosine" decays to zero over train.steps; "constant" keeps lr flat (needed to extend a run bit-for-bit)
    lr_schedule: str = "cosine"


@dataclass
class SampleConfig:
    steps: int = 50
    cfg_scale: float = 7.5
    eta: float = 0.0
    seed: int = 0
    clip_x0: bool = True


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    world: DatasetParams = field(default_factory=DatasetParams)
    data: DataConfig = field(default_factory=DataConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    dropout: DropoutPolicy = field(default_factory=DropoutPolicy)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)

    def __post_init__(self):
        self.sync()

    def sync(self) -> "RunConfig":
        """Derive the latent geometry from image size and codec."""
        H = self.data.image_height
        if H % 8 or (H // FACTOR) % 8:
            raise ValueError(f"image_height {H} must make a latent divisible by 8 (multiple of 32)")
        self.denoiser.latent_size = (H // FACTOR, 4 * H // FACTOR)
        self.denoiser.latent_channels = self.codec.channels
        if self.codec.channels > self.denoiser.base_channels:
            raise ValueError(f"codec.channels {self.codec.channels} exceeds denoiser.base_channels "
                             f"{self.denoiser.base_channels}; the denoiser could not carry the full latent")
        if self.data.n_attn_panos < self.data.n_cond_panos:
            raise ValueError("n_attn_panos must be >= n_cond_panos (condition panoramas reuse their local maps)")
        if self.train.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"train.lr_schedule must be 'cosine' or 'constant', got {self.train.lr_schedule!r}")
        return self

    @property
    def image_size(self) -> tuple[int, int]:
        return (self.data.image_height, 4 * self.data.image_height)

    @property
    def feature_grid(self) -> tuple[int, int]:
        return (self.data.image_height // 8, self.data.image_height // 2)

    # presets ------------------------------------------------------------------

    @classmethod
    def desk(cls, **kw) -> "RunConfig":
        return cls(**kw)

    @classmethod
    def tiny(cls) -> "RunConfig":
        """Smallest consistent model; used by unit tests."""
        return cls(
            data=DataConfig(image_height=32, overhead_size=32, n_attn_panos=4),
            attention=AttentionConfig(feat_channels=8, encoder_width=4, local_hidden=4,
                                      global_grid=8, global_size=32),
            fusion=FusionConfig(cond_channels=16),
            codec=CodecConfig(kind="dct", channels=12),
            denoiser=DenoiserConfig(base_channels=16, channel_mult=(1, 2, 2, 2), text_width=16,
                                    text_vocab=256, text_max_len=8, heads=1, groups=8),
            train=TrainConfig(batch_size=2, steps=10, log_every=1, ckpt_every=5, lr_schedule="constant"),
            sample=SampleConfig(steps=4),
        )

    @classmethod
    def full(cls) -> "RunConfig":
        """Full 256 x 1024 inputs, 64 x 256 latent, 32 x 32 -> 256 x 256 global grid."""
        return cls(
            data=DataConfig(image_height=256, overhead_size=256),
            attention=AttentionConfig(global_grid=32, global_size=256),
            denoiser=DenoiserConfig(base_channels=64),
            train=TrainConfig(lr=2e-5, batch_size=16, lr_schedule="constant"),
        )

    # serialization -------------------------------------------------------------

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        version = d.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ValueError(f"config version {version} is not supported (expected {CONFIG_VERSION})")
        return _build(cls, d)

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path

    @classmethod
    def load(cls, path: str | os.PathLike, overrides: list[str] | None = None) -> "RunConfig":
        d = yaml.safe_load(Path(path).read_text()) or {}
        return apply_overrides(cls.from_dict(d), overrides or [])


PRESETS = {"desk": RunConfig.desk, "tiny": RunConfig.tiny, "full": RunConfig.full}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, d: dict):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name in known & set(d):
        tp, val = hints[name], d[name]
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, val or {})
        elif typing.get_origin(tp) is tuple:
            kwargs[name] = tuple(val)
        else:
            kwargs[name] = val
    return cls(**kwargs)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``a.b.c=value`` strings (values parsed as YAML scalars) and re-validate."""
    d = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = d
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ValueError(f"unknown config section {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ValueError(f"unknown config key {key!r}")
        old, new = node[parts[-1]], yaml.safe_load(raw)
        # YAML 1.1 reads "1e-4" as a string; numeric fields take it as a number
        if isinstance(new, str) and isinstance(old, (int, float)) and not isinstance(old, bool):
            try:
                new = float(new) if isinstance(old, float) or not new.lstrip("+-").isdigit() else int(new)
            except ValueError:
                raise ValueError(f"config key {key!r} expects a number, got {raw!r}") from None
        node[parts[-1]] = new
    return RunConfig.from_dict(d)
