"""Full mixed-view model: geospatial attention -> fused conditions -> controlled denoiser.

Also holds example loading/collation, the training step and the DDIM sampler
entry point, since all of them need to know how the pieces are wired.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import dataio
from .config import RunConfig
from .dataio import ConditionSet, SampleRecord
from .diffcore.codec import image_to_tensor, make_codec, tensor_to_image
from .diffcore.dropout import apply_modality_dropout
from .diffcore.sampling import ddim_loop, guided_eps
from .diffcore.schedule import NoiseSchedule
from .diffcore.text import TextEmbedder
from .diffcore.unet import ControlBranch, UNet, controlled_forward
from .fusion import ConditionEncoder, MultiscaleExtractor, hadamard_fuse, mask_to_latent
from .geo import GeoLocation, OverheadFrame, haversine_distance, in_footprint
from .geoattn import GeoAttentionAdapter, upsample_attention
from .rng import substream, torch_generator, torch_seed


class NonFiniteLossError(FloatingPointError):
    pass


def branch_names(n_panos: int) -> list[str]:
    return ["seg", "sat"] + [f"pano_{k + 1}" for k in range(n_panos)]


# --------------------------------------------------------------------------- examples


@dataclass
class Example:
    """Everything one batch item needs, already resized to the run's image size."""

    id: str
    conditions: ConditionSet
    attn_images: list[np.ndarray]
    attn_locations: list[GeoLocation]
    satellite: np.ndarray
    frame: OverheadFrame
    target_location: GeoLocation
    target: np.ndarray | None = None


def retarget(record: SampleRecord, location: GeoLocation) -> SampleRecord:
    """Same record aimed at another location inside its footprint, panoramas re-sorted by distance."""
    if not in_footprint(location, record.frame):
        raise ValueError(f"location ({location.lat:.6f}, {location.lon:.6f}) is outside record {record.id}'s footprint")
    panos = [replace(p, distance=haversine_distance(p.location, location)) for p in record.panoramas]
    panos.sort(key=lambda p: p.distance)
    return replace(record, panoramas=panos, target_location=location, target_pano_path=None, seg_path=None)


def load_example(record: SampleRecord, cfg: RunConfig, with_target: bool = True) -> Example:
    d = cfg.data
    H = d.image_height
    cond = dataio.select_conditions(record, d.n_cond_panos, H, d.resize_filter, d.prompt)
    attn = dataio.select_attention_set(record, d.n_attn_panos, H, d.resize_filter)
    sat = dataio.resize(dataio.load_image(record.resolve(record.satellite_path)),
                        (d.overhead_size, d.overhead_size), d.resize_filter)
    target = None
    if with_target and record.target_pano_path is not None:
        target = dataio.resize(dataio.load_image(record.resolve(record.target_pano_path)), (H, 4 * H),
                               d.resize_filter)
    return Example(record.id, cond, [a for a, _ in attn], [loc for _, loc in attn], sat, record.frame,
                   record.target_location, target)


def _images(arrs: list[np.ndarray]) -> torch.Tensor:
    return image_to_tensor(np.stack(arrs))


def collate(examples: list[Example], cfg: RunConfig) -> dict:
    """Stack examples into tensors. Attention sets are padded (and masked) to the longest set."""
    B = len(examples)
    H, W = cfg.image_size
    grid = cfg.feature_grid
    names = branch_names(cfg.data.n_cond_panos)
    N = max(1, max(len(e.attn_images) for e in examples))
    blank = np.zeros((H, W, 3), np.uint8)

    panos = np.zeros((B, N, H, W, 3), np.uint8)
    mask = torch.zeros(B, N, dtype=torch.bool)
    dist = torch.zeros(B, N)
    bearing = torch.zeros(B, N)
    orient = torch.zeros(B, N, 3, *grid)
    for i, e in enumerate(examples):
        for j, (img, loc) in enumerate(zip(e.attn_images, e.attn_locations)):
            panos[i, j] = img
            mask[i, j] = True
            dd, bb, o = dataio.relative_geometry(loc, e.target_location, grid, cfg.data.distance_scale)
            dist[i, j], bearing[i, j] = dd, bb
            orient[i, j] = torch.as_tensor(np.ascontiguousarray(o.transpose(2, 0, 1)), dtype=torch.float32)

    cond = {}
    for k, name in enumerate(names):
        cond[name] = _images([e.conditions.images()[k] if k < len(e.conditions.images()) else blank
                              for e in examples])
    drop = torch.as_tensor(np.stack([e.conditions.drop_mask for e in examples]))
    batch = {
        "ids": [e.id for e in examples],
        "prompts": [e.conditions.prompt for e in examples],
        "cond": cond,
        "drop": drop,
        "attn_panos": image_to_tensor(panos.reshape(B * N, H, W, 3)).reshape(B, N, 3, H, W),
        "attn_mask": mask,
        "distance": dist,
        "bearing": bearing,
        "orientation": orient,
        "sat": _images([e.satellite for e in examples]),
    }
    if all(e.target is not None for e in examples):
        batch["target"] = _images([e.target for e in examples])
    return batch


def to_device(batch: dict, device: torch.device) -> dict:
    out = {}
    for k, v in batch.items():
        if isinstance(v, torch.Tensor):
            v = v.to(device)
        elif isinstance(v, dict):
            v = {n: t.to(device) for n, t in v.items()}
        out[k] = v
    return out


def model_device(model: nn.Module) -> torch.device:
    return next(model.parameters()).device


def with_forced_drop(batch: dict, names: list[str], drop_names: tuple[str, ...] = ("seg",)) -> dict:
    """Copy of ``batch`` with the listed branches dropped (zero image, drop flag set)."""
    out = dict(batch)
    out["cond"] = dict(batch["cond"])
    out["drop"] = batch["drop"].clone()
    for name in drop_names:
        k = names.index(name)
        out["cond"][name] = torch.zeros_like(batch["cond"][name])
        out["drop"][:, k] = True
    return out


# --------------------------------------------------------------------------- model


class GeoDiffusion(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        a, dc = cfg.attention, cfg.denoiser
        self.names = branch_names(cfg.data.n_cond_panos)
        self.codec = make_codec(cfg.codec.kind, cfg.codec.channels)
        self.schedule = NoiseSchedule.from_config(cfg.schedule)
        self.text = TextEmbedder(dc.text_vocab, dc.text_width, dc.text_max_len)
        self.unet = UNet(dc)
        self.geoattn = GeoAttentionAdapter(a.feat_channels, a.encoder_width, a.local_hidden,
                                           a.global_grid, a.global_size)
        inj = [c for c, _, _ in dc.injection_shapes()]
        cc = cfg.fusion.cond_channels
        self.cond_encoders = nn.ModuleDict({n: ConditionEncoder(cc) for n in self.names})
        self.extractors = nn.ModuleDict({n: MultiscaleExtractor(cc, tuple(inj)) for n in self.names})
        self.branches = nn.ModuleDict({n: ControlBranch(n, self.unet.encoder, dc) for n in self.names})

    # -- attention ------------------------------------------------------------

    def attention(self, batch: dict):
        """(local (B, N, h, w), descriptors (B, N, C), global (B, S, S)).

        Items without any nearby panorama get an all-zero global map, which
        leaves the satellite features unmodulated.
        """
        mask = batch["attn_mask"]
        has = mask.any(1)
        if has.all():
            return self.geoattn(batch["attn_panos"], mask, batch["sat"], batch["distance"],
                                batch["bearing"], batch["orientation"])
        B, N = mask.shape
        S = self.cfg.attention.global_size
        h, w = self.cfg.feature_grid
        local = batch["attn_panos"].new_zeros(B, N, h, w)
        desc = batch["attn_panos"].new_zeros(B, N, self.cfg.attention.feat_channels)
        glob = batch["attn_panos"].new_zeros(B, S, S)
        idx = has.nonzero()[:, 0]
        if len(idx):
            lo, de, gl = self.geoattn(*(batch[k][idx] for k in ("attn_panos", "attn_mask", "sat", "distance",
                                                              "bearing", "orientation")))
            local, desc, glob = local.index_copy(0, idx, lo), desc.index_copy(0, idx, de), glob.index_copy(0, idx, gl)
        return local, desc, glob

    def latent_masks(self, batch: dict, attn) -> dict[str, torch.Tensor]:
        """Per-branch attention masks at latent resolution, values in [0, 1]."""
        local, _, glob = attn
        H, W = self.cfg.image_size
        lat = self.cfg.denoiser.latent_size
        B = local.shape[0]
        masks = {"seg": local.new_zeros(B, 1, *lat)}
        sat = F.interpolate(glob[:, None], size=(H, H), mode="bilinear", align_corners=False)
        masks["sat"] = mask_to_latent(sat.repeat(1, 1, 1, W // H), lat)
        for k in range(self.cfg.data.n_cond_panos):
            m = upsample_attention(local[:, k], (H, W))
            if self.cfg.attention.local_mask_norm == "max":
                m = m / m.amax((-2, -1), keepdim=True).clamp_min(1e-12)
            elif self.cfg.attention.local_mask_norm != "none":
                raise ValueError(f"unknown local_mask_norm {self.cfg.attention.local_mask_norm!r}")
            m = m * batch["attn_mask"][:, k, None, None].to(m.dtype)
            masks[f"pano_{k + 1}"] = mask_to_latent(m, lat).clamp(0, 1)
        return masks

    def bundles(self, batch: dict, attn=None) -> list[list[torch.Tensor]]:
        """Injection bundle per branch; dropped branches get zero fused features."""
        attn = self.attention(batch) if attn is None else attn
        masks = self.latent_masks(batch, attn)
        out = []
        for k, name in enumerate(self.names):
            feats = self.cond_encoders[name](batch["cond"][name])
            fused = hadamard_fuse(feats, masks[name])
            keep = (~batch["drop"][:, k]).to(fused.dtype)[:, None, None, None]
            out.append(self.extractors[name](fused * keep))
        return out

    # -- denoiser -------------------------------------------------------------

    def predict_noise(self, x_t, t, batch: dict, prompts: list[str] | None = None, bundles=None):
        emb, tmask = self.text(batch["prompts"] if prompts is None else prompts)
        bundles = self.bundles(batch) if bundles is None else bundles
        return controlled_forward(self.unet, x_t, t, emb, tmask, list(self.branches.values()), bundles)

    def base_predict(self, x_t, t, prompts: list[str]):
        emb, tmask = self.text(prompts)
        return self.unet(x_t, t, emb, tmask)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return self.codec.encode(images) * self.cfg.codec.scale

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        return self.codec.decode(latents / self.cfg.codec.scale)


def build_model(cfg: RunConfig) -> GeoDiffusion:
    """Model with parameters drawn from the run's ``init`` substream."""
    state = torch.random.get_rng_state()
    try:
        torch.manual_seed(torch_seed(cfg.seed, "init"))
        model = GeoDiffusion(cfg)
    finally:
        torch.random.set_rng_state(state)
    return model


def make_optimizer(model: GeoDiffusion, cfg: RunConfig) -> torch.optim.Optimizer:
    if not cfg.train.train_base:
        for p in model.unet.parameters():
            p.requires_grad_(False)
        for p in model.text.parameters():
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=cfg.train.lr, weight_decay=cfg.train.weight_decay)


# --------------------------------------------------------------------------- training


def lr_at(step: int, cfg: RunConfig) -> float:
    """Learning rate for optimizer step ``step`` (0-based) under ``cfg.train``."""
    tc = cfg.train
    if tc.lr_schedule == "constant":
        return tc.lr
    return 0.5 * tc.lr * (1.0 + math.cos(math.pi * min(step, tc.steps) / max(tc.steps, 1)))


def dropout_examples(examples: list[Example], cfg: RunConfig, rng: np.random.Generator) -> list[Example]:
    return [replace(e, conditions=apply_modality_dropout(e.conditions, cfg.dropout, rng)) for e in examples]


def diffusion_loss(model: GeoDiffusion, batch: dict, generator: torch.Generator) -> torch.Tensor:
    """Noise-prediction MSE with t ~ U{1, ..., T-1}."""
    x0 = model.encode(batch["target"])
    B = x0.shape[0]
    t = torch.randint(1, model.schedule.T, (B,), generator=generator).to(x0.device)
    noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype).to(x0.device)
    x_t = model.schedule.q_sample(x0, t, noise)
    eps = model.predict_noise(x_t, t, batch)
    return F.mse_loss(eps, noise)


def training_step(model: GeoDiffusion, examples: list[Example], optimizer: torch.optim.Optimizer,
                  step: int) -> float:
    """One AdamW step under modality dropout; all randomness is derived from (seed, step)."""
    cfg = model.cfg
    model.train()
    rng = substream(cfg.seed, "dropout", step)
    batch = to_device(collate(dropout_examples(examples, cfg, rng), cfg), model_device(model))
    loss = diffusion_loss(model, batch, torch_generator(cfg.seed, "noise", step))
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss {loss.item()} at step {step} on batch {batch['ids']}")
    for group in optimizer.param_groups:
        group["lr"] = lr_at(step, cfg)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.train.grad_clip > 0:
        nn.utils.clip_grad_norm_([p for p in model.parameters() if p.requires_grad], cfg.train.grad_clip)
    optimizer.step()
    return float(loss.detach())


@torch.no_grad()
def eval_noise_mse(model: GeoDiffusion, examples: list[Example], draws: int = 8, seed: int = 0) -> float:
    """Mean noise MSE over a fixed set of (t, noise) draws with all conditions kept."""
    model.eval()
    batch = to_device(collate(examples, model.cfg), model_device(model))
    x0 = model.encode(batch["target"])
    bundles = model.bundles(batch)
    g = torch_generator(seed, "eval-noise")
    total = 0.0
    for _ in range(draws):
        t = torch.randint(1, model.schedule.T, (x0.shape[0],), generator=g).to(x0.device)
        noise = torch.randn(x0.shape, generator=g, dtype=x0.dtype).to(x0.device)
        eps = model.predict_noise(model.schedule.q_sample(x0, t, noise), t, batch, bundles=bundles)
        total += float(F.mse_loss(eps, noise))
    return total / draws


@torch.no_grad()
def dump_features(model: GeoDiffusion, batch: dict, path) -> dict[str, np.ndarray]:
    """Save attention outputs, latent masks and every injected feature map to one ``.npz``."""
    model.eval()
    attn = model.attention(batch)
    arrays = {"local": attn[0], "descriptors": attn[1], "global": attn[2]}
    for name, m in model.latent_masks(batch, attn).items():
        arrays[f"mask_{name}"] = m
    for name, bundle in zip(model.names, model.bundles(batch, attn)):
        for j, f in enumerate(bundle):
            arrays[f"inject_{name}_{j}"] = f
    arrays = {k: v.detach().cpu().numpy() for k, v in arrays.items()}
    np.savez_compressed(path, **arrays)
    return arrays


# --------------------------------------------------------------------------- sampling


@torch.no_grad()
def ddim_sample(model: GeoDiffusion, batch: dict, steps: int = 50, cfg_scale: float = 7.5,
                eta: float = 0.0, seed: int = 0, return_latents: bool = False, clip_x0: bool = True):
    """Images (B, H, W, 3) uint8. Segmentation is always dropped; the unconditional pass empties the prompt.

    With ``clip_x0`` each step's clean-latent estimate is decoded, clamped to the
    valid pixel range [-1, 1] and re-encoded before the update.
    """
    if steps < 1:
        raise ValueError(f"DDIM needs steps >= 1, got {steps}")
    model.eval()
    batch = with_forced_drop(to_device(batch, model_device(model)), model.names)
    bundles = model.bundles(batch)
    B = batch["drop"].shape[0]
    shape = (B, model.cfg.denoiser.latent_channels, *model.cfg.denoiser.latent_size)
    x_T = torch.randn(shape, generator=torch_generator(seed, "sample")).to(model_device(model))

    def eps_cond(x, t):
        return model.predict_noise(x, t, batch, bundles=bundles)

    def eps_uncond(x, t):
        return model.predict_noise(x, t, batch, prompts=[""] * B, bundles=bundles)

    eps = guided_eps(eps_cond, eps_uncond, cfg_scale)
    def project(x0):
        return model.encode(model.decode(x0).clamp(-1.0, 1.0))

    z0 = ddim_loop(eps, x_T, model.schedule, steps, eta, torch_generator(seed, "sample-eta"),
                   x0_fn=project if clip_x0 else None)
    images = tensor_to_image(model.decode(z0))
    return (images, z0) if return_latents else images


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


__all__ = [
    "Example", "GeoDiffusion", "NonFiniteLossError", "branch_names", "build_model", "collate",
    "ddim_sample", "diffusion_loss", "dump_features", "dropout_examples", "eval_noise_mse", "load_example",
    "make_optimizer", "retarget", "training_step", "with_forced_drop", "parameter_count",
]
