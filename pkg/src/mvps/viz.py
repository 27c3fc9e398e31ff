"""Attention figures: local maps over panoramas, global map over the satellite image.

Markup: the target is a green square on the overhead image, each condition
panorama gets a colored border and a dot of the same color at its location.
Local heat runs blue -> red; global saliency is drawn darker where larger.
"""

from __future__ import annotations

import json
import math
import os
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .dataio import SampleRecord
from .geo import geo_to_overhead_pixel
from .model import GeoDiffusion, collate, load_example

TARGET_COLOR = (0, 200, 0)
PANO_COLORS = [(30, 90, 255), (255, 210, 0), (230, 0, 230), (0, 220, 230), (255, 120, 0), (140, 70, 20)]

_JET = np.array([[0, 0, 128], [0, 0, 255], [0, 255, 255], [255, 255, 0], [255, 0, 0], [128, 0, 0]], float)


def jet(x: np.ndarray) -> np.ndarray:
    """[0, 1] -> uint8 RGB, blue (low) to red (high)."""
    x = np.clip(np.asarray(x, float), 0, 1) * (len(_JET) - 1)
    i = np.minimum(x.astype(int), len(_JET) - 2)
    f = (x - i)[..., None]
    return (_JET[i] * (1 - f) + _JET[i + 1] * f).round().astype(np.uint8)


def darkness(x: np.ndarray, hue=(170, 20, 20)) -> np.ndarray:
    """[0, 1] -> white at 0 shading to a dark ``hue`` at 1."""
    x = np.clip(np.asarray(x, float), 0, 1)[..., None]
    return (255 * (1 - x) + np.asarray(hue, float) * x).round().astype(np.uint8)


def normalize(heat: np.ndarray) -> np.ndarray:
    lo, hi = float(heat.min()), float(heat.max())
    return np.zeros_like(heat, dtype=float) if hi <= lo else (heat - lo) / (hi - lo)


def resize_map(heat: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    t = torch.as_tensor(np.asarray(heat, np.float32))[None, None]
    return torch.nn.functional.interpolate(t, size=hw, mode="bilinear", align_corners=False)[0, 0].numpy()


def overlay(image: np.ndarray, colored: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    return (image.astype(float) * (1 - alpha) + colored.astype(float) * alpha).round().astype(np.uint8)


def add_border(image: np.ndarray, color, width: int = 2) -> np.ndarray:
    out = image.copy()
    out[:width], out[-width:], out[:, :width], out[:, -width:] = color, color, color, color
    return out


def draw_disc(image: np.ndarray, row: int, col: int, radius: int, color) -> None:
    H, W = image.shape[:2]
    rr, cc = np.ogrid[:H, :W]
    image[(rr - row) ** 2 + (cc - col) ** 2 <= radius * radius] = color


def draw_square(image: np.ndarray, row: int, col: int, half: int, color, thickness: int = 1) -> None:
    H, W = image.shape[:2]
    r0, r1, c0, c1 = row - half, row + half, col - half, col + half
    for t in range(thickness):
        for r in (r0 + t, r1 - t):
            if 0 <= r < H:
                image[r, max(c0, 0):min(c1 + 1, W)] = color
        for c in (c0 + t, c1 - t):
            if 0 <= c < W:
                image[max(r0, 0):min(r1 + 1, H), c] = color


def marker_pixel(loc, frame) -> tuple[int, int, bool]:
    """Integer (row, col) of the pixel containing ``loc`` and whether it lies in the frame."""
    row, col = geo_to_overhead_pixel(loc, frame, check=False)
    r, c = math.floor(row), math.floor(col)
    return r, c, 0 <= r < frame.size and 0 <= c < frame.size


def _save(img: np.ndarray, path: Path) -> str:
    Image.fromarray(img).save(path)
    return path.name


@torch.no_grad()
def visualize_attention(model: GeoDiffusion, record: SampleRecord, out_dir: str | os.PathLike,
                        scale: int = 4) -> dict:
    """Write local/global attention figures, raw maps (.npy) and a JSON sidecar; returns the sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = model.cfg
    model.eval()
    ex = load_example(record, cfg, with_target=False)
    batch = collate([ex], cfg)
    local, _, glob = model.attention(batch)
    K = cfg.data.n_cond_panos
    frame = record.frame
    sidecar = {"record": record.id, "local": [], "global": None, "markers": {}}

    sat_full = np.asarray(Image.open(record.resolve(record.satellite_path)).convert("RGB"))
    if sat_full.shape[0] != frame.size:
        raise ValueError(f"satellite image is {sat_full.shape[0]}px but the frame says {frame.size}px")

    for k in range(min(K, len(ex.attn_images))):
        raw = local[0, k].numpy()
        np.save(out / f"local_{k + 1}.npy", raw)
        pano = ex.attn_images[k]
        heat = jet(normalize(resize_map(raw, pano.shape[:2])))
        fig = add_border(overlay(pano, heat), PANO_COLORS[k % len(PANO_COLORS)])
        sidecar["local"].append({"name": f"pano_{k + 1}", "png": _save(fig, out / f"local_{k + 1}.png"),
                                 "raw": f"local_{k + 1}.npy", "grid": list(raw.shape),
                                 "sum": float(raw.sum()), "color": PANO_COLORS[k % len(PANO_COLORS)]})

    g = glob[0].numpy()
    np.save(out / "global.npy", g)
    sat = overlay(sat_full, darkness(resize_map(g, sat_full.shape[:2])), 0.6)
    big = np.kron(sat, np.ones((scale, scale, 1), np.uint8)) if scale > 1 else sat.copy()

    tr, tc, t_in = marker_pixel(ex.target_location, frame)
    sidecar["markers"]["target"] = {"row": tr, "col": tc, "in_frame": t_in, "color": TARGET_COLOR,
                                    "shape": "square"}
    panos = []
    for k, loc in enumerate(ex.attn_locations[:K]):
        r, c, inside = marker_pixel(loc, frame)
        color = PANO_COLORS[k % len(PANO_COLORS)]
        panos.append({"name": f"pano_{k + 1}", "row": r, "col": c, "in_frame": inside, "color": color,
                      "shape": "dot", "lat": loc.lat, "lon": loc.lon})
        if inside:
            draw_disc(big, r * scale + scale // 2, c * scale + scale // 2, max(2, scale), color)
    if t_in:
        draw_square(big, tr * scale + scale // 2, tc * scale + scale // 2, max(3, 2 * scale), TARGET_COLOR, 2)
    sidecar["markers"]["panoramas"] = panos
    sidecar["markers"]["scale"] = scale
    sidecar["global"] = {"png": _save(big, out / "global.png"), "raw": "global.npy", "size": list(g.shape),
                         "min": float(g.min()), "max": float(g.max())}
    (out / "attention.json").write_text(json.dumps(sidecar, indent=2))
    return sidecar
