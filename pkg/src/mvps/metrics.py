"""Image-quality metrics on 8-bit RGB arrays, plus a directory evaluator.

PSNR, SSIM, RMSE and sharpness difference are plain numpy. FID and LPIPS take
a pluggable feature extractor; the bundled one is a fixed random CNN, so
numbers are only comparable within this repo.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

CAP_DB = 99.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
FID_EPS = 1e-6

# per-image report columns: psnr, ssim, lpips, rmse, fid, sd (FID is set-level and lives on the summary row)
REPORT_COLUMNS = ("psnr", "ssim", "lpips", "rmse", "fid", "sd")


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak: float = 255.0) -> float:
    m = mse(a, b)
    if m == 0:
        return CAP_DB
    return min(CAP_DB, 10.0 * math.log10(peak * peak / m))


def rmse(a, b) -> float:
    return math.sqrt(mse(a, b))


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Windowed weighted sum over every fully-contained window of a 2-D array."""
    k = win.shape[0]
    g = win[k // 2] / win[k // 2].sum()  # separable factor of the outer-product window
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(a, b, peak: float = 255.0) -> float:
    """Mean local SSIM with an 11x11 Gaussian window, averaged over channels."""
    a, b = _pair(a, b)
    if a.shape[0] < SSIM_WIN or a.shape[1] < SSIM_WIN:
        raise ValueError(f"SSIM needs images of at least {SSIM_WIN}x{SSIM_WIN}, got {a.shape[:2]}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if np.array_equal(a, b):
        return 1.0
    c1, c2 = (SSIM_K1 * peak) ** 2, (SSIM_K2 * peak) ** 2
    win = gaussian_window()
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, win), _filter_valid(y, win)
        sxx = _filter_valid(x * x, win) - mx * mx
        syy = _filter_valid(y * y, win) - my * my
        sxy = _filter_valid(x * y, win) - mx * my
        s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        vals.append(s.mean())
    return float(np.clip(np.mean(vals), -1.0, 1.0))


def sharpness_difference(a, b, peak: float = 255.0) -> float:
    """Gradient-difference PSNR with forward differences; capped at 99 dB."""
    a, b = _pair(a, b)
    dx = np.abs(np.diff(a, axis=1) - np.diff(b, axis=1))
    dy = np.abs(np.diff(a, axis=0) - np.diff(b, axis=0))
    grad = (dx.sum() + dy.sum()) / a.size
    if grad == 0:
        return CAP_DB
    return min(CAP_DB, 10.0 * math.log10(peak * peak / grad))


def seam_discontinuity(pano) -> float:
    """Wrap-seam mismatch relative to the mean adjacent-column difference inside the image.

    1.0 means the seam looks like any other column boundary. A constant image is 1.0.
    """
    p = np.asarray(pano, dtype=np.float64)
    seam = np.abs(p[:, 0] - p[:, -1]).mean()
    interior = np.abs(np.diff(p, axis=1)).mean()
    if interior == 0:
        return 1.0 if seam == 0 else math.inf
    return float(seam / interior)


# --------------------------------------------------------------------------- feature metrics


def frechet_distance(mu1, sigma1, mu2, sigma2, eps: float = FID_EPS) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}) via symmetric square roots."""
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    s1, s2 = np.atleast_2d(sigma1).astype(np.float64), np.atleast_2d(sigma2).astype(np.float64)
    d = len(mu1)
    s1 = s1 + eps * np.eye(d)
    s2 = s2 + eps * np.eye(d)
    w, v = np.linalg.eigh(s1)
    r1 = (v * np.sqrt(np.clip(w, 0, None))) @ v.T
    inner = r1 @ s2 @ r1
    wi = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = np.sqrt(np.clip(wi, 0, None)).sum()
    # eps enters both covariances, so identical inputs still give exactly 0
    val = float(((mu1 - mu2) ** 2).sum() + np.trace(s1) + np.trace(s2) - 2 * tr_sqrt)
    return max(val, 0.0)


def fid(features_a, features_b) -> float:
    """Frechet distance between two (n, d) feature sets."""
    fa = np.asarray(features_a, dtype=np.float64)
    fb = np.asarray(features_b, dtype=np.float64)
    if fa.ndim == 1:
        fa, fb = fa[:, None], fb[:, None]
    if fa.shape[1] != fb.shape[1]:
        raise ValueError(f"feature dims differ: {fa.shape[1]} vs {fb.shape[1]}")
    if len(fa) < 2 or len(fb) < 2:
        raise ValueError("FID needs at least two samples per set")
    return frechet_distance(fa.mean(0), np.cov(fa, rowvar=False), fb.mean(0), np.cov(fb, rowvar=False))


class ToyFeatureExtractor(nn.Module):
    """Fixed, seeded random conv stack; returns one feature map per stage."""

    def __init__(self, seed: int = 0, widths: Sequence[int] = (16, 32, 64)):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        layers, prev = [], 3
        for w in widths:
            conv = nn.Conv2d(prev, w, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * math.sqrt(2.0 / (prev * 9)))
                conv.bias.zero_()
            layers.append(conv)
            prev = w
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def forward(self, images) -> list[torch.Tensor]:
        x = _as_batch(images)
        out = []
        for conv in self.layers:
            x = torch.relu(conv(x))
            out.append(x)
        return out

    def embed(self, images) -> np.ndarray:
        """Global-average-pooled last stage, (n, d); the default FID feature."""
        return self(images)[-1].mean((-2, -1)).double().numpy()


def _as_batch(images) -> torch.Tensor:
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.as_tensor(arr, dtype=torch.float32).permute(0, 3, 1, 2) / 127.5 - 1.0


def lpips(a, b, extractor: Callable | None = None) -> float:
    """Sum over layers of spatially averaged squared differences of unit-normalized channel vectors."""
    if extractor is None:
        raise ValueError("lpips needs a feature extractor; pass metrics.ToyFeatureExtractor() "
                         "or an external pretrained network returning a list of feature maps")
    a, b = _pair(a, b)
    if np.array_equal(a, b):
        return 0.0
    total = 0.0
    for fa, fb in zip(extractor(a), extractor(b)):
        na = fa / (fa.norm(dim=1, keepdim=True) + 1e-10)
        nb = fb / (fb.norm(dim=1, keepdim=True) + 1e-10)
        total += float(((na - nb) ** 2).sum(1).mean())
    return total


# --------------------------------------------------------------------------- reports


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    rmse: float
    sd: float
    lpips: float | None = None
    fid: float | None = None
    seam: float | None = None

    @property
    def capped(self) -> bool:
        return self.psnr >= CAP_DB or self.sd >= CAP_DB


def compare(pred, truth, extractor: Callable | None = None) -> MetricReport:
    return MetricReport(
        psnr=psnr(pred, truth), ssim=ssim(pred, truth), rmse=rmse(pred, truth),
        sd=sharpness_difference(pred, truth),
        lpips=lpips(pred, truth, extractor) if extractor is not None else None,
        seam=seam_discontinuity(pred),
    )


def _is_panorama(img: np.ndarray) -> bool:
    return img.ndim == 3 and img.shape[1] == 4 * img.shape[0]


def evaluate_directory(pred_dir: str | os.PathLike, records, out_prefix: str | os.PathLike,
                       extractor: Callable | None = None, resize_filter: str = "bilinear") -> dict:
    """Compare ``pred_dir/<id>.png`` against each record's target panorama.

    Writes ``<out_prefix>.csv`` and ``<out_prefix>.json``. Missing or
    mismatched predictions are flagged per row and counted in ``n_failed``.
    Samples come out at the model's working resolution, so a 4:1 target of a
    different size is resized to the prediction first (noted per row in the JSON).
    """
    from .dataio import load_image, resize

    extractor = extractor if extractor is not None else ToyFeatureExtractor()
    pred_dir = Path(pred_dir)
    rows, preds, truths = [], [], []
    for rec in records:
        row = {"id": rec.id, **{c: None for c in REPORT_COLUMNS}, "seam": None, "status": "ok"}
        path = pred_dir / f"{rec.id}.png"
        try:
            pred = load_image(path)
            truth = load_image(rec.resolve(rec.target_pano_path))
            if pred.shape != truth.shape and _is_panorama(pred) and _is_panorama(truth):
                row["target_resized_from"] = list(truth.shape[:2])
                truth = resize(truth, pred.shape[:2], resize_filter)
            rep = compare(pred, truth, extractor)
        except (OSError, ValueError) as exc:
            row["status"] = f"error: {exc}"
        else:
            row.update(psnr=rep.psnr, ssim=rep.ssim, lpips=rep.lpips, rmse=rep.rmse, sd=rep.sd, seam=rep.seam)
            preds.append(pred)
            truths.append(truth)
        rows.append(row)

    ok = [r for r in rows if r["status"] == "ok"]
    summary = {"id": "mean", "status": f"{len(ok)}/{len(rows)} ok"}
    for c in ("psnr", "ssim", "lpips", "rmse", "sd", "seam"):
        summary[c] = float(np.mean([r[c] for r in ok])) if ok else None
    summary["fid"] = fid(extractor.embed(np.stack(preds)), extractor.embed(np.stack(truths))) if len(ok) >= 2 else None

    fields = ["id", *REPORT_COLUMNS, "seam", "status"]
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    with open(out_prefix.with_suffix(".csv"), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        for r in rows + [summary]:
            w.writerow({k: ("" if r.get(k) is None else r[k]) for k in fields})
    report = {"columns": list(REPORT_COLUMNS), "extractor": type(extractor).__name__,
              "rows": rows, "summary": summary, "n_failed": len(rows) - len(ok)}
    out_prefix.with_suffix(".json").write_text(json.dumps(report, indent=2))
    return report


__all__ = [
    "CAP_DB", "MetricReport", "REPORT_COLUMNS", "ToyFeatureExtractor", "compare", "evaluate_directory",
    "fid", "frechet_distance", "gaussian_window", "lpips", "mse", "psnr", "rmse", "seam_discontinuity",
    "sharpness_difference", "ssim",
]
