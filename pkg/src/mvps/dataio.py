"""Manifest records, condition assembly, splits and checkpoint files.

Manifest: JSON Lines, one record per line::

    {"id": ..., "satellite": {"path", "center": {"lat", "lon"}, "gsd", "size"},
     "panoramas": [{"path", "lat", "lon"}, ...], "target": {"lat", "lon"},
     "target_pano_path": ..., "seg_path": ...}   # seg_path optional

Relative image paths resolve against the manifest's directory.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .geo import (
    GeoLocation,
    GeometryError,
    OverheadFrame,
    compass_bearing,
    haversine_distance,
    in_footprint,
    pixel_ray_field,
    target_relative_orientation,
)
from .synthworld import SEG_PALETTE

DEFAULT_PROMPT = "A high-resolution street-view panorama"
CONDITION_NAMES_BASE = ("seg", "sat")

_RESAMPLE = {
    "bilinear": Image.BILINEAR,
    "area": Image.BOX,
    "nearest": Image.NEAREST,
    "bicubic": Image.BICUBIC,
}


class ManifestError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class PanoRef:
    path: str
    location: GeoLocation
    distance: float  # meters to the record's target, cached at load time


@dataclass
class SampleRecord:
    id: str
    satellite_path: str
    frame: OverheadFrame
    panoramas: list[PanoRef]
    target_location: GeoLocation
    target_pano_path: str | None
    seg_path: str | None = None
    root: Path = field(default=Path("."), compare=False)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "satellite": {
                "path": self.satellite_path,
                "center": self.frame.center.as_dict(),
                "gsd": self.frame.gsd,
                "size": self.frame.size,
            },
            "panoramas": [{"path": p.path, "lat": p.location.lat, "lon": p.location.lon}
                          for p in self.panoramas],
            "target": self.target_location.as_dict(),
            "target_pano_path": self.target_pano_path,
        }
        if self.seg_path is not None:
            d["seg_path"] = self.seg_path
        return d


def _loc(obj, what: str) -> GeoLocation:
    try:
        return GeoLocation(float(obj["lat"]), float(obj["lon"]))
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"{what}: expected {{lat, lon}}, got {obj!r}") from exc


def parse_record(obj: dict, root: Path = Path(".")) -> SampleRecord:
    """Validate one manifest object; panoramas come back sorted by distance to the target."""
    if not isinstance(obj, dict):
        raise ManifestError(f"record must be an object, got {type(obj).__name__}")
    rid = obj.get("id")
    if not isinstance(rid, str) or not rid:
        raise ManifestError("record is missing a string 'id'")
    try:
        sat = obj["satellite"]
        frame = OverheadFrame(_loc(sat["center"], f"{rid}.satellite.center"),
                              float(sat["gsd"]), int(sat["size"]))
        target = _loc(obj["target"], f"{rid}.target")
        panos_raw = obj["panoramas"]
        target_path = obj["target_pano_path"]
        sat_path = sat["path"]
    except KeyError as exc:
        raise ManifestError(f"record {rid!r}: missing key {exc}") from exc
    except GeometryError as exc:
        raise ManifestError(f"record {rid!r}: {exc}") from exc
    if not isinstance(panos_raw, list):
        raise ManifestError(f"record {rid!r}: 'panoramas' must be a list")
    if not in_footprint(target, frame):
        raise ManifestError(f"record {rid!r}: target location lies outside the satellite footprint")

    panos = []
    for k, p in enumerate(panos_raw):
        if "path" not in p:
            raise ManifestError(f"record {rid!r}: panorama {k} has no 'path'")
        try:
            loc = _loc(p, f"{rid}.panoramas[{k}]")
        except GeometryError as exc:
            raise ManifestError(f"record {rid!r}: panorama {k}: {exc}") from exc
        panos.append(PanoRef(p["path"], loc, haversine_distance(loc, target)))
    # stable sort: ties keep record order
    panos.sort(key=lambda p: p.distance)
    return SampleRecord(rid, sat_path, frame, panos, target, target_path, obj.get("seg_path"), root)


def load_manifest(path: str | os.PathLike) -> list[SampleRecord]:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"{path}: manifest not found")
    records, seen = [], set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            try:
                rec = parse_record(obj, path.parent)
            except (ManifestError, ValueError, TypeError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            if rec.id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate record id {rec.id!r}")
            seen.add(rec.id)
            records.append(rec)
    return records


def write_manifest(records: list[SampleRecord], path: str | os.PathLike) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    return path


# --------------------------------------------------------------------------- images


def load_image(path: str | os.PathLike) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB") if im.mode not in ("L", "P") else im).copy()
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


def resize(img: np.ndarray, hw: tuple[int, int], resize_filter: str = "bilinear") -> np.ndarray:
    if img.shape[:2] == tuple(hw):
        return img
    if resize_filter not in _RESAMPLE:
        raise ValueError(f"unknown resize_filter {resize_filter!r}; choose from {sorted(_RESAMPLE)}")
    return np.asarray(Image.fromarray(img).resize((hw[1], hw[0]), _RESAMPLE[resize_filter]))


def seg_to_rgb(seg: np.ndarray) -> np.ndarray:
    """Label maps are colorized with the class palette; RGB maps pass through."""
    return SEG_PALETTE[np.clip(seg, 0, len(SEG_PALETTE) - 1)] if seg.ndim == 2 else seg


def tile_satellite(sat: np.ndarray, height: int, resize_filter: str = "bilinear") -> np.ndarray:
    """Resize to height x height and repeat four times horizontally (height x 4*height)."""
    return np.tile(resize(sat, (height, height), resize_filter), (1, 4, 1))


# --------------------------------------------------------------------------- conditions


@dataclass
class ConditionSet:
    """Fixed-shape conditioning inputs: seg, tiled satellite and K panorama slots.

    ``drop_mask`` is ordered ``(seg, sat, pano_1, ..., pano_K)``; a dropped slot
    always holds a zero image.
    """

    seg: np.ndarray
    satellite_tiled: np.ndarray
    panos: list[np.ndarray]
    pano_locations: list[GeoLocation | None]
    drop_mask: np.ndarray
    prompt: str = DEFAULT_PROMPT
    target_location: GeoLocation | None = None

    @property
    def names(self) -> tuple[str, ...]:
        return CONDITION_NAMES_BASE + tuple(f"pano_{k + 1}" for k in range(len(self.panos)))

    def images(self) -> list[np.ndarray]:
        return [self.seg, self.satellite_tiled, *self.panos]

    def with_drops(self, drop: np.ndarray, prompt: str | None = None) -> "ConditionSet":
        drop = np.asarray(drop, dtype=bool) | self.drop_mask
        imgs = [zeros_like_cached(im) if d else im for im, d in zip(self.images(), drop)]
        return replace(self, seg=imgs[0], satellite_tiled=imgs[1], panos=imgs[2:], drop_mask=drop,
                       prompt=self.prompt if prompt is None else prompt)


_ZEROS: dict = {}


def zeros_like_cached(img: np.ndarray) -> np.ndarray:
    key = (img.shape, img.dtype.str)
    z = _ZEROS.get(key)
    if z is None:
        z = np.zeros(img.shape, img.dtype)
        z.flags.writeable = False
        _ZEROS[key] = z
    return z


def nearest_panoramas(record: SampleRecord, k: int) -> list[PanoRef]:
    # record.panoramas is already distance-sorted with stable tie-breaking
    return record.panoramas[:k]


def select_conditions(record: SampleRecord, K: int = 2, image_height: int = 256,
                      resize_filter: str = "bilinear", prompt: str = DEFAULT_PROMPT,
                      with_seg: bool = True) -> ConditionSet:
    H, W = image_height, 4 * image_height
    chosen = nearest_panoramas(record, K)
    panos, locs = [], []
    for p in chosen:
        panos.append(resize(load_image(record.resolve(p.path)), (H, W), resize_filter))
        locs.append(p.location)
    blank = zeros_like_cached(np.empty((H, W, 3), np.uint8))
    drop = [False, False] + [False] * len(chosen) + [True] * (K - len(chosen))
    panos += [blank] * (K - len(chosen))
    locs += [None] * (K - len(chosen))

    if with_seg and record.seg_path is not None:
        seg = load_image(record.resolve(record.seg_path))
        seg = seg_to_rgb(resize(seg, (H, W), "nearest" if seg.ndim == 2 else resize_filter))
    else:
        seg, drop[0] = blank, True
    sat = tile_satellite(load_image(record.resolve(record.satellite_path)), H, resize_filter)
    return ConditionSet(seg, sat, panos, locs, np.array(drop), prompt, record.target_location)


def select_attention_set(record: SampleRecord, N: int = 20, image_height: int | None = None,
                         resize_filter: str = "bilinear") -> list[tuple[np.ndarray, GeoLocation]]:
    out = []
    for p in nearest_panoramas(record, N):
        img = load_image(record.resolve(p.path))
        if image_height is not None:
            img = resize(img, (image_height, 4 * image_height), resize_filter)
        out.append((img, p.location))
    return out


def relative_geometry(source: GeoLocation, target: GeoLocation, grid: tuple[int, int],
                      distance_scale: float = 100.0):
    """(scaled distance, bearing degrees, orientation map (h, w, 3)) from a panorama to the target."""
    d = haversine_distance(source, target) / distance_scale
    rays = pixel_ray_field(*grid)
    if source == target:
        return d, 0.0, rays
    b = compass_bearing(source, target)
    return d, b, target_relative_orientation(rays, b)


# --------------------------------------------------------------------------- splits


@dataclass
class SplitSpec:
    train: list[str]
    val: list[str]
    test: list[str]

    def validate(self, ids: list[str] | None = None) -> None:
        a, b, c = set(self.train), set(self.val), set(self.test)
        if a & b or a & c or b & c:
            raise ValueError("splits overlap")
        if ids is not None and (a | b | c) != set(ids):
            raise ValueError("splits do not cover the manifest")


def make_splits(records: list[SampleRecord], val_fraction: float = 0.1, test_fraction: float = 0.1,
                seed: int = 0) -> SplitSpec:
    ids = [r.id for r in records]
    order = np.random.default_rng(seed).permutation(len(ids))
    n_val = int(round(val_fraction * len(ids)))
    n_test = int(round(test_fraction * len(ids)))
    val = [ids[i] for i in order[:n_val]]
    test = [ids[i] for i in order[n_val:n_val + n_test]]
    train = [ids[i] for i in order[n_val + n_test:]]
    split = SplitSpec(train, val, test)
    split.validate(ids)
    return split


# --------------------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"MVPSCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(state: dict, path: str | os.PathLike) -> Path:
    """Write ``state`` (tensors, config, optimizer and RNG state) as one versioned, checksummed file."""
    import torch

    buf = io.BytesIO()
    torch.save({"version": CHECKPOINT_VERSION, **state}, buf)
    payload = buf.getvalue()
    header = CHECKPOINT_MAGIC + CHECKPOINT_VERSION.to_bytes(4, "little") + hashlib.sha256(payload).digest()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header + len(payload).to_bytes(8, "little") + payload)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> dict:
    import torch

    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if len(blob) < 52:
        raise CheckpointError(f"{path}: truncated header")
    version = int.from_bytes(blob[8:12], "little")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    digest, size = blob[12:44], int.from_bytes(blob[44:52], "little")
    payload = blob[52:]
    if len(payload) != size or hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: corrupt or truncated checkpoint ({len(payload)} of {size} bytes)")
    state = torch.load(io.BytesIO(payload), map_location="cpu", weights_only=False)
    state.pop("version", None)
    return state
