"""Procedural toy city with exact ray-cast renderers.

Scenes live in a local ENU frame (meters) anchored at ``SceneSpec.origin``.
Streets form an axis-aligned grid, buildings are boxes placed inside the
blocks, and landmarks are very tall thin cylinders that stay visible over the
rooftops from any street position. Shading is flat, so every pixel color is an
exact function of which primitive the pixel ray hits first.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geo import (
    GeoLocation,
    OverheadFrame,
    enu_to_geo,
    geo_to_enu,
    haversine_distance,
    pixel_ray_field,
)

log = logging.getLogger(__name__)

SKY, GROUND, STREET, BUILDING = 0, 1, 2, 3
CLASS_NAMES = ("sky", "ground", "street", "building")

SKY_COLOR = (135, 190, 235)
GROUND_COLOR = (104, 140, 76)
STREET_COLOR = (72, 72, 78)
FACADE_PALETTE = (
    (178, 102, 82), (196, 180, 150), (150, 150, 160), (120, 86, 70),
    (214, 206, 190), (160, 120, 96), (110, 120, 140), (186, 160, 120),
)
ROOF_PALETTE = tuple(tuple(int(c * 0.6) for c in rgb) for rgb in FACADE_PALETTE)
LANDMARK_PALETTE = (
    (255, 0, 255), (255, 220, 0), (0, 255, 255), (255, 0, 0),
    (0, 0, 255), (255, 128, 0), (128, 0, 255), (0, 255, 0),
)
# class id -> RGB used when a segmentation map is fed to the model as an image
SEG_PALETTE = np.array([SKY_COLOR, GROUND_COLOR, STREET_COLOR, (220, 60, 60)], dtype=np.uint8)


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Street:
    axis: str  # "ew" runs east-west (constant north), "ns" runs north-south
    center: float
    width: float
    lo: float
    hi: float

    @property
    def rect(self) -> tuple[float, float, float, float]:
        """(east0, north0, east1, north1)."""
        h = self.width / 2.0
        if self.axis == "ew":
            return (self.lo, self.center - h, self.hi, self.center + h)
        return (self.center - h, self.lo, self.center + h, self.hi)


@dataclass(frozen=True)
class Building:
    east0: float
    north0: float
    east1: float
    north1: float
    height: float
    color_id: int

    @property
    def rect(self) -> tuple[float, float, float, float]:
        return (self.east0, self.north0, self.east1, self.north1)


@dataclass(frozen=True)
class Landmark:
    east: float
    north: float
    color_id: int
    radius: float = 2.0
    height: float = 2000.0


@dataclass
class SceneParams:
    extent: float = 200.0
    block_size: float = 50.0
    street_width: float = 10.0
    setback: float = 1.5
    lot_size: float = 12.0
    building_density: float = 0.7
    min_height: float = 5.0
    max_height: float = 20.0
    n_landmarks: int = 4
    max_retries: int = 200


@dataclass
class SceneSpec:
    seed: int
    extent: float
    origin: GeoLocation
    streets: list[Street]
    buildings: list[Building]
    landmarks: list[Landmark]
    sky_color: tuple = SKY_COLOR
    ground_color: tuple = GROUND_COLOR
    street_color: tuple = STREET_COLOR

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RenderSettings:
    pano_size: tuple[int, int] = (64, 256)
    overhead_size: int = 64
    gsd: float = 1.0
    camera_height: float = 2.5

    def __post_init__(self):
        H, W = self.pano_size
        if W != 4 * H:
            raise SceneError(f"panorama must be 4:1 (360 x 180 degrees), got {H}x{W}")


def rects_overlap(a, b) -> bool:
    """Open-interior overlap test for (x0, y0, x1, y1) rectangles."""
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def point_in_rect(e: float, n: float, r) -> bool:
    return r[0] <= e <= r[2] and r[1] <= n <= r[3]


def _street_centers(extent: float, block: float) -> list[float]:
    half = extent / 2.0
    k = int(math.floor(half / block))
    return [i * block for i in range(-k, k + 1)]


def generate_scene(seed: int, params: SceneParams | None = None,
                   origin: GeoLocation = GeoLocation(40.65, -73.95)) -> SceneSpec:
    p = params or SceneParams()
    if p.extent <= 0 or p.block_size <= 0:
        raise SceneError("extent and block_size must be positive")
    if p.building_density < 0 or p.n_landmarks < 0:
        raise SceneError("densities must be non-negative")
    if p.street_width >= p.block_size:
        raise SceneError("streets wider than blocks leave no room for buildings")
    rng = np.random.default_rng(seed)
    half = p.extent / 2.0

    centers = _street_centers(p.extent, p.block_size)
    streets = [Street("ew", c, p.street_width, -half, half) for c in centers]
    streets += [Street("ns", c, p.street_width, -half, half) for c in centers]
    street_rects = [s.rect for s in streets]

    # block interiors between consecutive street edges (plus the border strips)
    edges = [-half] + [x for c in centers for x in (c - p.street_width / 2, c + p.street_width / 2)] + [half]
    spans = [(max(edges[i], -half), min(edges[i + 1], half)) for i in range(0, len(edges) - 1, 2)]
    spans = [(a + p.setback, b - p.setback) for a, b in spans if b - a > 2 * p.setback + 1.0]

    buildings: list[Building] = []
    for e0, e1 in spans:
        for n0, n1 in spans:
            ne = max(1, int((e1 - e0) // p.lot_size))
            nn = max(1, int((n1 - n0) // p.lot_size))
            le, ln = (e1 - e0) / ne, (n1 - n0) / nn
            for i in range(ne):
                for j in range(nn):
                    if rng.random() >= p.building_density:
                        continue
                    inset = rng.uniform(0.5, 2.0, size=4)
                    b = Building(
                        east0=e0 + i * le + inset[0], north0=n0 + j * ln + inset[1],
                        east1=e0 + (i + 1) * le - inset[2], north1=n0 + (j + 1) * ln - inset[3],
                        height=float(rng.uniform(p.min_height, p.max_height)),
                        color_id=int(rng.integers(len(FACADE_PALETTE))),
                    )
                    if b.east1 - b.east0 < 1.0 or b.north1 - b.north0 < 1.0:
                        continue
                    if any(rects_overlap(b.rect, r) for r in street_rects):
                        continue
                    buildings.append(b)

    landmarks: list[Landmark] = []
    if p.n_landmarks > len(LANDMARK_PALETTE):
        raise SceneError(f"at most {len(LANDMARK_PALETTE)} landmarks have distinct colors")
    for k in range(p.n_landmarks):
        for _ in range(p.max_retries):
            e, n = rng.uniform(-half + 2, half - 2, size=2)
            lm = Landmark(float(e), float(n), k)
            box = (e - lm.radius - 0.5, n - lm.radius - 0.5, e + lm.radius + 0.5, n + lm.radius + 0.5)
            if any(rects_overlap(box, r) for r in street_rects):
                continue
            if any(rects_overlap(box, b.rect) for b in buildings):
                continue
            if any(math.hypot(e - o.east, n - o.north) < 5.0 for o in landmarks):
                continue
            landmarks.append(lm)
            break
        else:
            raise SceneError(
                f"could not place landmark {k} after {p.max_retries} tries;"
                " lower building_density or n_landmarks")

    return SceneSpec(seed=seed, extent=p.extent, origin=origin, streets=streets,
                     buildings=buildings, landmarks=landmarks)


def scene_to_enu(scene: SceneSpec, loc: GeoLocation) -> tuple[float, float]:
    return geo_to_enu(loc, scene.origin)


def scene_to_geo(scene: SceneSpec, east: float, north: float) -> GeoLocation:
    return enu_to_geo(east, north, scene.origin)


def _frame_enu_grid(scene: SceneSpec, frame: OverheadFrame) -> tuple[np.ndarray, np.ndarray]:
    """Scene ENU coordinates of every overhead pixel center."""
    ce, cn = scene_to_enu(scene, frame.center)
    idx = np.arange(frame.size, dtype=np.float64) + 0.5
    half = frame.size / 2.0
    east = ce + (idx[None, :] - half) * frame.gsd
    north = cn + (half - idx[:, None]) * frame.gsd
    return np.broadcast_to(east, (frame.size, frame.size)), np.broadcast_to(north, (frame.size, frame.size))


def _check_footprint(scene: SceneSpec, frame: OverheadFrame) -> None:
    ce, cn = scene_to_enu(scene, frame.center)
    r = frame.extent / 2.0
    half = scene.extent / 2.0 + 1e-6
    if abs(ce) + r > half or abs(cn) + r > half:
        raise SceneError(
            f"overhead footprint ({frame.extent:.1f} m around {ce:.1f}E {cn:.1f}N)"
            f" exceeds the {scene.extent:.0f} m scene")


def _in_rects(east: np.ndarray, north: np.ndarray, rects) -> np.ndarray:
    mask = np.zeros(east.shape, dtype=bool)
    for r in rects:
        mask |= (east >= r[0]) & (east <= r[2]) & (north >= r[1]) & (north <= r[3])
    return mask


def render_overhead(scene: SceneSpec, frame: OverheadFrame) -> np.ndarray:
    """Orthographic north-up top view, uint8 (size, size, 3)."""
    _check_footprint(scene, frame)
    east, north = _frame_enu_grid(scene, frame)
    img = np.empty(east.shape + (3,), dtype=np.uint8)
    img[:] = scene.ground_color
    img[_in_rects(east, north, [s.rect for s in scene.streets])] = scene.street_color
    top = np.full(east.shape, -np.inf)
    for b in scene.buildings:
        m = (east >= b.east0) & (east <= b.east1) & (north >= b.north0) & (north <= b.north1) & (b.height > top)
        img[m] = ROOF_PALETTE[b.color_id]
        top[m] = b.height
    for lm in scene.landmarks:
        m = np.hypot(east - lm.east, north - lm.north) <= lm.radius
        img[m] = LANDMARK_PALETTE[lm.color_id]
    return img


def _cast(scene: SceneSpec, loc: GeoLocation, settings: RenderSettings, yaw: float):
    """Ray-cast every panorama pixel; returns (rgb, labels)."""
    oe, on = scene_to_enu(scene, loc)
    oz = settings.camera_height
    for b in scene.buildings:
        if b.east0 <= oe <= b.east1 and b.north0 <= on <= b.north1:
            raise SceneError(f"camera at ({oe:.2f}E, {on:.2f}N) is inside a building")
    for lm in scene.landmarks:
        if math.hypot(oe - lm.east, on - lm.north) <= lm.radius:
            raise SceneError(f"camera at ({oe:.2f}E, {on:.2f}N) is inside a landmark")

    H, W = settings.pano_size
    rays = pixel_ray_field(H, W)
    if yaw:
        th = math.radians(yaw)
        c, s = math.cos(th), math.sin(th)
        e, n = rays[..., 0].copy(), rays[..., 1].copy()
        # yawing the camera clockwise by theta adds theta to every column azimuth
        rays[..., 0] = c * e + s * n
        rays[..., 1] = -s * e + c * n
    dx, dy, dz = rays[..., 0], rays[..., 1], rays[..., 2]

    t_best = np.full((H, W), np.inf)
    rgb = np.empty((H, W, 3), dtype=np.uint8)
    rgb[:] = scene.sky_color
    labels = np.full((H, W), SKY, dtype=np.uint8)

    with np.errstate(divide="ignore", invalid="ignore"):
        down = dz < 0
        t_ground = np.where(down, -oz / dz, np.inf)
        ge = oe + t_ground * dx
        gn = on + t_ground * dy
        on_street = down & _in_rects(np.where(down, ge, 0.0), np.where(down, gn, 0.0),
                                     [s.rect for s in scene.streets])
        hit = down
        t_best[hit] = t_ground[hit]
        rgb[hit] = scene.ground_color
        labels[hit] = GROUND
        rgb[on_street] = scene.street_color
        labels[on_street] = STREET

        origin = (oe, on, oz)
        dirs = (dx, dy, dz)
        for b in scene.buildings:
            lo = (b.east0, b.north0, 0.0)
            hi = (b.east1, b.north1, b.height)
            nears, fars = [], []
            for ax in range(3):
                d = dirs[ax]
                o = origin[ax]
                t1 = (lo[ax] - o) / d
                t2 = (hi[ax] - o) / d
                parallel = d == 0
                inside = lo[ax] <= o <= hi[ax]
                nears.append(np.where(parallel, -np.inf if inside else np.inf, np.minimum(t1, t2)))
                fars.append(np.where(parallel, np.inf if inside else -np.inf, np.maximum(t1, t2)))
            tmin = np.maximum(np.maximum(nears[0], nears[1]), nears[2])
            tmax = np.minimum(np.minimum(fars[0], fars[1]), fars[2])
            top_entry = nears[2] >= np.maximum(nears[0], nears[1])
            m = (tmin <= tmax) & (tmin > 0) & (tmin < t_best)
            if not m.any():
                continue
            t_best[m] = tmin[m]
            roof = m & top_entry & (dz < 0)
            rgb[m] = FACADE_PALETTE[b.color_id]
            rgb[roof] = ROOF_PALETTE[b.color_id]
            labels[m] = BUILDING

        for lm in scene.landmarks:
            # vertical cylinder: |(o + t d)_xy - c| = r
            fx, fy = oe - lm.east, on - lm.north
            a = dx * dx + dy * dy
            bq = 2.0 * (fx * dx + fy * dy)
            cq = fx * fx + fy * fy - lm.radius ** 2
            disc = bq * bq - 4.0 * a * cq
            t = (-bq - np.sqrt(disc)) / (2.0 * a)
            z = oz + t * dz
            m = (disc >= 0) & (a > 0) & (t > 0) & (z >= 0) & (z <= lm.height) & (t < t_best)
            t_best[m] = t[m]
            rgb[m] = LANDMARK_PALETTE[lm.color_id]
            labels[m] = BUILDING
    return rgb, labels


def render_panorama(scene: SceneSpec, loc: GeoLocation, settings: RenderSettings,
                    yaw: float = 0.0) -> np.ndarray:
    """Equirectangular panorama at ``loc``, uint8 (H, W, 3); center column faces north when yaw=0."""
    return _cast(scene, loc, settings, yaw)[0]


def render_segmentation(scene: SceneSpec, loc: GeoLocation, settings: RenderSettings,
                        yaw: float = 0.0) -> np.ndarray:
    """Per-pixel class ids (sky, ground, street, building) with the panorama camera."""
    return _cast(scene, loc, settings, yaw)[1]


def colorize_labels(labels: np.ndarray) -> np.ndarray:
    return SEG_PALETTE[labels]


def sample_street_point(scene: SceneSpec, rng: np.random.Generator, near: tuple[float, float] | None = None,
                        radius: float = math.inf, margin: float = 1.0,
                        max_tries: int = 1000) -> tuple[float, float]:
    """Uniform point inside a random street rectangle (optionally within ``radius`` of ``near``)."""
    half = scene.extent / 2.0 - margin
    for _ in range(max_tries):
        s = scene.streets[int(rng.integers(len(scene.streets)))]
        r = s.rect
        e = rng.uniform(max(r[0], -half) + 0.25, min(r[2], half) - 0.25)
        n = rng.uniform(max(r[1], -half) + 0.25, min(r[3], half) - 0.25)
        if near is not None and math.hypot(e - near[0], n - near[1]) > radius:
            continue
        return float(e), float(n)
    raise SceneError("no street point found within the requested radius")


@dataclass
class DatasetParams:
    scene: SceneParams = field(default_factory=SceneParams)
    render: RenderSettings = field(default_factory=RenderSettings)
    pano_radius: float = 60.0
    frame_jitter: float = 0.35


def _build_record(idx: int, seed: int, panos_per_scene: int, params: DatasetParams, out_dir: str) -> dict:
    rng = np.random.default_rng([seed, idx])
    scene = generate_scene(int(rng.integers(2**31)), params.scene)
    rs = params.render
    footprint = rs.overhead_size * rs.gsd
    half = scene.extent / 2.0 - footprint / 2.0

    # target somewhere on a street, overhead frame not centre-aligned but covering it
    for _ in range(1000):
        te, tn = sample_street_point(scene, rng)
        je, jn = rng.uniform(-1, 1, size=2) * params.frame_jitter * footprint / 2.0
        ce, cn = np.clip(te + je, -half, half), np.clip(tn + jn, -half, half)
        if abs(te - ce) < footprint / 2.0 - 1 and abs(tn - cn) < footprint / 2.0 - 1:
            break
    else:
        raise SceneError("could not place target inside an overhead frame")
    target = scene_to_geo(scene, te, tn)
    frame = OverheadFrame(scene_to_geo(scene, float(ce), float(cn)), rs.gsd, rs.overhead_size)

    rid = f"scene{idx:05d}"
    rec_dir = Path(out_dir) / rid
    rec_dir.mkdir(parents=True, exist_ok=True)

    def save(arr, name):
        path = rec_dir / name
        try:
            Image.fromarray(arr).save(path)
        except OSError as exc:
            raise OSError(f"failed to write {path}: {exc}") from exc
        return f"{rid}/{name}"

    locs = []
    for _ in range(panos_per_scene):
        pe, pn = sample_street_point(scene, rng, near=(te, tn), radius=params.pano_radius)
        locs.append(scene_to_geo(scene, pe, pn))
    # written nearest-first so the manifest order matches the loader's distance sort
    locs.sort(key=lambda loc: haversine_distance(loc, target))
    panos = []
    for k, loc in enumerate(locs):
        path = save(render_panorama(scene, loc, rs), f"pano_{k:02d}.png")
        panos.append({"path": path, "lat": loc.lat, "lon": loc.lon})

    return {
        "id": rid,
        "satellite": {"path": save(render_overhead(scene, frame), "satellite.png"),
                      "center": frame.center.as_dict(), "gsd": frame.gsd, "size": frame.size},
        "panoramas": panos,
        "target": target.as_dict(),
        "target_pano_path": save(render_panorama(scene, target, rs), "target.png"),
        "seg_path": save(render_segmentation(scene, target, rs), "seg.png"),
    }


def make_dataset(n_scenes: int, panos_per_scene: int, seed: int, out_dir: str | os.PathLike,
                 params: DatasetParams | None = None, workers: int = 1) -> Path:
    """Render ``n_scenes`` records under ``out_dir`` and write ``manifest.jsonl``; returns its path."""
    if n_scenes < 1:
        raise SceneError(f"n_scenes must be >= 1, got {n_scenes}")
    if panos_per_scene < 0:
        raise SceneError(f"panos_per_scene must be >= 0, got {panos_per_scene}")
    params = params or DatasetParams()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    args = [(i, seed, panos_per_scene, params, str(out)) for i in range(n_scenes)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            records = list(pool.map(_build_record, *zip(*args)))
    else:
        records = [_build_record(*a) for a in args]

    manifest = out / "manifest.jsonl"
    try:
        with open(manifest, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"failed to write {manifest}: {exc}") from exc
    log.info("wrote %d records to %s", len(records), manifest)
    return manifest


def landmark_geo(scene: SceneSpec, lm: Landmark) -> GeoLocation:
    return scene_to_geo(scene, lm.east, lm.north)

