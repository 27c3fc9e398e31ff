"""Geodesy and camera geometry.

Conventions used throughout the package:

* Locations are WGS84 degrees on a spherical Earth of radius ``EARTH_RADIUS``.
* Local Cartesian frames are east-north-up (ENU), in meters.
* Panoramas are equirectangular, 360 x 180 degrees, with the center column
  facing north and pixel centers at ``+0.5`` offsets.
* Overhead images are north-up parallel projections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EARTH_RADIUS = 6_371_000.0
DISTANCE_SCALE = 100.0


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class GeoLocation:
    lat: float
    lon: float

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0):
            raise GeometryError(f"latitude {self.lat} outside [-90, 90]")
        if not (-180.0 <= self.lon < 180.0):
            raise GeometryError(f"longitude {self.lon} outside [-180, 180)")

    def as_dict(self) -> dict:
        return {"lat": self.lat, "lon": self.lon}


@dataclass(frozen=True)
class OverheadFrame:
    """North-up square overhead tile centred on ``center``."""

    center: GeoLocation
    gsd: float
    size: int

    def __post_init__(self):
        if not self.gsd > 0:
            raise GeometryError(f"gsd must be positive, got {self.gsd}")
        if self.size < 1:
            raise GeometryError(f"size must be >= 1, got {self.size}")

    @property
    def extent(self) -> float:
        """Side length of the footprint in meters."""
        return self.gsd * self.size


def haversine_distance(a: GeoLocation, b: GeoLocation) -> float:
    lat1, lat2 = math.radians(a.lat), math.radians(b.lat)
    dlat = lat2 - lat1
    dlon = math.radians(b.lon - a.lon)
    h = math.sin(dlat / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2) ** 2
    return 2.0 * EARTH_RADIUS * math.asin(min(1.0, math.sqrt(h)))


def compass_bearing(a: GeoLocation, b: GeoLocation) -> float:
    """Initial great-circle bearing from ``a`` to ``b``, clockwise from north, in [0, 360)."""
    if a == b:
        raise GeometryError("bearing undefined for coincident points")
    lat1, lat2 = math.radians(a.lat), math.radians(b.lat)
    dlon = math.radians(b.lon - a.lon)
    x = math.sin(dlon) * math.cos(lat2)
    y = math.cos(lat1) * math.sin(lat2) - math.sin(lat1) * math.cos(lat2) * math.cos(dlon)
    deg = math.degrees(math.atan2(x, y)) % 360.0
    # -0.0 % 360 and tiny negatives can round to exactly 360.0
    return 0.0 if deg >= 360.0 else deg


def column_azimuths(W: int) -> np.ndarray:
    """Azimuth (radians, 0 = north, clockwise positive) of each panorama column center."""
    u = np.arange(W, dtype=np.float64)
    return 2.0 * np.pi * ((u + 0.5) / W - 0.5)


def row_elevations(H: int) -> np.ndarray:
    v = np.arange(H, dtype=np.float64)
    return np.pi * (0.5 - (v + 0.5) / H)


def azimuth_to_column(azimuth_deg: float, W: int) -> float:
    """Fractional column index whose center looks along ``azimuth_deg`` (inverse of ``column_azimuths``)."""
    theta = math.radians(azimuth_deg)
    # wrap into [-pi, pi)
    theta = (theta + math.pi) % (2.0 * math.pi) - math.pi
    return (theta / (2.0 * math.pi) + 0.5) * W - 0.5


def pixel_ray_field(H: int, W: int) -> np.ndarray:
    """Unit ENU ray for every pixel of an H x W equirectangular panorama, shape (H, W, 3)."""
    if H < 2 or W < 2:
        raise GeometryError(f"ray field needs H, W >= 2, got {H}x{W}")
    theta = column_azimuths(W)[None, :]
    phi = row_elevations(H)[:, None]
    cos_phi = np.cos(phi)
    rays = np.empty((H, W, 3))
    rays[..., 0] = np.sin(theta) * cos_phi
    rays[..., 1] = np.cos(theta) * cos_phi
    rays[..., 2] = np.broadcast_to(np.sin(phi), (H, W))
    return rays


def pixel_ray(u: float, v: float, H: int, W: int) -> np.ndarray:
    """ENU ray through fractional pixel position (u = column, v = row), same convention as the field."""
    theta = 2.0 * math.pi * ((u + 0.5) / W - 0.5)
    phi = math.pi * (0.5 - (v + 0.5) / H)
    return np.array([math.sin(theta) * math.cos(phi), math.cos(theta) * math.cos(phi), math.sin(phi)])


def target_relative_orientation(rays: np.ndarray, bearing: float) -> np.ndarray:
    """Rotate rays about the up axis by ``-bearing`` so the target direction becomes [0, 1, 0]."""
    if bearing == 0.0:
        return rays.copy()
    b = math.radians(bearing)
    c, s = math.cos(b), math.sin(b)
    out = np.empty_like(rays)
    e, n = rays[..., 0], rays[..., 1]
    # a ray with azimuth theta ends up at azimuth theta - bearing
    out[..., 0] = c * e - s * n
    out[..., 1] = s * e + c * n
    out[..., 2] = rays[..., 2]
    return out


def distance_feature(a: GeoLocation, b: GeoLocation, H: int, W: int,
                     scale: float = DISTANCE_SCALE) -> np.ndarray:
    return np.full((H, W, 1), haversine_distance(a, b) / scale)


def orientation_feature(source: GeoLocation, target: GeoLocation, H: int, W: int) -> np.ndarray:
    """Target-relative ray orientation map (H, W, 3); identity rotation when source == target."""
    rays = pixel_ray_field(H, W)
    if source == target:
        return rays
    return target_relative_orientation(rays, compass_bearing(source, target))


def geo_to_enu(loc: GeoLocation, origin: GeoLocation) -> tuple[float, float]:
    """Local tangent-plane (east, north) offset of ``loc`` from ``origin`` in meters."""
    lat0 = math.radians(origin.lat)
    dlon = (loc.lon - origin.lon + 180.0) % 360.0 - 180.0
    east = EARTH_RADIUS * math.cos(lat0) * math.radians(dlon)
    north = EARTH_RADIUS * math.radians(loc.lat - origin.lat)
    return east, north


def enu_to_geo(east: float, north: float, origin: GeoLocation) -> GeoLocation:
    lat0 = math.radians(origin.lat)
    lat = origin.lat + math.degrees(north / EARTH_RADIUS)
    lon = origin.lon + math.degrees(east / (EARTH_RADIUS * math.cos(lat0)))
    lon = (lon + 180.0) % 360.0 - 180.0
    return GeoLocation(lat, lon)


def geo_to_overhead_pixel(loc: GeoLocation, frame: OverheadFrame,
                          check: bool = True) -> tuple[float, float]:
    """(row, col) of ``loc`` in ``frame``; raises if outside the footprint unless ``check`` is False."""
    east, north = geo_to_enu(loc, frame.center)
    half = frame.size / 2.0
    row = half - north / frame.gsd
    col = half + east / frame.gsd
    if check and not (0.0 <= row < frame.size and 0.0 <= col < frame.size):
        raise GeometryError(
            f"location ({loc.lat:.7f}, {loc.lon:.7f}) falls at pixel ({row:.2f}, {col:.2f}),"
            f" outside the {frame.size}px footprint")
    return row, col


def overhead_pixel_to_geo(row: float, col: float, frame: OverheadFrame) -> GeoLocation:
    half = frame.size / 2.0
    north = (half - row) * frame.gsd
    east = (col - half) * frame.gsd
    return enu_to_geo(east, north, frame.center)


def in_footprint(loc: GeoLocation, frame: OverheadFrame) -> bool:
    row, col = geo_to_overhead_pixel(loc, frame, check=False)
    return 0.0 <= row < frame.size and 0.0 <= col < frame.size
