"""Zoom-24 Web-Mercator (slippy-map XYZ) tile arithmetic.

Tiles are addressed by integer column ``x`` and row ``y`` with ``y`` growing
southward. There is no antimeridian wraparound: columns 0 and 2**24 - 1 are
far apart, not neighbours.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import total_ordering

import numpy as np

ZOOM = 24
N_TILES = 1 << ZOOM
MAX_LAT = 85.05112878


class TileRangeError(ValueError):
    """Raised for coordinates outside the Web-Mercator domain."""


@total_ordering
@dataclass(frozen=True, slots=True)
class TileId:
    x: int
    y: int

    def __post_init__(self):
        if not (0 <= self.x < N_TILES and 0 <= self.y < N_TILES):
            raise TileRangeError(f"tile ({self.x}, {self.y}) outside zoom-{ZOOM} grid")

    def __lt__(self, other: "TileId") -> bool:
        # iteration order everywhere is row-major: (y, x)
        return (self.y, self.x) < (other.y, other.x)

    def offset(self, dx: int, dy: int) -> "TileId":
        return TileId(self.x + dx, self.y + dy)

    @property
    def quadkey(self) -> str:
        return tile_to_quadkey(self)


@dataclass(frozen=True, slots=True)
class TileOffset:
    dx: int
    dy: int

    def norm(self) -> int:
        return max(abs(self.dx), abs(self.dy))

    def within(self, r: int) -> bool:
        return self.norm() <= r


def _check_latlon(lat: float, lon: float) -> None:
    if not (math.isfinite(lat) and math.isfinite(lon)):
        raise TileRangeError(f"non-finite coordinate ({lat}, {lon})")
    if not -MAX_LAT <= lat <= MAX_LAT:
        raise TileRangeError(f"latitude {lat} outside Web-Mercator range")
    if not -180.0 <= lon < 180.0:
        raise TileRangeError(f"longitude {lon} outside [-180, 180)")


def _clamp(v: int) -> int:
    return min(max(v, 0), N_TILES - 1)


def latlon_to_tile(lat: float, lon: float) -> TileId:
    """Return the zoom-24 tile containing ``(lat, lon)`` (degrees, WGS84)."""
    _check_latlon(lat, lon)
    x = math.floor((lon + 180.0) / 360.0 * N_TILES)
    lat_rad = math.radians(lat)
    merc = math.log(math.tan(lat_rad) + 1.0 / math.cos(lat_rad))
    y = math.floor((1.0 - merc / math.pi) / 2.0 * N_TILES)
    return TileId(_clamp(x), _clamp(y))


def latlon_to_tile_arrays(lat: np.ndarray, lon: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised :func:`latlon_to_tile`.

    Returns ``(x, y, valid)``; entries where ``valid`` is False hold 0.
    """
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    valid = (
        np.isfinite(lat) & np.isfinite(lon)
        & (lat >= -MAX_LAT) & (lat <= MAX_LAT)
        & (lon >= -180.0) & (lon < 180.0)
    )
    safe_lat = np.where(valid, lat, 0.0)
    safe_lon = np.where(valid, lon, 0.0)
    x = np.floor((safe_lon + 180.0) / 360.0 * N_TILES)
    lat_rad = np.radians(safe_lat)
    merc = np.log(np.tan(lat_rad) + 1.0 / np.cos(lat_rad))
    y = np.floor((1.0 - merc / np.pi) / 2.0 * N_TILES)
    x = np.clip(x, 0, N_TILES - 1).astype(np.int64)
    y = np.clip(y, 0, N_TILES - 1).astype(np.int64)
    x[~valid] = 0
    y[~valid] = 0
    return x, y, valid


def tile_center_latlon(t: TileId) -> tuple[float, float]:
    lon = (t.x + 0.5) / N_TILES * 360.0 - 180.0
    lat = math.degrees(math.atan(math.sinh(math.pi * (1.0 - 2.0 * (t.y + 0.5) / N_TILES))))
    return lat, lon


def tile_to_quadkey(t: TileId) -> str:
    digits = []
    for i in range(ZOOM - 1, -1, -1):
        digits.append(str(((t.y >> i) & 1) << 1 | ((t.x >> i) & 1)))
    return "".join(digits)


def quadkey_to_tile(qk: str) -> TileId:
    if len(qk) != ZOOM:
        raise ValueError(f"quadkey must have {ZOOM} digits, got {len(qk)}")
    x = y = 0
    for ch in qk:
        d = ord(ch) - 48
        if not 0 <= d <= 3:
            raise ValueError(f"invalid quadkey digit {ch!r}")
        x = (x << 1) | (d & 1)
        y = (y << 1) | (d >> 1)
    return TileId(x, y)


def _spread_bits(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0xFFFFFFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x0000FFFF0000FFFF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x00FF00FF00FF00FF)
    v = (v | (v << np.uint64(4))) & np.uint64(0x0F0F0F0F0F0F0F0F)
    v = (v | (v << np.uint64(2))) & np.uint64(0x3333333333333333)
    v = (v | (v << np.uint64(1))) & np.uint64(0x5555555555555555)
    return v


def quadkey_order(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Morton codes whose numeric order equals lexicographic quadkey order."""
    return (_spread_bits(np.asarray(y)) << np.uint64(1)) | _spread_bits(np.asarray(x))


def quadkeys_from_arrays(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Quadkeys for many tiles at once, as a ``S24`` byte-string array."""
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    shifts = np.arange(ZOOM - 1, -1, -1, dtype=np.int64)
    digits = (((y[:, None] >> shifts) & 1) << 1) | ((x[:, None] >> shifts) & 1)
    chars = (digits + 48).astype(np.uint8)
    return np.ascontiguousarray(chars).view(f"S{ZOOM}").reshape(-1)


def chebyshev(a: TileId, b: TileId) -> int:
    return max(abs(a.x - b.x), abs(a.y - b.y))


def neighborhood(s: TileId, r: int) -> list[TileId]:
    """Tiles within Chebyshev radius ``r`` of ``s`` in (dy, dx) raster order, clipped at the grid edge."""
    if r < 1:
        raise ValueError("neighbourhood radius must be >= 1")
    out = []
    for dy in range(-r, r + 1):
        y = s.y + dy
        if not 0 <= y < N_TILES:
            continue
        for dx in range(-r, r + 1):
            x = s.x + dx
            if 0 <= x < N_TILES:
                out.append(TileId(x, y))
    return out


def offset_to_pixel(dx: int, dy: int, r: int) -> tuple[int, int]:
    """Window pixel ``(i, j)`` holding offset ``(dx, dy)``."""
    return dy + r, dx + r
