"""T-Drive parsing, trajectory cleaning and tile paths."""
from __future__ import annotations

import io
import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

from .tilegrid import TileId, TileRangeError, chebyshev, latlon_to_tile

log = logging.getLogger(__name__)

EARTH_RADIUS_M = 6371008.8
BEIJING = timezone(timedelta(hours=8))
DEFAULT_GAP_S = 300
DEFAULT_JUMP_TILES = 2000


@dataclass(frozen=True, slots=True)
class GpsRecord:
    mover_id: str
    timestamp: int
    lat: float
    lon: float
    tile: TileId


@dataclass(slots=True)
class Trajectory:
    id: str
    records: list[GpsRecord]


@dataclass(frozen=True, slots=True)
class TileVisit:
    tile: TileId
    timestamp: int
    cum_mm: int  # along-path distance from trajectory start, integer millimetres

    @property
    def cum_m(self) -> float:
        return self.cum_mm / 1000.0


@dataclass(frozen=True)
class ObservationWindow:
    t0: int
    delta_t: int

    def __post_init__(self):
        if self.delta_t <= 0:
            raise ValueError("observation window needs delta_t > 0")

    def contains(self, t: int) -> bool:
        return self.t0 <= t <= self.t0 + self.delta_t


@dataclass
class TilePath:
    """A trajectory reduced to its sequence of distinct consecutive tiles."""

    trajectory_id: str
    visits: list[TileVisit] = field(default_factory=list)

    def __len__(self):
        return len(self.visits)

    def __iter__(self) -> Iterator[TileVisit]:
        return iter(self.visits)

    @property
    def tiles(self) -> list[TileId]:
        return [v.tile for v in self.visits]


def parse_timestamp(text: str) -> int:
    """T-Drive local Beijing time -> integer UTC epoch seconds (fixed +8 h)."""
    if len(text) != 19 or text[10] != " ":
        raise ValueError(f"bad timestamp {text!r}")
    dt = datetime.fromisoformat(text).replace(tzinfo=BEIJING)
    return int(dt.timestamp())


def parse_tdrive_line(line: str) -> GpsRecord:
    parts = line.strip().split(",")
    if len(parts) != 4:
        raise ValueError(f"expected 4 fields, got {len(parts)}")
    mover, stamp, lon_s, lat_s = parts
    if not mover:
        raise ValueError("empty mover id")
    lon = float(lon_s)
    lat = float(lat_s)
    tile = latlon_to_tile(lat, lon)
    return GpsRecord(mover, parse_timestamp(stamp), lat, lon, tile)


def parse_tdrive_file(stream: BinaryIO, counters: Counter | None = None) -> list[GpsRecord]:
    """Parse one T-Drive log (``id,datetime,lon,lat`` per line).

    Malformed or out-of-range lines are skipped and counted under
    ``counters["skipped"]``; good ones under ``counters["parsed"]``. Blank
    lines count as skipped so that parsed + skipped equals the line count.
    """
    if counters is None:
        counters = Counter()
    text = io.TextIOWrapper(stream, encoding="utf-8", errors="replace", newline="")
    records = []
    for line in text:
        try:
            records.append(parse_tdrive_line(line))
        except (ValueError, TileRangeError):
            counters["skipped"] += 1
        else:
            counters["parsed"] += 1
    return records


def read_tdrive_dir(path: str | os.PathLike, counters: Counter | None = None) -> list[GpsRecord]:
    """Parse every ``*.txt`` file in ``path``; result sorted by (mover, time)."""
    path = Path(path)
    if not path.is_dir():
        raise NotADirectoryError(str(path))
    records: list[GpsRecord] = []
    for f in sorted(path.glob("*.txt")):
        with open(f, "rb") as fh:
            records.extend(parse_tdrive_file(fh, counters))
    records.sort(key=lambda rec: (rec.mover_id, rec.timestamp))
    return records


def window_filter(records: Iterable[GpsRecord], window: ObservationWindow | None) -> list[GpsRecord]:
    if window is None:
        return list(records)
    return [rec for rec in records if window.contains(rec.timestamp)]


def segment(records: list[GpsRecord], gap_s: int = DEFAULT_GAP_S,
            jump_tiles: int = DEFAULT_JUMP_TILES) -> list[Trajectory]:
    """Split per-mover record streams into clean trajectories.

    A new segment starts on a mover change, a time gap above ``gap_s`` or a
    tile jump above ``jump_tiles``. Records repeating the previous timestamp
    are dropped. Segments with fewer than two records are discarded.
    """
    ordered = sorted(records, key=lambda rec: (rec.mover_id, rec.timestamp))
    out: list[Trajectory] = []
    seg_index: Counter = Counter()
    current: list[GpsRecord] = []

    def flush():
        if len(current) >= 2:
            mover = current[0].mover_id
            out.append(Trajectory(f"{mover}_{seg_index[mover]:05d}", list(current)))
            seg_index[mover] += 1
        current.clear()

    for rec in ordered:
        if current:
            prev = current[-1]
            if rec.mover_id != prev.mover_id:
                flush()
            elif rec.timestamp == prev.timestamp:
                continue
            elif rec.timestamp - prev.timestamp > gap_s or chebyshev(rec.tile, prev.tile) > jump_tiles:
                flush()
        current.append(rec)
    flush()
    return out


def haversine_m(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(a)))


def to_tile_path(t: Trajectory) -> TilePath:
    """Collapse runs of records in one tile into a single visit.

    Each visit keeps the timestamp of its first record; ``cum_mm`` is the
    haversine distance summed over all raw records up to that record.
    """
    path = TilePath(t.id)
    cum = 0.0
    prev = None
    for rec in t.records:
        if prev is not None:
            cum += haversine_m(prev.lat, prev.lon, rec.lat, rec.lon)
        if not path.visits or path.visits[-1].tile != rec.tile:
            path.visits.append(TileVisit(rec.tile, rec.timestamp, int(round(cum * 1000.0))))
        prev = rec
    return path


def format_mm(mm: int) -> str:
    return f"{mm // 1000}.{mm % 1000:03d}"


def parse_mm(text: str) -> int:
    whole, _, frac = text.partition(".")
    frac = (frac + "000")[:3]
    return int(whole) * 1000 + int(frac)


def write_dump(paths: Iterable[TilePath], fh) -> int:
    """Write the normalized trajectory dump; returns the number of lines.

    Lines are ``id<TAB>timestamp<TAB>tile_x<TAB>tile_y<TAB>cum_m`` sorted by
    (trajectory id, timestamp).
    """
    n = 0
    for path in sorted(paths, key=lambda p: p.trajectory_id):
        for v in path.visits:
            fh.write(f"{path.trajectory_id}\t{v.timestamp}\t{v.tile.x}\t{v.tile.y}\t{format_mm(v.cum_mm)}\n")
            n += 1
    return n


def read_dump(fh) -> list[TilePath]:
    paths: list[TilePath] = []
    current = None
    for lineno, line in enumerate(fh, 1):
        line = line.rstrip("\n")
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ValueError(f"dump line {lineno}: expected 5 fields, got {len(parts)}")
        tid, ts, x, y, cum = parts
        if current is None or current.trajectory_id != tid:
            current = TilePath(tid)
            paths.append(current)
        current.visits.append(TileVisit(TileId(int(x), int(y)), int(ts), parse_mm(cum)))
    return paths
