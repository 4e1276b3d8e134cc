"""Reachability summaries: neighbourhood-restricted transition statistics per tile.

Two routes produce the same integer accumulators:

* :func:`extract_events` + :func:`accumulate` work on Python objects and
  keep one :class:`ReachabilitySummary` per tile.
* :func:`events_kernel` works on flat numpy arrays and yields a
  :class:`SparseAccumulator`, the form the parallel pipeline merges.

Distances are integer millimetres and times integer seconds until the
single finalize pass, so partial results merge exactly in any order.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .tilegrid import TileId, chebyshev, quadkey_order
from .trajectory import ObservationWindow, TilePath

CHANNELS = (
    "emission_count", "emission_mean_m", "emission_mean_s",
    "absorption_count", "absorption_mean_m", "absorption_mean_s",
)
COUNT_CHANNELS = (0, 3)
SCHEMES = ("log1p-max",)
DEFAULT_R = 12
DEFAULT_TAU_S = 600
DEFAULT_H_MAX = 16

EMISSION, ABSORPTION = 0, 1


@dataclass(frozen=True, slots=True)
class TransitionEvent:
    src: TileId
    dst: TileId
    hop_chebyshev: int
    path_mm: int
    elapsed_s: int
    trajectory_id: str
    ordinal: int

    @property
    def path_m(self) -> float:
        return self.path_mm / 1000.0


def extract_events(path: TilePath, r: int, tau_s: int = DEFAULT_TAU_S,
                   h_max: int = DEFAULT_H_MAX) -> list[TransitionEvent]:
    """All visit pairs up to ``h_max`` hops apart that stay inside the
    radius-``r`` window and take at most ``tau_s`` seconds.

    Pairs returning to the starting tile carry no displacement and are not
    events.
    """
    if r < 1 or tau_s <= 0 or h_max < 1:
        raise ValueError("need r >= 1, tau_s > 0, h_max >= 1")
    visits = path.visits
    out = []
    for i, u in enumerate(visits):
        for k in range(1, h_max + 1):
            if i + k >= len(visits):
                break
            v = visits[i + k]
            hop = chebyshev(u.tile, v.tile)
            elapsed = v.timestamp - u.timestamp
            if hop == 0 or hop > r or elapsed > tau_s:
                continue
            out.append(TransitionEvent(u.tile, v.tile, hop, v.cum_mm - u.cum_mm,
                                       elapsed, path.trajectory_id, i))
    return out


@dataclass
class ReachabilitySummary:
    center: TileId
    r: int
    # [..., 0] emission, [..., 1] absorption; pixel (i, j) is offset (j - r, i - r)
    count: np.ndarray = None
    sum_mm: np.ndarray = None
    sum_s: np.ndarray = None
    tensor: np.ndarray | None = None

    def __post_init__(self):
        side = 2 * self.r + 1
        for name in ("count", "sum_mm", "sum_s"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros((side, side, 2), dtype=np.int64))

    @property
    def side(self) -> int:
        return 2 * self.r + 1

    def add(self, direction: int, dx: int, dy: int, mm: int, s: int) -> None:
        i, j = dy + self.r, dx + self.r
        self.count[i, j, direction] += 1
        self.sum_mm[i, j, direction] += mm
        self.sum_s[i, j, direction] += s

    def raw_tensor(self) -> np.ndarray:
        """Unnormalised (side, side, 6) float64 tensor; means are 0 where counts are 0."""
        out = np.zeros((self.side, self.side, 6))
        for d in (EMISSION, ABSORPTION):
            c = self.count[..., d]
            nz = c > 0
            out[..., 3 * d] = c
            out[..., 3 * d + 1][nz] = self.sum_mm[..., d][nz] / 1000.0 / c[nz]
            out[..., 3 * d + 2][nz] = self.sum_s[..., d][nz] / c[nz]
        return out


def accumulate(events: Iterable[TransitionEvent], r: int) -> dict[TileId, ReachabilitySummary]:
    """Event ``u -> v`` feeds v's emission pixel at ``u - v`` and u's
    absorption pixel at ``v - u``."""
    out: dict[TileId, ReachabilitySummary] = {}

    def get(t):
        s = out.get(t)
        if s is None:
            s = out[t] = ReachabilitySummary(t, r)
        return s

    for e in events:
        if e.src == e.dst or chebyshev(e.src, e.dst) > r:
            raise ValueError(f"event {e.src}->{e.dst} outside the radius-{r} neighbourhood")
        dx, dy = e.src.x - e.dst.x, e.src.y - e.dst.y
        get(e.dst).add(EMISSION, dx, dy, e.path_mm, e.elapsed_s)
        get(e.src).add(ABSORPTION, -dx, -dy, e.path_mm, e.elapsed_s)
    return out


def global_maxima(summaries: Iterable[ReachabilitySummary]) -> np.ndarray:
    """Per-channel maxima of the raw tensors across the whole dataset."""
    m = np.zeros(6)
    for s in summaries:
        m = np.maximum(m, s.raw_tensor().reshape(-1, 6).max(axis=0))
    return m


def normalize_tensor(raw: np.ndarray, maxima: Sequence[float], scheme: str = "log1p-max") -> np.ndarray:
    if scheme not in SCHEMES:
        raise ValueError(f"unknown normalization scheme {scheme!r}")
    raw = np.asarray(raw, dtype=np.float64)
    out = np.zeros(raw.shape, dtype=np.float64)
    for ch in range(6):
        mx = float(maxima[ch])
        if mx <= 0:
            continue
        if ch in COUNT_CHANNELS:
            out[..., ch] = np.log1p(raw[..., ch]) / np.log1p(mx)
        else:
            out[..., ch] = raw[..., ch] / mx
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def normalize(s: ReachabilitySummary, scheme: str = "log1p-max",
              maxima: Sequence[float] | None = None) -> ReachabilitySummary:
    """Counts -> log1p(c)/log1p(max); means -> value/max, using dataset-wide maxima.

    Without ``maxima`` the summary's own maxima are used.
    """
    raw = s.raw_tensor()
    if maxima is None:
        maxima = raw.reshape(-1, 6).max(axis=0)
    return ReachabilitySummary(s.center, s.r, s.count, s.sum_mm, s.sum_s,
                               normalize_tensor(raw, maxima, scheme))


# ---------------------------------------------------------------------------
# array route

@dataclass
class TrajArrays:
    """Concatenated tile paths. Path ``k`` spans ``offsets[k]:offsets[k+1]``."""

    ids: list[str]
    offsets: np.ndarray
    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    cum_mm: np.ndarray

    @classmethod
    def from_paths(cls, paths: Sequence[TilePath]) -> "TrajArrays":
        lens = np.array([len(p) for p in paths], dtype=np.int64)
        offsets = np.zeros(len(paths) + 1, dtype=np.int64)
        np.cumsum(lens, out=offsets[1:])
        n = int(offsets[-1])
        x = np.empty(n, np.int64)
        y = np.empty(n, np.int64)
        t = np.empty(n, np.int64)
        c = np.empty(n, np.int64)
        pos = 0
        for p in paths:
            for v in p.visits:
                x[pos], y[pos], t[pos], c[pos] = v.tile.x, v.tile.y, v.timestamp, v.cum_mm
                pos += 1
        return cls([p.trajectory_id for p in paths], offsets, x, y, t, c)

    @property
    def n_paths(self) -> int:
        return len(self.ids)

    @property
    def n_visits(self) -> int:
        return int(self.offsets[-1])

    def take(self, lo: int, hi: int) -> "TrajArrays":
        a, b = int(self.offsets[lo]), int(self.offsets[hi])
        return TrajArrays(self.ids[lo:hi], self.offsets[lo:hi + 1] - a, self.x[a:b],
                          self.y[a:b], self.t[a:b], self.cum_mm[a:b])

    def split(self, parts: int) -> list["TrajArrays"]:
        """Contiguous chunks with roughly equal visit counts."""
        if self.n_paths == 0:
            return [self] + [self.take(0, 0) for _ in range(parts - 1)]
        targets = np.linspace(0, self.n_visits, parts + 1)
        cuts = np.searchsorted(self.offsets, targets[1:-1], side="left")
        bounds = [0, *[int(c) for c in cuts], self.n_paths]
        bounds = np.maximum.accumulate(np.clip(bounds, 0, self.n_paths))
        return [self.take(int(bounds[i]), int(bounds[i + 1])) for i in range(parts)]


def n_slots(r: int) -> int:
    side = 2 * r + 1
    return 2 * side * side


def check_radius(r: int) -> None:
    if r < 1:
        raise ValueError("r must be >= 1")
    if n_slots(r) >= 1 << 16:
        raise ValueError("r too large for 64-bit accumulator keys")


@dataclass
class SparseAccumulator:
    """Integer accumulators keyed by ``morton(tile) * n_slots + slot``.

    ``slot = direction * side**2 + i * side + j``. Keys are unique and sorted,
    which is quadkey order of the tiles.
    """

    r: int
    key: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint64))
    count: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    sum_mm: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    sum_s: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    n_events: int = 0

    def __len__(self):
        return len(self.key)

    @classmethod
    def reduce(cls, r: int, key, count, sum_mm, sum_s, n_events: int = 0) -> "SparseAccumulator":
        if len(key) == 0:
            return cls(r, n_events=n_events)
        order = np.argsort(key, kind="stable")
        key = key[order]
        starts = np.flatnonzero(np.concatenate(([True], key[1:] != key[:-1])))
        return cls(r, key[starts], np.add.reduceat(count[order], starts),
                   np.add.reduceat(sum_mm[order], starts), np.add.reduceat(sum_s[order], starts),
                   n_events)

    @classmethod
    def merge(cls, parts: Sequence["SparseAccumulator"]) -> "SparseAccumulator":
        if not parts:
            raise ValueError("nothing to merge")
        r = parts[0].r
        if any(p.r != r for p in parts):
            raise ValueError("cannot merge accumulators with different r")
        return cls.reduce(
            r,
            np.concatenate([p.key for p in parts]),
            np.concatenate([p.count for p in parts]),
            np.concatenate([p.sum_mm for p in parts]),
            np.concatenate([p.sum_s for p in parts]),
            sum(p.n_events for p in parts),
        )

    @classmethod
    def from_summaries(cls, summaries: dict[TileId, ReachabilitySummary], r: int, n_events: int = 0):
        side = 2 * r + 1
        ns = n_slots(r)
        keys, cnt, mm, ss = [], [], [], []
        for t, s in summaries.items():
            m = int(quadkey_order(np.array([t.x]), np.array([t.y]))[0])
            # slot layout is (direction, i, j)
            c = np.moveaxis(s.count, 2, 0).reshape(-1)
            nz = np.flatnonzero(c)
            keys.append(np.uint64(m) * np.uint64(ns) + nz.astype(np.uint64))
            cnt.append(c[nz])
            mm.append(np.moveaxis(s.sum_mm, 2, 0).reshape(-1)[nz])
            ss.append(np.moveaxis(s.sum_s, 2, 0).reshape(-1)[nz])
        if not keys:
            return cls(r, n_events=n_events)
        return cls.reduce(r, np.concatenate(keys), np.concatenate(cnt), np.concatenate(mm),
                          np.concatenate(ss), n_events)

    def block_of(self) -> np.ndarray:
        """256x256-tile block id of every entry (morton prefix)."""
        return (self.key // np.uint64(n_slots(self.r))) >> np.uint64(16)

    def shard(self) -> dict[int, "SparseAccumulator"]:
        """Split by grid block. ``n_events`` stays with the first shard."""
        if len(self) == 0:
            return {}
        blocks = self.block_of()
        starts = np.flatnonzero(np.concatenate(([True], blocks[1:] != blocks[:-1])))
        ends = np.append(starts[1:], len(blocks))
        out = {}
        for n, (a, b) in enumerate(zip(starts, ends)):
            out[int(blocks[a])] = SparseAccumulator(
                self.r, self.key[a:b], self.count[a:b], self.sum_mm[a:b], self.sum_s[a:b],
                self.n_events if n == 0 else 0)
        return out

    def tile_morton(self) -> np.ndarray:
        return self.key // np.uint64(n_slots(self.r))

    def totals(self) -> tuple[int, int]:
        """(total emission count, total absorption count)."""
        side = 2 * self.r + 1
        direction = (self.key % np.uint64(n_slots(self.r))) // np.uint64(side * side)
        return int(self.count[direction == 0].sum()), int(self.count[direction == 1].sum())

    def maxima(self) -> np.ndarray:
        """Per-channel maxima of the finalized (unnormalised) tensor values."""
        m = np.zeros(6)
        if len(self) == 0:
            return m
        side = 2 * self.r + 1
        direction = ((self.key % np.uint64(n_slots(self.r))) // np.uint64(side * side)).astype(np.int64)
        for d in (EMISSION, ABSORPTION):
            sel = direction == d
            if not sel.any():
                continue
            c = self.count[sel]
            m[3 * d] = c.max()
            m[3 * d + 1] = (self.sum_mm[sel] / 1000.0 / c).max()
            m[3 * d + 2] = (self.sum_s[sel] / c).max()
        return m

    def to_summaries(self) -> dict[TileId, ReachabilitySummary]:
        """Expand into per-tile objects (small data only)."""
        from .tilegrid import quadkey_to_tile, quadkeys_from_arrays

        out: dict[TileId, ReachabilitySummary] = {}
        side = 2 * self.r + 1
        ns = np.uint64(n_slots(self.r))
        morton = self.key // ns
        slot = (self.key % ns).astype(np.int64)
        x, y = morton_decode(morton)
        for k in range(len(self)):
            t = TileId(int(x[k]), int(y[k]))
            s = out.get(t)
            if s is None:
                s = out[t] = ReachabilitySummary(t, self.r)
            d, rem = divmod(int(slot[k]), side * side)
            i, j = divmod(rem, side)
            s.count[i, j, d] = self.count[k]
            s.sum_mm[i, j, d] = self.sum_mm[k]
            s.sum_s[i, j, d] = self.sum_s[k]
        return out


def _compact_bits(v: np.ndarray) -> np.ndarray:
    v = v & np.uint64(0x5555555555555555)
    v = (v | (v >> np.uint64(1))) & np.uint64(0x3333333333333333)
    v = (v | (v >> np.uint64(2))) & np.uint64(0x0F0F0F0F0F0F0F0F)
    v = (v | (v >> np.uint64(4))) & np.uint64(0x00FF00FF00FF00FF)
    v = (v | (v >> np.uint64(8))) & np.uint64(0x0000FFFF0000FFFF)
    v = (v | (v >> np.uint64(16))) & np.uint64(0x00000000FFFFFFFF)
    return v


def morton_decode(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m = np.asarray(m, dtype=np.uint64)
    return _compact_bits(m).astype(np.int64), _compact_bits(m >> np.uint64(1)).astype(np.int64)


def events_kernel(arr: TrajArrays, r: int, tau_s: int = DEFAULT_TAU_S,
                  h_max: int = DEFAULT_H_MAX) -> SparseAccumulator:
    """Vectorised extract + accumulate over a batch of paths."""
    check_radius(r)
    side = 2 * r + 1
    ns = np.uint64(n_slots(r))
    n = arr.n_visits
    if n == 0:
        return SparseAccumulator(r)
    path_of = np.repeat(np.arange(arr.n_paths), np.diff(arr.offsets))
    morton = quadkey_order(arr.x, arr.y)
    keys, cnt_mm, cnt_s = [], [], []
    n_events = 0
    for k in range(1, h_max + 1):
        if k >= n:
            break
        a = np.arange(n - k)
        b = a + k
        same = path_of[a] == path_of[b]
        dx = arr.x[a] - arr.x[b]
        dy = arr.y[a] - arr.y[b]
        hop = np.maximum(np.abs(dx), np.abs(dy))
        dt = arr.t[b] - arr.t[a]
        ok = same & (hop > 0) & (hop <= r) & (dt <= tau_s)
        if not ok.any():
            if not same.any():
                break
            continue
        a, b, dx, dy, dt = a[ok], b[ok], dx[ok], dy[ok], dt[ok]
        mm = arr.cum_mm[b] - arr.cum_mm[a]
        n_events += len(a)
        # emission into dst at offset src - dst
        em_slot = (EMISSION * side * side + (dy + r) * side + (dx + r)).astype(np.uint64)
        ab_slot = (ABSORPTION * side * side + (r - dy) * side + (r - dx)).astype(np.uint64)
        keys.append(morton[b] * ns + em_slot)
        keys.append(morton[a] * ns + ab_slot)
        cnt_mm.extend((mm, mm))
        cnt_s.extend((dt, dt))
    if not keys:
        return SparseAccumulator(r)
    key = np.concatenate(keys)
    return SparseAccumulator.reduce(r, key, np.ones(len(key), np.int64),
                                    np.concatenate(cnt_mm), np.concatenate(cnt_s), n_events)


def normalized_entries(acc: SparseAccumulator, maxima: Sequence[float],
                       scheme: str = "log1p-max") -> np.ndarray:
    """Normalised (count, mean_m, mean_s) for every accumulator entry, float32 (n, 3)."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown normalization scheme {scheme!r}")
    side = 2 * acc.r + 1
    d = ((acc.key % np.uint64(n_slots(acc.r))) // np.uint64(side * side)).astype(np.int64)
    c = acc.count.astype(np.float64)
    raw = np.stack([c, acc.sum_mm / 1000.0 / c, acc.sum_s / c], axis=1)
    mx = np.asarray(maxima, dtype=np.float64).reshape(2, 3)[d]
    out = np.zeros_like(raw)
    ok = mx > 0
    safe = np.where(ok, mx, 1.0)
    out[:, 0] = np.log1p(raw[:, 0]) / np.log1p(safe[:, 0])
    out[:, 1:] = raw[:, 1:] / safe[:, 1:]
    out[~ok] = 0.0
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def dense_tensors(acc: SparseAccumulator, maxima: Sequence[float], scheme: str = "log1p-max",
                  chunk: int = 4096, values: np.ndarray | None = None):
    """Yield ``(morton, tensors)`` chunks of normalised (side, side, 6) float32 tensors in key order."""
    if values is None:
        values = normalized_entries(acc, maxima, scheme)
    r = acc.r
    side = 2 * r + 1
    ns = np.uint64(n_slots(r))
    if len(acc) == 0:
        return
    morton = acc.key // ns
    slot = (acc.key % ns).astype(np.int64)
    starts = np.flatnonzero(np.concatenate(([True], morton[1:] != morton[:-1])))
    tiles = morton[starts]
    bounds = np.append(starts, len(morton))
    d = slot // (side * side)
    pix = slot % (side * side)
    for lo in range(0, len(tiles), chunk):
        hi = min(lo + chunk, len(tiles))
        a, b = bounds[lo], bounds[hi]
        out = np.zeros((hi - lo, side * side, 6), dtype=np.float32)
        tile_idx = np.repeat(np.arange(hi - lo), np.diff(bounds[lo:hi + 1]))
        base = 3 * d[a:b]
        for k in range(3):
            out[tile_idx, pix[a:b], base + k] = values[a:b, k]
        yield tiles[lo:hi], out.reshape(hi - lo, side, side, 6)


# ---------------------------------------------------------------------------
# LAR baseline

LAR_CHANNELS = ("record_count", "distinct_trajectory_count", "mean_speed_mps")


@dataclass
class LarRaster:
    """Per-tile aggregates that ignore connectivity: visits, distinct
    trajectories and distance-weighted mean speed of the outgoing segment."""

    record_count: dict[TileId, int]
    trajectory_count: dict[TileId, int]
    sum_mm: dict[TileId, int]
    sum_s: dict[TileId, int]

    def tiles(self) -> list[TileId]:
        return sorted(self.record_count)

    def raw(self, t: TileId) -> np.ndarray:
        s = self.sum_s.get(t, 0)
        speed = self.sum_mm.get(t, 0) / 1000.0 / s if s > 0 else 0.0
        return np.array([self.record_count[t], self.trajectory_count[t], speed])

    def maxima(self) -> np.ndarray:
        m = np.zeros(3)
        for t in self.record_count:
            m = np.maximum(m, self.raw(t))
        return m

    def normalized(self) -> dict[TileId, np.ndarray]:
        m = self.maxima()
        out = {}
        for t in self.tiles():
            v = self.raw(t)
            n = np.zeros(3)
            for ch in (0, 1):
                if m[ch] > 0:
                    n[ch] = math.log1p(v[ch]) / math.log1p(m[ch])
            if m[2] > 0:
                n[2] = v[2] / m[2]
            out[t] = n
        return out


def lar_raster(paths: Iterable[TilePath], window: ObservationWindow | None = None) -> LarRaster:
    records: dict[TileId, int] = defaultdict(int)
    trajs: dict[TileId, set] = defaultdict(set)
    sum_mm: dict[TileId, int] = defaultdict(int)
    sum_s: dict[TileId, int] = defaultdict(int)
    for path in paths:
        vs = path.visits
        for i, v in enumerate(vs):
            if window is not None and not window.contains(v.timestamp):
                continue
            records[v.tile] += 1
            trajs[v.tile].add(path.trajectory_id)
            if i + 1 < len(vs):
                sum_mm[v.tile] += vs[i + 1].cum_mm - v.cum_mm
                sum_s[v.tile] += vs[i + 1].timestamp - v.timestamp
    return LarRaster(dict(records), {t: len(s) for t, s in trajs.items()}, dict(sum_mm), dict(sum_s))
