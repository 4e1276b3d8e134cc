"""Synthetic taxi logs in T-Drive text format.

Taxis drive random walks on a Manhattan street grid around central Beijing,
sampled every 1-5 s with metre-level GPS noise, occasional stops and
occasional long reporting gaps. Used for fixtures and scaling runs when the
real T-Drive release is not at hand.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

M_PER_DEG = 111195.0


@dataclass
class CityConfig:
    lat0: float = 39.9042
    lon0: float = 116.4074
    n_streets: int = 6
    spacing_m: float = 240.0
    noise_m: float = 1.0
    min_dt: int = 1
    max_dt: int = 5
    min_speed: float = 0.5
    max_speed: float = 4.5
    stop_prob: float = 0.03
    gap_prob: float = 0.0005
    start: str = "2008-02-02 00:00:00"
    span_s: int = 7 * 24 * 3600


def _walk(rng: np.random.Generator, cfg: CityConfig, length_m: float) -> np.ndarray:
    """Polyline (k, 2) of east/north metres along a random street walk."""
    n = cfg.n_streets
    node = rng.integers(0, n, size=2)
    pts = [node * cfg.spacing_m]
    total = 0.0
    steps = ((1, 0), (-1, 0), (0, 1), (0, -1))
    while total < length_m:
        opts = [s for s in steps if 0 <= node[0] + s[0] < n and 0 <= node[1] + s[1] < n]
        s = opts[rng.integers(len(opts))]
        node = node + np.array(s)
        pts.append(node * cfg.spacing_m)
        total += cfg.spacing_m
    return np.array(pts, dtype=np.float64)


def taxi_track(rng: np.random.Generator, cfg: CityConfig, n_records: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (seconds offset, lat, lon) arrays for one taxi."""
    dt = rng.integers(cfg.min_dt, cfg.max_dt + 1, size=n_records).astype(np.int64)
    gaps = rng.random(n_records) < cfg.gap_prob
    dt[gaps] += rng.integers(400, 3600, size=int(gaps.sum()))
    dt[0] = 0
    t = np.cumsum(dt) + int(rng.integers(0, max(1, cfg.span_s - int(dt.sum()))))
    speed = rng.uniform(cfg.min_speed, cfg.max_speed, size=n_records)
    speed[rng.random(n_records) < cfg.stop_prob] = 0.0
    # gaps are reporting outages, the taxi keeps moving a little
    step = np.minimum(speed * dt, 60.0)
    step[0] = 0.0
    dist = np.cumsum(step)
    poly = _walk(rng, cfg, float(dist[-1]) + cfg.spacing_m)
    seg = np.linalg.norm(np.diff(poly, axis=0), axis=1)
    cum = np.concatenate(([0.0], np.cumsum(seg)))
    idx = np.clip(np.searchsorted(cum, dist, side="right") - 1, 0, len(seg) - 1)
    frac = (dist - cum[idx]) / seg[idx]
    pos = poly[idx] + (poly[idx + 1] - poly[idx]) * frac[:, None]
    pos += rng.normal(0.0, cfg.noise_m, size=pos.shape)
    lat = cfg.lat0 + pos[:, 1] / M_PER_DEG
    lon = cfg.lon0 + pos[:, 0] / (M_PER_DEG * math.cos(math.radians(cfg.lat0)))
    return t, lat, lon


def write_tdrive_dir(out_dir: str | os.PathLike, n_records: int, n_taxis: int = 50, seed: int = 0,
                     cfg: CityConfig | None = None) -> Path:
    """Write ``n_taxis`` files ``<id>.txt`` with ``n_records`` lines in total."""
    cfg = cfg or CityConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    start = datetime.fromisoformat(cfg.start)
    per = np.full(n_taxis, n_records // n_taxis)
    per[: n_records % n_taxis] += 1
    for taxi, n in enumerate(per, start=1):
        if n == 0:
            continue
        t, lat, lon = taxi_track(rng, cfg, int(n))
        lines = []
        for s, la, lo in zip(t.tolist(), lat.tolist(), lon.tolist()):
            stamp = (start + timedelta(seconds=s)).strftime("%Y-%m-%d %H:%M:%S")
            lines.append(f"{taxi},{stamp},{lo:.5f},{la:.5f}\n")
        (out / f"{taxi}.txt").write_text("".join(lines))
    return out
