"""Data-parallel stage 1: tile paths -> merged accumulators -> RSUM1 archive.

Paths are split into one contiguous chunk per worker. Each worker runs the
vectorised event kernel and returns its accumulators sharded by 256x256 tile
block. Shards of the same block are merged (integer sums, order-free), global
maxima are taken over the merged result, and each block is then normalised and
written by a worker at a byte offset fixed by the block's tile count. The
archive bytes therefore do not depend on the worker count or on scheduling.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import archive
from .summary import (DEFAULT_H_MAX, DEFAULT_R, DEFAULT_TAU_S, SCHEMES, SparseAccumulator,
                      TrajArrays, check_radius, events_kernel)
from .trajectory import (DEFAULT_GAP_S, DEFAULT_JUMP_TILES, ObservationWindow, TilePath,
                         read_dump, read_tdrive_dir, segment, to_tile_path, window_filter)

log = logging.getLogger(__name__)


class DeterminismError(RuntimeError):
    pass


class ConfigMismatchError(RuntimeError):
    pass


@dataclass
class JobConfig:
    input: str
    output: str
    r: int = DEFAULT_R
    tau_s: int = DEFAULT_TAU_S
    h_max: int = DEFAULT_H_MAX
    workers: int = 1
    scheme: str = "log1p-max"
    t0: int | None = None
    delta_t: int | None = None
    gap_s: int = DEFAULT_GAP_S
    jump_tiles: int = DEFAULT_JUMP_TILES
    checkpoint_dir: str | None = None

    def validate(self) -> None:
        check_radius(self.r)
        if self.tau_s <= 0:
            raise ValueError("tau_s must be > 0")
        if self.h_max < 1:
            raise ValueError("h_max must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown normalization scheme {self.scheme!r}")
        if (self.t0 is None) != (self.delta_t is None):
            raise ValueError("t0 and delta_t go together")
        if self.delta_t is not None and self.delta_t <= 0:
            raise ValueError("delta_t must be > 0")

    @property
    def window(self) -> ObservationWindow | None:
        if self.t0 is None:
            return None
        return ObservationWindow(self.t0, self.delta_t)

    def algorithm_params(self) -> dict:
        """Everything that can change the archive bytes (not the worker count)."""
        return {"r": self.r, "tau_s": self.tau_s, "h_max": self.h_max, "scheme": self.scheme,
                "t0": self.t0, "delta_t": self.delta_t}


@dataclass
class Stage1Result:
    path: Path
    manifest: dict
    worker_events: list[int]
    wall_s: float


def clip_window(paths: Sequence[TilePath], window: ObservationWindow | None) -> list[TilePath]:
    if window is None:
        return list(paths)
    out = []
    for p in paths:
        vs = [v for v in p.visits if window.contains(v.timestamp)]
        if len(vs) >= 2:
            out.append(TilePath(p.trajectory_id, vs))
    return out


def load_paths(cfg: JobConfig) -> list[TilePath]:
    src = Path(cfg.input)
    if src.is_dir():
        records = window_filter(read_tdrive_dir(src), cfg.window)
        paths = [to_tile_path(t) for t in segment(records, cfg.gap_s, cfg.jump_tiles)]
    else:
        with open(src, encoding="utf-8") as fh:
            paths = read_dump(fh)
    paths = clip_window(paths, cfg.window)
    paths.sort(key=lambda p: p.trajectory_id)
    return paths


def arrays_digest(arr: TrajArrays) -> str:
    h = hashlib.sha256()
    h.update("\n".join(arr.ids).encode())
    for a in (arr.offsets, arr.x, arr.y, arr.t, arr.cum_mm):
        h.update(np.ascontiguousarray(a, dtype="<i8").tobytes())
    return h.hexdigest()


def _work(part: TrajArrays, r: int, tau_s: int, h_max: int) -> tuple[int, dict[int, SparseAccumulator]]:
    acc = events_kernel(part, r, tau_s, h_max)
    return acc.n_events, acc.shard()


def _merge_block(shards: list[SparseAccumulator]) -> SparseAccumulator:
    return SparseAccumulator.merge(shards)


def _save_partial(path: Path, n_events: int, shards: dict[int, SparseAccumulator]) -> None:
    blocks = sorted(shards)
    arrays = {"n_events": np.array([n_events]), "blocks": np.array(blocks, dtype=np.int64)}
    for b in blocks:
        s = shards[b]
        for name in ("key", "count", "sum_mm", "sum_s"):
            arrays[f"{b}_{name}"] = getattr(s, name)
    tmp = path.with_name(path.name + ".partial.npz")
    np.savez(tmp, **arrays)
    os.replace(tmp, path)


def _load_partial(path: Path, r: int) -> tuple[int, dict[int, SparseAccumulator]]:
    with np.load(path) as z:
        n_events = int(z["n_events"][0])
        shards = {}
        for i, b in enumerate(z["blocks"].tolist()):
            shards[b] = SparseAccumulator(r, z[f"{b}_key"], z[f"{b}_count"], z[f"{b}_sum_mm"],
                                          z[f"{b}_sum_s"], n_events if i == 0 else 0)
    return n_events, shards


def _run_partitions(cfg: JobConfig, parts: list[TrajArrays], digest: str, pool=None):
    args = (cfg.r, cfg.tau_s, cfg.h_max)
    results: list = [None] * len(parts)
    ckpt = None
    if cfg.checkpoint_dir:
        ckpt = Path(cfg.checkpoint_dir)
        ckpt.mkdir(parents=True, exist_ok=True)
        params = {**cfg.algorithm_params(), "workers": cfg.workers, "input_sha256": digest}
        pfile = ckpt / "params.json"
        if pfile.exists():
            old = json.loads(pfile.read_text())
            if old != params:
                diff = sorted(k for k in params if old.get(k) != params[k])
                raise ConfigMismatchError(f"checkpoint parameters differ: {', '.join(diff)}")
        else:
            pfile.write_text(json.dumps(params, sort_keys=True))
        for i in range(len(parts)):
            f = ckpt / f"part-{i:04d}.npz"
            if f.exists():
                results[i] = _load_partial(f, cfg.r)
    todo = [i for i in range(len(parts)) if results[i] is None]
    if pool is None:
        for i in todo:
            results[i] = _work(parts[i], *args)
            if ckpt:
                _save_partial(ckpt / f"part-{i:04d}.npz", *results[i])
    else:
        futs = {i: pool.submit(_work, parts[i], *args) for i in todo}
        for i in todo:
            results[i] = futs[i].result()
            if ckpt:
                _save_partial(ckpt / f"part-{i:04d}.npz", *results[i])
    return results


def merge_blocks(results: list[tuple[int, dict[int, SparseAccumulator]]], pool=None) -> list[SparseAccumulator]:
    """Merge worker shards block by block; the result is in block (= key) order."""
    by_block: dict[int, list[SparseAccumulator]] = {}
    for _, shards in results:
        for b, s in shards.items():
            by_block.setdefault(b, []).append(s)
    groups = [by_block[b] for b in sorted(by_block)]
    if pool is not None and len(groups) > 1:
        return list(pool.map(_merge_block, groups))
    return [_merge_block(g) for g in groups]


def merge_shards(results: list[tuple[int, dict[int, SparseAccumulator]]], r: int,
                 pool=None) -> SparseAccumulator:
    return concat_blocks(merge_blocks(results, pool), r, sum(n for n, _ in results))


def concat_blocks(merged: list[SparseAccumulator], r: int, n_events: int) -> SparseAccumulator:
    if not merged:
        return SparseAccumulator(r, n_events=n_events)
    # blocks are morton prefixes, so concatenating in block order keeps keys sorted
    return SparseAccumulator(
        r,
        np.concatenate([m.key for m in merged]),
        np.concatenate([m.count for m in merged]),
        np.concatenate([m.sum_mm for m in merged]),
        np.concatenate([m.sum_s for m in merged]),
        n_events,
    )


def run_stage1(cfg: JobConfig, arrays: TrajArrays | None = None) -> Stage1Result:
    """Build the summary archive for ``cfg``.

    ``arrays`` lets callers replay pre-loaded paths (the benchmark does this so
    that parsing is not timed).
    """
    cfg.validate()
    if arrays is None:
        arrays = TrajArrays.from_paths(load_paths(cfg))
    start = time.perf_counter()
    digest = arrays_digest(arrays)
    parts = arrays.split(cfg.workers)
    pool = ProcessPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        results = _run_partitions(cfg, parts, digest, pool)
        blocks = merge_blocks(results, pool)
        acc = concat_blocks(blocks, cfg.r, sum(n for n, _ in results))
        maxima = acc.maxima()
        manifest = archive.write_archive(
            cfg.output, acc,
            {"tau_s": cfg.tau_s, "h_max": cfg.h_max,
             "t0": "" if cfg.t0 is None else cfg.t0, "delta_t": "" if cfg.delta_t is None else cfg.delta_t,
             "n_paths": arrays.n_paths, "n_visits": arrays.n_visits, "input_sha256": digest},
            maxima, cfg.scheme, blocks=blocks, pool=pool)
    finally:
        if pool is not None:
            pool.shutdown()
    wall = time.perf_counter() - start
    worker_events = [n for n, _ in results]
    if sum(worker_events) != manifest["n_events"]:
        raise DeterminismError("worker event counts do not add up to the merged total")
    log.info("stage 1: %d events, %d tiles, %.2fs with %d workers",
             manifest["n_events"], manifest["n_tiles"], wall, cfg.workers)
    return Stage1Result(Path(cfg.output), manifest, worker_events, wall)


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class ScalingRow:
    workers: int
    wall_s: float
    speedup: float
    efficiency: float
    events_per_s: float
    sha256: str = field(repr=False, default="")


@dataclass
class ScalingReport:
    rows: list[ScalingRow]
    n_visits: int
    n_events: int

    def efficiency(self, workers: int) -> float:
        return next(r.efficiency for r in self.rows if r.workers == workers)

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["workers", "wall_s", "speedup", "efficiency", "events_per_s"])
            for r in self.rows:
                w.writerow([r.workers, f"{r.wall_s:.6f}", f"{r.speedup:.6f}",
                            f"{r.efficiency:.6f}", f"{r.events_per_s:.1f}"])


def bench_strong_scaling(cfg: JobConfig, worker_counts: Sequence[int],
                         arrays: TrajArrays | None = None, repeats: int = 1,
                         keep_output: bool = False) -> ScalingReport:
    """Time :func:`run_stage1` on fixed input at each worker count.

    Input is loaded once. Each configuration runs ``repeats`` times and the
    fastest wall time is kept. Any difference in archive bytes between worker
    counts raises :class:`DeterminismError`.
    """
    if 1 not in worker_counts:
        raise ValueError("worker_counts must include 1")
    if arrays is None:
        arrays = TrajArrays.from_paths(load_paths(cfg))
    out = Path(cfg.output)
    times: dict[int, float] = {}
    hashes: dict[int, str] = {}
    n_events = 0
    for wc in worker_counts:
        best = float("inf")
        for _ in range(repeats):
            run_cfg = JobConfig(**{**asdict(cfg), "workers": wc, "checkpoint_dir": None,
                                   "output": str(out.with_name(f"{out.name}.w{wc}"))})
            res = run_stage1(run_cfg, arrays)
            best = min(best, res.wall_s)
            h = file_sha256(res.path)
            n_events = res.manifest["n_events"]
            if hashes.setdefault(wc, h) != h:
                raise DeterminismError(f"rerun with {wc} workers changed the archive")
            if keep_output and wc == worker_counts[0]:
                os.replace(res.path, out)
            else:
                res.path.unlink()
        times[wc] = best
    reference = hashes[1]
    bad = [wc for wc, h in hashes.items() if h != reference]
    if bad:
        raise DeterminismError(f"archive differs from the 1-worker result at workers={bad}")
    rows = []
    for wc in worker_counts:
        speedup = times[1] / times[wc]
        rows.append(ScalingRow(wc, times[wc], speedup, speedup / wc,
                               n_events / times[wc] if times[wc] > 0 else 0.0, hashes[wc]))
    return ScalingReport(rows, arrays.n_visits, n_events)
