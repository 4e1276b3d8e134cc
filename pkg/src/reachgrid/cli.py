"""``reachgrid`` command line: ingest, summarize, train, embed, export, project, bench.

Exit codes: 0 success, 1 internal error, 2 usage or parameter error,
3 incompatible artifacts.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from collections import Counter
from pathlib import Path

import numpy as np

from . import __version__
from . import archive as rsum
from . import cae, store
from .pipeline import JobConfig, bench_strong_scaling, file_sha256, load_paths, run_stage1
from .summary import TrajArrays
from .tilegrid import quadkey_to_tile
from .trajectory import (DEFAULT_GAP_S, DEFAULT_JUMP_TILES, ObservationWindow, read_tdrive_dir,
                         segment, to_tile_path, window_filter, write_dump)

log = logging.getLogger("reachgrid")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_INCOMPATIBLE = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _default_workers() -> int:
    env = os.environ.get("REACHGRID_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"REACHGRID_THREADS must be an integer, got {env!r}")
    return 1


def dir_sha256(path: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(path.glob("*.txt")):
        h.update(f.name.encode())
        h.update(file_sha256(f).encode())
    return h.hexdigest()


def input_sha256(path: str | os.PathLike) -> str:
    p = Path(path)
    return dir_sha256(p) if p.is_dir() else file_sha256(p)


def write_run_manifest(args, command: str, inputs: dict, outputs: list[str], wall_s: float,
                       extra: dict | None = None) -> dict:
    """Write ``<first output>.run.json`` and merge into ``--run-manifest`` if given."""
    params = {k: v for k, v in vars(args).items() if k not in ("func", "run_manifest")}
    entry = {
        "command": command,
        "tool_version": __version__,
        "params": params,
        "inputs": {k: {"path": str(v), "sha256": input_sha256(v)} for k, v in inputs.items()},
        "outputs": {str(p): file_sha256(p) for p in outputs},
        "wall_s": round(wall_s, 6),
        **(extra or {}),
    }
    Path(outputs[0] + ".run.json").write_text(json.dumps(entry, indent=2, sort_keys=True) + "\n")
    if getattr(args, "run_manifest", None):
        rm = Path(args.run_manifest)
        doc = json.loads(rm.read_text()) if rm.exists() else {"tool_version": __version__, "stages": {}}
        doc["stages"][command] = entry
        rm.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return entry


def _window(args) -> ObservationWindow | None:
    if (args.t0 is None) != (args.delta_t is None):
        raise UsageError("--t0 and --delta-t must be given together")
    if args.t0 is None:
        return None
    if args.delta_t <= 0:
        raise UsageError("--delta-t must be > 0")
    return ObservationWindow(args.t0, args.delta_t)


# ---------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    src = Path(args.input)
    if not src.is_dir():
        raise UsageError(f"--input {src} is not a directory")
    if args.gap_s <= 0 or args.jump_tiles < 1:
        raise UsageError("--gap-s must be > 0 and --jump-tiles >= 1")
    window = _window(args)
    start = time.perf_counter()
    counters: Counter = Counter()
    records = read_tdrive_dir(src, counters)
    kept = window_filter(records, window)
    trajs = segment(kept, args.gap_s, args.jump_tiles)
    paths = [to_tile_path(t) for t in trajs]
    tmp = Path(args.out + ".partial")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        n_lines = write_dump(paths, fh)
    os.replace(tmp, args.out)
    if not paths:
        log.warning("no trajectories survived windowing and segmentation; dump is empty")
    stats = {"parsed": counters["parsed"], "skipped": counters["skipped"],
             "in_window": len(kept), "segments": len(trajs), "visits": n_lines}
    print(" ".join(f"{k}={v}" for k, v in stats.items()))
    write_run_manifest(args, "ingest", {"input": src}, [args.out], time.perf_counter() - start,
                       {"counters": stats})
    return EXIT_OK


def _job(args, output: str) -> JobConfig:
    cfg = JobConfig(input=args.traj, output=output, r=args.r, tau_s=args.tau_s, h_max=args.h_max,
                    workers=args.workers, t0=args.t0, delta_t=args.delta_t,
                    checkpoint_dir=getattr(args, "checkpoint_dir", None))
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if not Path(args.traj).exists():
        raise UsageError(f"--traj {args.traj} does not exist")
    return cfg


def cmd_summarize(args) -> int:
    cfg = _job(args, args.out)
    res = run_stage1(cfg)
    m = res.manifest
    print(f"events={m['n_events']} tiles={m['n_tiles']} wall_s={res.wall_s:.3f}")
    write_run_manifest(args, "summarize", {"traj": args.traj}, [args.out], res.wall_s,
                       {"n_events": m["n_events"], "n_tiles": m["n_tiles"],
                        "worker_events": res.worker_events})
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        counts = sorted({int(w) for w in args.workers_list.split(",")})
    except ValueError as exc:
        raise UsageError(f"--workers must be a comma list of integers: {exc}") from exc
    if 1 not in counts or min(counts) < 1:
        raise UsageError("--workers must include 1 and only positive counts")
    args.workers = 1
    cfg = _job(args, str(Path(args.out).with_suffix(".rsum")))
    arrays = TrajArrays.from_paths(load_paths(cfg))
    start = time.perf_counter()
    report = bench_strong_scaling(cfg, counts, arrays, repeats=args.repeats)
    report.write_csv(args.out)
    for r in report.rows:
        print(f"workers={r.workers} wall_s={r.wall_s:.3f} speedup={r.speedup:.3f} "
              f"efficiency={r.efficiency:.3f} events_per_s={r.events_per_s:.0f}")
    write_run_manifest(args, "bench", {"traj": args.traj}, [args.out], time.perf_counter() - start,
                       {"archive_sha256": report.rows[0].sha256, "n_events": report.n_events})
    return EXIT_OK


def cmd_train(args) -> int:
    arc = rsum.read_archive(args.archive)
    if len(arc) == 0:
        raise UsageError("archive holds no summaries")
    cfg_kw = dict(d_r=args.d_r, r=arc.r, lambda_c=args.lambda_c, lr=args.lr, momentum=args.momentum,
                  batch_size=args.batch_size, epochs=args.epochs, seed=args.seed)
    try:
        cfg = cae.CaeConfig(**cfg_kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.epochs < 1 or args.batch_size < 1 or args.lr <= 0:
        raise UsageError("--epochs, --batch-size must be >= 1 and --lr > 0")
    start = time.perf_counter()
    model = cae.train(arc.tensors, cfg, arc.quadkeys)
    cae.save_model(model, args.out)
    log_path = args.log or args.out + ".log.csv"
    cae.write_log_csv(model, log_path)
    last = model.log[-1]
    print(f"epochs={cfg.epochs} recon_mse={last.recon_mse:.6g} contractive={last.contractive:.6g}")
    write_run_manifest(args, "train", {"archive": args.archive}, [args.out, log_path],
                       time.perf_counter() - start)
    return EXIT_OK


def write_embeddings(embs, path: str, d_r: int) -> None:
    tmp = Path(path + ".partial")
    with open(tmp, "w") as fh:
        fh.write("quadkey," + ",".join(f"e{i}" for i in range(d_r)) + "\n")
        for e in embs:
            fh.write(e.quadkey + "," + ",".join(repr(float(v)) for v in e.values) + "\n")
    os.replace(tmp, path)


def read_embeddings(path: str) -> list[cae.EmbeddingVector]:
    out = []
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split(",")
        d = len(header) - 1
        for lineno, line in enumerate(fh, 2):
            parts = line.rstrip("\n").split(",")
            if len(parts) != d + 1:
                raise cae.ArtifactMismatchError("d_r", d, len(parts) - 1)
            out.append(cae.EmbeddingVector(parts[0], np.array([float(v) for v in parts[1:]], dtype=np.float32)))
    return out


def cmd_embed(args) -> int:
    model = cae.load_model(args.model)
    arc = rsum.read_archive(args.archive)
    start = time.perf_counter()
    embs = cae.embed(model, arc, args.d_r)
    write_embeddings(embs, args.out, model.cfg.d_r)
    print(f"tiles={len(embs)} d_r={model.cfg.d_r}")
    write_run_manifest(args, "embed", {"model": args.model, "archive": args.archive}, [args.out],
                       time.perf_counter() - start)
    return EXIT_OK


def _parse_bbox(text: str) -> store.TileRect:
    try:
        x0, y0, w, h = (int(v) for v in text.split(","))
        return store.TileRect(x0, y0, w, h)
    except ValueError as exc:
        raise UsageError(f"--bbox must be x0,y0,width,height: {exc}") from exc


def cmd_export(args) -> int:
    embs = read_embeddings(args.embeddings)
    if args.bbox:
        bbox = _parse_bbox(args.bbox)
    elif embs:
        bbox = store.TileRect.around([e.tile for e in embs])
    else:
        raise UsageError("no embeddings and no --bbox")
    start = time.perf_counter()
    manifest = {"embeddings_sha256": file_sha256(args.embeddings)}
    if args.model:
        model = cae.load_model(args.model)
        if embs and model.cfg.d_r != len(embs[0].values):
            raise cae.ArtifactMismatchError("d_r", model.cfg.d_r, len(embs[0].values))
        manifest.update(model_sha256=cae.model_sha256(args.model), r=model.cfg.r)
    if args.archive:
        arc_manifest = rsum.read_archive(args.archive).manifest
        manifest.update(maxima=arc_manifest["maxima"], t0=arc_manifest.get("t0", ""),
                        delta_t=arc_manifest.get("delta_t", ""))
        if "r" in manifest and str(manifest["r"]) != arc_manifest["r"]:
            raise cae.ArtifactMismatchError("r", manifest["r"], arc_manifest["r"])
        manifest["r"] = arc_manifest["r"]
    raster = store.rasterize(embs, bbox, None if embs else args.d_r, manifest)
    store.export_raster(raster, args.out)
    print(f"raster={raster.height}x{raster.width}x{raster.d_r} outside={raster.n_outside}")
    inputs = {"embeddings": args.embeddings}
    write_run_manifest(args, "export", inputs, [args.out], time.perf_counter() - start,
                       {"n_outside": raster.n_outside})
    return EXIT_OK


def cmd_project(args) -> int:
    embs = read_embeddings(args.embeddings)
    try:
        proj = store.project_2d(embs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    start = time.perf_counter()
    proj.write_csv(args.out)
    print(f"points={len(proj.quadkeys)} var_pc1={proj.variances[0]:.6g} var_pc2={proj.variances[1]:.6g}")
    write_run_manifest(args, "project", {"embeddings": args.embeddings}, [args.out],
                       time.perf_counter() - start)
    return EXIT_OK


# ---------------------------------------------------------------------------

def _stage1_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--traj", required=True, help="normalized trajectory dump from `ingest`")
    p.add_argument("--r", type=int, default=12, help="neighbourhood radius in tiles")
    p.add_argument("--tau-s", type=int, default=600)
    p.add_argument("--h-max", type=int, default=16)
    p.add_argument("--t0", type=int)
    p.add_argument("--delta-t", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reachgrid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--run-manifest", help="JSON file collecting every stage's manifest entry")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse T-Drive logs into a trajectory dump")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gap-s", type=int, default=DEFAULT_GAP_S)
    p.add_argument("--jump-tiles", type=int, default=DEFAULT_JUMP_TILES)
    p.add_argument("--t0", type=int)
    p.add_argument("--delta-t", type=int)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("summarize", help="stage 1: build the RSUM1 summary archive")
    _stage1_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--checkpoint-dir")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("bench", help="strong-scaling benchmark of stage 1")
    _stage1_flags(p)
    p.add_argument("--out", required=True, help="scaling report CSV")
    p.add_argument("--workers", dest="workers_list", default="1,2,4")
    p.add_argument("--repeats", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train", help="stage 2: train the contractive autoencoder")
    p.add_argument("--archive", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="training log CSV (default: <out>.log.csv)")
    p.add_argument("--d-r", type=int, default=16)
    p.add_argument("--lambda-c", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="encode every summary of an archive")
    p.add_argument("--model", required=True)
    p.add_argument("--archive", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--d-r", type=int, help="fail unless the model has this dimension")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("export", help="write embeddings as an ERAS1 raster")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bbox", help="x0,y0,width,height in tiles (default: tight box)")
    p.add_argument("--model", help="model file, recorded in the raster manifest")
    p.add_argument("--archive", help="summary archive, recorded in the raster manifest")
    p.add_argument("--d-r", type=int, default=16, help="dimension for an empty raster")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("project", help="PCA projection of embeddings to 2-D")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "workers", 0) is None:
            args.workers = _default_workers()
        return args.func(args)
    except UsageError as exc:
        print(f"reachgrid {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except cae.ArtifactMismatchError as exc:
        print(f"reachgrid {args.command}: incompatible artifacts: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (rsum.ArchiveFormatError, FileNotFoundError) as exc:
        print(f"reachgrid {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"reachgrid {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
