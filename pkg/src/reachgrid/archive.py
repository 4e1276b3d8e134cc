"""RSUM1 summary archives.

Layout: the ASCII line ``RSUM1``, then ``key=value`` manifest lines, then
``end``. After that, one record per tile in quadkey order: 24 quadkey bytes
followed by ``(2r+1) * (2r+1) * 6`` little-endian float32 values in
(row, column, channel) order.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .summary import CHANNELS, SparseAccumulator, dense_tensors
from .tilegrid import ZOOM, quadkey_to_tile, quadkeys_from_arrays
from .summary import morton_decode

MAGIC = "RSUM1"


class ArchiveFormatError(ValueError):
    pass


def format_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple, np.ndarray)):
        return ",".join(format_value(float(a) if isinstance(a, np.floating) else a) for a in v)
    return str(v)


def write_manifest(fh, magic: str, manifest: dict) -> None:
    lines = [magic]
    for k, v in manifest.items():
        text = format_value(v)
        if "\n" in text or "=" in k:
            raise ValueError(f"manifest entry {k!r} not representable")
        lines.append(f"{k}={text}")
    lines.append("end")
    fh.write(("\n".join(lines) + "\n").encode("ascii"))


def read_manifest(fh, magic: str) -> dict[str, str]:
    first = fh.readline()
    if first.rstrip(b"\n").decode("ascii", "replace") != magic:
        raise ArchiveFormatError(f"magic: expected {magic}, found {first[:16]!r}")
    manifest = {}
    while True:
        line = fh.readline()
        if not line:
            raise ArchiveFormatError("manifest: missing 'end' line")
        text = line.rstrip(b"\n").decode("ascii")
        if text == "end":
            return manifest
        k, sep, v = text.partition("=")
        if not sep:
            raise ArchiveFormatError(f"manifest: malformed line {text!r}")
        manifest[k] = v


def record_dtype(r: int) -> np.dtype:
    side = 2 * r + 1
    return np.dtype([("quadkey", f"S{ZOOM}"), ("tensor", "<f4", (side, side, 6))])


def _write_records(fh, acc: SparseAccumulator, maxima, scheme: str) -> None:
    rec = record_dtype(acc.r)
    for morton, tensors in dense_tensors(acc, maxima, scheme):
        x, y = morton_decode(morton)
        out = np.empty(len(morton), dtype=rec)
        out["quadkey"] = quadkeys_from_arrays(x, y)
        out["tensor"] = tensors
        fh.write(out.tobytes())


def write_block(path: str | os.PathLike, offset: int, acc: SparseAccumulator, maxima, scheme: str) -> None:
    """Write the records of ``acc`` into an existing file starting at byte ``offset``."""
    with open(path, "r+b") as fh:
        fh.seek(offset)
        _write_records(fh, acc, maxima, scheme)


def _n_tiles(acc: SparseAccumulator) -> int:
    m = acc.tile_morton()
    return int(np.count_nonzero(m[1:] != m[:-1]) + 1) if len(m) else 0


def write_archive(path: str | os.PathLike, acc: SparseAccumulator, manifest: dict,
                  maxima, scheme: str = "log1p-max", blocks: list[SparseAccumulator] | None = None,
                  pool=None) -> dict:
    """Finalize, normalise and write ``acc``. Returns the full manifest written.

    The file appears atomically: it is written beside ``path`` and renamed.
    With ``blocks`` (consecutive key ranges that concatenate to ``acc``) and an
    executor ``pool``, each block is rendered and written at its own byte
    offset by a pool worker. The bytes are the same either way.
    """
    path = Path(path)
    emitted, absorbed = acc.totals()
    full = {
        "format": MAGIC,
        "r": acc.r,
        "channels": CHANNELS,
        "scheme": scheme,
        "maxima": [float(m) for m in maxima],
        **manifest,
        "n_events": acc.n_events,
        "total_emission": emitted,
        "total_absorption": absorbed,
        "n_tiles": _n_tiles(acc),
    }
    tmp = path.with_name(path.name + ".partial")
    try:
        with open(tmp, "wb") as fh:
            write_manifest(fh, MAGIC, full)
            if pool is None or not blocks:
                _write_records(fh, acc, maxima, scheme)
            else:
                offset = fh.tell()
                fh.truncate(offset + full["n_tiles"] * record_dtype(acc.r).itemsize)
        if pool is not None and blocks:
            futs = []
            for b in blocks:
                futs.append(pool.submit(write_block, tmp, offset, b, maxima, scheme))
                offset += _n_tiles(b) * record_dtype(acc.r).itemsize
            for f in futs:
                f.result()
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    return full


@dataclass
class Archive:
    manifest: dict[str, str]
    quadkeys: list[str]
    tensors: np.ndarray  # (n, side, side, 6) float32

    @property
    def r(self) -> int:
        return int(self.manifest["r"])

    @property
    def maxima(self) -> list[float]:
        return [float(v) for v in self.manifest["maxima"].split(",")]

    def __len__(self):
        return len(self.quadkeys)

    def tiles(self):
        return [quadkey_to_tile(q) for q in self.quadkeys]

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return zip(self.quadkeys, self.tensors)


def read_archive(path: str | os.PathLike) -> Archive:
    with open(path, "rb") as fh:
        manifest = read_manifest(fh, MAGIC)
        try:
            r = int(manifest["r"])
            n = int(manifest["n_tiles"])
        except (KeyError, ValueError) as exc:
            raise ArchiveFormatError(f"manifest: bad or missing field {exc}") from exc
        rec = record_dtype(r)
        body = fh.read()
    if len(body) != n * rec.itemsize:
        raise ArchiveFormatError(
            f"n_tiles: manifest says {n} records of {rec.itemsize} bytes, body has {len(body)} bytes")
    data = np.frombuffer(body, dtype=rec)
    return Archive(manifest, [q.decode("ascii") for q in data["quadkey"]], np.array(data["tensor"]))
