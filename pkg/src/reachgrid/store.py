"""Embedding rasters (ERAS1 files) and 2-D projections of embeddings."""
from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .archive import ArchiveFormatError, read_manifest, write_manifest
from .cae import EmbeddingVector
from .tilegrid import TileId

MAGIC = "ERAS1"


@dataclass(frozen=True)
class TileRect:
    """Tiles ``x0 <= x < x0 + width``, ``y0 <= y < y0 + height``."""

    x0: int
    y0: int
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("bounding box must be non-empty")

    def contains(self, t: TileId) -> bool:
        return self.x0 <= t.x < self.x0 + self.width and self.y0 <= t.y < self.y0 + self.height

    @classmethod
    def around(cls, tiles: Sequence[TileId]) -> "TileRect":
        xs = [t.x for t in tiles]
        ys = [t.y for t in tiles]
        return cls(min(xs), min(ys), max(xs) - min(xs) + 1, max(ys) - min(ys) + 1)


@dataclass
class EmbeddingRaster:
    origin: TileId
    width: int
    height: int
    d_r: int
    data: np.ndarray  # (height, width, d_r) float32; row i, col j is tile (origin.x + j, origin.y + i)
    manifest: dict = field(default_factory=dict)
    n_outside: int = 0
    fill: float = 0.0

    def at(self, t: TileId) -> np.ndarray:
        return self.data[t.y - self.origin.y, t.x - self.origin.x]

    def __eq__(self, other):
        if not isinstance(other, EmbeddingRaster):
            return NotImplemented
        return (self.origin == other.origin and self.width == other.width
                and self.height == other.height and self.d_r == other.d_r
                and self.data.tobytes() == other.data.tobytes()
                and {k: str(v) for k, v in self.manifest.items()}
                == {k: str(v) for k, v in other.manifest.items()})


def rasterize(embeddings: Sequence[EmbeddingVector], bbox: TileRect, d_r: int | None = None,
              manifest: dict | None = None) -> EmbeddingRaster:
    """Dense zero-filled raster over ``bbox``; embeddings outside it are counted and dropped."""
    dims = {len(e.values) for e in embeddings}
    if d_r is not None:
        dims.add(d_r)
    if len(dims) > 1:
        raise ValueError(f"d_r: embeddings disagree on dimension {sorted(dims)}")
    if not dims:
        raise ValueError("d_r: unknown for an empty embedding list")
    (dim,) = dims
    data = np.zeros((bbox.height, bbox.width, dim), dtype=np.float32)
    outside = 0
    for e in embeddings:
        t = e.tile
        if not bbox.contains(t):
            outside += 1
            continue
        data[t.y - bbox.y0, t.x - bbox.x0] = e.values
    return EmbeddingRaster(TileId(bbox.x0, bbox.y0), bbox.width, bbox.height, dim, data,
                           dict(manifest or {}), outside)


def export_raster(raster: EmbeddingRaster, path: str | os.PathLike) -> None:
    header = {"format": MAGIC, "origin_x": raster.origin.x, "origin_y": raster.origin.y,
              "width": raster.width, "height": raster.height, "d_r": raster.d_r}
    for k, v in raster.manifest.items():
        if k in header:
            raise ValueError(f"manifest key {k!r} is reserved")
        header[k] = v
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    with open(tmp, "wb") as fh:
        write_manifest(fh, MAGIC, header)
        fh.write(np.ascontiguousarray(raster.data, dtype="<f4").tobytes())
    os.replace(tmp, path)


def import_raster(path: str | os.PathLike) -> EmbeddingRaster:
    with open(path, "rb") as fh:
        header = read_manifest(fh, MAGIC)
        body = fh.read()
    dims = {}
    for k in ("origin_x", "origin_y", "width", "height", "d_r"):
        try:
            dims[k] = int(header.pop(k))
        except (KeyError, ValueError) as exc:
            raise ArchiveFormatError(f"{k}: missing or not an integer") from exc
    header.pop("format", None)
    h, w, d = dims["height"], dims["width"], dims["d_r"]
    if len(body) != h * w * d * 4:
        found = len(body) // 4
        if h * w and found % (h * w) == 0:
            raise ArchiveFormatError(f"d_r: manifest says {d}, body holds {found // (h * w)} floats per pixel")
        raise ArchiveFormatError(f"shape: manifest says {h}x{w}x{d} floats, body holds {len(body)} bytes")
    data = np.frombuffer(body, dtype="<f4").reshape(h, w, d).astype(np.float32)
    return EmbeddingRaster(TileId(dims["origin_x"], dims["origin_y"]), w, h, d, data, header)


# ---------------------------------------------------------------------------
# projection

def _top_eigvec(c: np.ndarray, tol: float = 1e-14, max_iter: int = 100_000) -> tuple[np.ndarray, float]:
    """Dominant eigenpair of a symmetric PSD matrix by power iteration from a fixed start."""
    d = len(c)
    v = np.ones(d) / np.sqrt(d) + np.arange(d) * 1e-3
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = c @ v
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return v, 0.0
        w /= nrm
        new_lam = float(w @ c @ w)
        if np.linalg.norm(w - v) < tol or abs(new_lam - lam) <= tol * max(1.0, abs(new_lam)):
            v, lam = w, new_lam
            break
        v, lam = w, new_lam
    # fixed sign: largest-magnitude component positive
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    return v, lam


@dataclass
class Projection:
    quadkeys: list[str]
    coords: np.ndarray  # (n, 2)
    variances: tuple[float, float]
    total_variance: float

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            fh.write("quadkey,pc1,pc2\n")
            for q, (a, b) in zip(self.quadkeys, self.coords):
                fh.write(f"{q},{float(a)!r},{float(b)!r}\n")


def project_2d(embeddings: Sequence[EmbeddingVector]) -> Projection:
    """Top-2 principal components via power iteration with deflation, sorted by quadkey."""
    if len(embeddings) < 2:
        raise ValueError("need at least 2 embeddings to project")
    ordered = sorted(embeddings, key=lambda e: e.quadkey)
    x = np.array([np.asarray(e.values, dtype=np.float64) for e in ordered])
    x = x - x.mean(axis=0)
    cov = x.T @ x / (len(x) - 1)
    total = float(np.trace(cov))
    if total <= 0:
        warnings.warn("all embeddings identical; projection is zero", RuntimeWarning, stacklevel=2)
        return Projection([e.quadkey for e in ordered], np.zeros((len(x), 2)), (0.0, 0.0), 0.0)
    v1, l1 = _top_eigvec(cov)
    deflated = cov - l1 * np.outer(v1, v1)
    v2, l2 = _top_eigvec(deflated)
    if l2 <= 1e-12 * l1:
        coords = np.stack([x @ v1, np.zeros(len(x))], axis=1)
        l2 = max(l2, 0.0)
    else:
        coords = np.stack([x @ v1, x @ v2], axis=1)
    return Projection([e.quadkey for e in ordered], coords, (l1, l2), total)
