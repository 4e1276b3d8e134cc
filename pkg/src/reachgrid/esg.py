"""Earth Surface Graph: observed tiles as nodes, observed consecutive tile
transitions as weighted edges, and the Markov chain they induce."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .tilegrid import TileId, quadkey_to_tile, tile_to_quadkey
from .trajectory import TilePath

DEFAULT_NNZ_CAP = 50_000_000


class NonzeroBudgetError(RuntimeError):
    pass


@dataclass
class Esg:
    nodes: set[TileId] = field(default_factory=set)
    edges: Counter = field(default_factory=Counter)

    def out_degree(self, u: TileId) -> int:
        return self._out_degree().get(u, 0)

    def _out_degree(self) -> dict[TileId, int]:
        cache = getattr(self, "_deg_cache", None)
        if cache is None or cache[0] != len(self.edges):
            deg: Counter = Counter()
            for (u, _v) in self.edges:
                deg[u] += 1
            cache = (len(self.edges), dict(deg))
            self._deg_cache = cache
        return cache[1]

    def merge(self, other: "Esg") -> "Esg":
        """Commutative, associative combination of partial graphs."""
        out = Esg(self.nodes | other.nodes, self.edges + other.edges)
        return out


def _tiles_of(path) -> Sequence[TileId]:
    if isinstance(path, TilePath):
        return path.tiles
    return [p.tile if hasattr(p, "tile") else p for p in path]


def build_esg(paths: Iterable) -> Esg:
    """Count consecutive visit pairs over all paths.

    ``paths`` may hold :class:`TilePath` objects or plain tile sequences.
    """
    g = Esg()
    for path in paths:
        tiles = _tiles_of(path)
        g.nodes.update(tiles)
        for u, v in zip(tiles, tiles[1:]):
            if u != v:
                g.edges[(u, v)] += 1
    return g


@dataclass
class TransitionMatrixView:
    nodes: list[TileId]
    index: dict[TileId, int]
    P: sp.csr_matrix

    def prob(self, u: TileId, v: TileId) -> float:
        return float(self.P[self.index[u], self.index[v]])


def transition_matrix(g: Esg) -> TransitionMatrixView:
    """Row-normalised counts; nodes without out-edges absorb into themselves."""
    if not g.nodes:
        raise ValueError("transition matrix of an empty graph")
    nodes = sorted(g.nodes)
    index = {t: i for i, t in enumerate(nodes)}
    n = len(nodes)
    items = sorted(((index[u], index[v], c) for (u, v), c in g.edges.items()))
    rows = np.fromiter((i for i, _, _ in items), dtype=np.int64, count=len(items))
    cols = np.fromiter((j for _, j, _ in items), dtype=np.int64, count=len(items))
    counts = np.fromiter((c for _, _, c in items), dtype=np.int64, count=len(items))
    totals = np.bincount(rows, weights=counts, minlength=n)
    dangling = np.flatnonzero(totals == 0)
    rows = np.concatenate([rows, dangling])
    cols = np.concatenate([cols, dangling])
    vals = np.concatenate([counts / totals[rows[: len(counts)]], np.ones(len(dangling))])
    P = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    P.sort_indices()
    return TransitionMatrixView(nodes, index, P)


def n_step(view: TransitionMatrixView, n: int, nnz_cap: int = DEFAULT_NNZ_CAP) -> sp.csr_matrix:
    """P**n by repeated sparse multiplication."""
    if n < 1:
        raise ValueError("n must be >= 1")
    P = view.P
    out = P.copy()
    for _ in range(n - 1):
        out = out @ P
        if out.nnz > nnz_cap:
            raise NonzeroBudgetError(f"P^n exceeded the nonzero cap of {nnz_cap}")
    return out.tocsr()


def dump_esg(g: Esg, fh) -> None:
    lines = sorted(f"{tile_to_quadkey(u)}\t{tile_to_quadkey(v)}\t{c}" for (u, v), c in g.edges.items())
    for line in lines:
        fh.write(line + "\n")


def load_esg(fh) -> Esg:
    g = Esg()
    for line in fh:
        line = line.strip()
        if not line:
            continue
        uq, vq, c = line.split("\t")
        u, v = quadkey_to_tile(uq), quadkey_to_tile(vq)
        g.nodes.update((u, v))
        g.edges[(u, v)] += int(c)
    return g
