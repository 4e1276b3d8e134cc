"""Slow, obviously-correct reference computations used to check the fast paths."""
from __future__ import annotations

import itertools
from collections import defaultdict

import numpy as np


def brute_force_summaries(paths, r, tau_s, h_max):
    """Plain nested loops over every visit pair of every path.

    Returns ``{(x, y): {(direction, dx, dy): [count, sum_mm, sum_s]}}`` where
    direction 0 is emission (pairs ending at the tile, offset of the source)
    and 1 absorption (pairs starting there, offset of the destination).
    """
    out = defaultdict(lambda: defaultdict(lambda: [0, 0, 0]))
    for path in paths:
        vs = path.visits
        for i in range(len(vs)):
            for j in range(len(vs)):
                k = j - i
                if not 1 <= k <= h_max:
                    continue
                a, b = vs[i], vs[j]
                dx = a.tile.x - b.tile.x
                dy = a.tile.y - b.tile.y
                if (dx, dy) == (0, 0) or max(abs(dx), abs(dy)) > r:
                    continue
                if b.timestamp - a.timestamp > tau_s:
                    continue
                mm = b.cum_mm - a.cum_mm
                s = b.timestamp - a.timestamp
                acc = out[(b.tile.x, b.tile.y)][(0, dx, dy)]
                acc[0] += 1; acc[1] += mm; acc[2] += s
                acc = out[(a.tile.x, a.tile.y)][(1, -dx, -dy)]
                acc[0] += 1; acc[1] += mm; acc[2] += s
    return {t: dict(v) for t, v in out.items()}


def summaries_as_table(summaries, r):
    """Convert ReachabilitySummary objects to the oracle's dict layout."""
    out = {}
    for t, s in summaries.items():
        cells = {}
        for i, j, d in zip(*np.nonzero(s.count)):
            cells[(int(d), int(j) - r, int(i) - r)] = [int(s.count[i, j, d]), int(s.sum_mm[i, j, d]),
                                                       int(s.sum_s[i, j, d])]
        out[(t.x, t.y)] = cells
    return out


def two_step_by_enumeration(nodes, edges):
    """P^2[u][w] = sum over v of P[u][v] * P[v][w], walking every 2-edge path.

    ``edges`` maps (u, v) -> count. Dangling nodes self-absorb.
    """
    out_total = defaultdict(int)
    for (u, _), c in edges.items():
        out_total[u] += c

    def p(u, v):
        if out_total[u] == 0:
            return 1.0 if u == v else 0.0
        return edges.get((u, v), 0) / out_total[u]

    result = {}
    for u, v, w in itertools.product(nodes, repeat=3):
        pr = p(u, v) * p(v, w)
        if pr:
            result[(u, w)] = result.get((u, w), 0.0) + pr
    return result
