"""Regenerate the golden fixture used by the CLI tests.

Writes tests/data/tiny_dump.tsv (a handful of random tile paths) and prints
the sha256 of the RSUM1 archive built from it *by the brute-force oracle*,
independently of the vectorised kernel and the parallel pipeline.
"""
import argparse
import hashlib
import random
import sys
import tempfile
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

from conftest import random_paths  # noqa: E402
from oracles import brute_force_summaries  # noqa: E402

from reachgrid import archive  # noqa: E402
from reachgrid.pipeline import arrays_digest  # noqa: E402
from reachgrid.summary import ReachabilitySummary, SparseAccumulator, TrajArrays, global_maxima  # noqa: E402
from reachgrid.tilegrid import TileId  # noqa: E402
from reachgrid.trajectory import read_dump, write_dump  # noqa: E402

R, TAU, H = 3, 600, 3


def oracle_archive(paths, out):
    table = brute_force_summaries(paths, R, TAU, H)
    sums = {}
    n_events = 0
    for (x, y), cells in table.items():
        s = ReachabilitySummary(TileId(x, y), R)
        for (d, dx, dy), (c, mm, sec) in cells.items():
            i, j = dy + R, dx + R
            s.count[i, j, d] += c
            s.sum_mm[i, j, d] += mm
            s.sum_s[i, j, d] += sec
            if d == 0:
                n_events += c
        sums[s.center] = s
    acc = SparseAccumulator.from_summaries(sums, R)
    acc.n_events = n_events
    arr = TrajArrays.from_paths(sorted(paths, key=lambda p: p.trajectory_id))
    archive.write_archive(out, acc,
                          {"tau_s": TAU, "h_max": H, "t0": "", "delta_t": "",
                           "n_paths": arr.n_paths, "n_visits": arr.n_visits,
                           "input_sha256": arrays_digest(arr)},
                          global_maxima(sums.values()))
    return hashlib.sha256(Path(out).read_bytes()).hexdigest()


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(ROOT / "tests" / "data" / "tiny_dump.tsv"))
    ap.add_argument("--seed", type=int, default=20080202)
    args = ap.parse_args()
    paths = random_paths(random.Random(args.seed), n_paths=6, grid=12, max_len=15,
                         origin=(13_810_000, 6_350_000))
    with open(args.out, "w", newline="\n") as fh:
        write_dump(paths, fh)
    with open(args.out) as fh:
        paths = read_dump(fh)
    with tempfile.TemporaryDirectory() as d:
        print(oracle_archive(paths, Path(d) / "golden.rsum"))


if __name__ == "__main__":
    main()
