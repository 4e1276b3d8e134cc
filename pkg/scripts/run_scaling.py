"""Strong-scaling run of stage 1 on a synthetic one-week log.

Generates (or reuses) a T-Drive-format directory, ingests it, then times
``summarize`` at each worker count and writes the scaling CSV. Archives must
be byte-identical across worker counts or the run aborts.
"""
import argparse
import os
import sys
from pathlib import Path

from reachgrid.cli import main as cli
from reachgrid.synthetic import write_tdrive_dir


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", default="runs/scaling")
    ap.add_argument("--records", type=int, default=1_000_000)
    ap.add_argument("--taxis", type=int, default=100)
    ap.add_argument("--workers", default="1,2,4")
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--r", type=int, default=12)
    args = ap.parse_args()

    work = Path(args.workdir)
    raw = work / "raw"
    if not raw.is_dir():
        write_tdrive_dir(raw, args.records, n_taxis=args.taxis, seed=0)
    dump = work / "traj.tsv"
    rc = cli(["--run-manifest", str(work / "run.json"), "ingest", "--input", str(raw), "--out", str(dump)])
    if rc:
        return rc
    cpus = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count()
    print(f"usable CPUs: {cpus}")
    return cli(["--run-manifest", str(work / "run.json"), "bench", "--traj", str(dump),
                "--out", str(work / "scaling.csv"), "--workers", args.workers,
                "--repeats", str(args.repeats), "--r", str(args.r)])


if __name__ == "__main__":
    sys.exit(main())
