"""Full pipeline on a synthetic log: ingest, summarize, train, embed, export, project.

Also trains a lambda_c = 0 twin and prints the held-out Jacobian-norm and
perturbation-sensitivity comparison between the two encoders.
"""
import argparse
import sys
from pathlib import Path

import numpy as np

from reachgrid import archive
from reachgrid.cae import jacobian_norms, load_model, perturbation_sensitivity, split_indices
from reachgrid.cli import main as cli
from reachgrid.synthetic import write_tdrive_dir


def run(*argv):
    rc = cli(list(map(str, argv)))
    if rc:
        sys.exit(rc)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", default="runs/pipeline")
    ap.add_argument("--records", type=int, default=100_000)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--r", type=int, default=12)
    ap.add_argument("--d-r", type=int, default=16)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--max-tiles", type=int, default=2000, help="training corpus size")
    args = ap.parse_args()

    w = Path(args.workdir)
    raw = w / "raw"
    if not raw.is_dir():
        write_tdrive_dir(raw, args.records, seed=0)
    rm = ["--run-manifest", w / "run.json"]
    run(*rm, "ingest", "--input", raw, "--out", w / "traj.tsv")
    run(*rm, "summarize", "--traj", w / "traj.tsv", "--out", w / "full.rsum", "--r", args.r,
        "--workers", args.workers)

    # subsample a training corpus so the numpy autoencoder stays desk-sized
    full = archive.read_archive(w / "full.rsum")
    pick = np.linspace(0, len(full) - 1, min(args.max_tiles, len(full))).astype(int)
    sub = archive.Archive(full.manifest, [full.quadkeys[i] for i in pick], full.tensors[pick])
    corpus = w / "corpus.rsum"
    _write_subset(sub, corpus)

    models = {}
    for lam in (0.1, 0.0):
        out = w / f"cae_l{lam}.cae"
        run(*rm, "train", "--archive", corpus, "--out", out, "--d-r", args.d_r,
            "--lambda-c", lam, "--epochs", args.epochs)
        models[lam] = load_model(out)
    run(*rm, "embed", "--model", w / "cae_l0.1.cae", "--archive", corpus, "--out", w / "emb.csv")
    run(*rm, "export", "--embeddings", w / "emb.csv", "--out", w / "emb.eras",
        "--model", w / "cae_l0.1.cae", "--archive", corpus)
    run(*rm, "project", "--embeddings", w / "emb.csv", "--out", w / "proj.csv")

    _, val = split_indices(sub.quadkeys)
    held = sub.tensors[val]
    print(f"held-out summaries: {len(val)}")
    for lam, m in models.items():
        print(f"lambda_c={lam}: jacobian_norm={jacobian_norms(m, held, probes=16).mean():.4f} "
              f"sensitivity={perturbation_sensitivity(m, held):.4f}")


def _write_subset(sub, path):
    """Rewrite a tile subset as an RSUM1 file, keeping the source normalisation."""
    keep = {k: v for k, v in sub.manifest.items() if k not in ("n_tiles",)}
    rec = archive.record_dtype(sub.r)
    body = np.empty(len(sub), dtype=rec)
    body["quadkey"] = [q.encode() for q in sub.quadkeys]
    body["tensor"] = sub.tensors
    with open(path, "wb") as fh:
        archive.write_manifest(fh, archive.MAGIC, {**keep, "n_tiles": len(sub), "subset_of": "full.rsum"})
        fh.write(body.tobytes())


if __name__ == "__main__":
    main()
