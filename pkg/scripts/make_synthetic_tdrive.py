"""Write a synthetic T-Drive-format log directory (one ``<taxi>.txt`` per taxi)."""
import argparse

from reachgrid.synthetic import CityConfig, write_tdrive_dir


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out_dir")
    ap.add_argument("--records", type=int, default=1_000_000)
    ap.add_argument("--taxis", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--streets", type=int, default=CityConfig.n_streets,
                    help="streets per axis of the synthetic grid city")
    args = ap.parse_args()
    out = write_tdrive_dir(args.out_dir, args.records, n_taxis=args.taxis, seed=args.seed,
                           cfg=CityConfig(n_streets=args.streets))
    print(f"wrote {args.records} records for {args.taxis} taxis to {out}")


if __name__ == "__main__":
    main()
