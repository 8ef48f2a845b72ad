"""Whole pipeline on the MLC-like and DLC-like synthetic presets, then the comparison report."""
import argparse
import json

from lcnet.experiments import mlc_vs_dlc


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--events", type=int, default=200)
    ap.add_argument("--k-max", type=int, default=8)
    ap.add_argument("--B", type=int, default=100)
    ap.add_argument("--restarts", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workdir", help="keep all stage outputs here")
    args = ap.parse_args()
    rep = mlc_vs_dlc(args.events, range(2, args.k_max + 1), args.B, args.restarts, args.seed, args.workdir)
    print(json.dumps({k: rep[k] for k in ("a", "b", "checks")}, indent=1, sort_keys=True))
    print(f"{rep['seconds']:.0f} s")


if __name__ == "__main__":
    main()
