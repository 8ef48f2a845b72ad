"""Model selection and decoding accuracy on the planted three-state corpus."""
import argparse

from lcnet.experiments import planted_selection


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--events", type=int, default=200)
    ap.add_argument("--k-max", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    res = planted_selection(args.events, k_range=range(2, args.k_max + 1), seed=args.seed)
    for k, ll in res["curve"]:
        print(f"K={k:2d}  log-likelihood {ll:.1f}")
    print(f"selected K = {res['k_best']}, decoded accuracy {res['accuracy']:.3f}, {res['seconds']:.0f} s")


if __name__ == "__main__":
    main()
