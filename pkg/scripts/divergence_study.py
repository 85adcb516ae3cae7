"""Divergence norm of converged plain cavity runs under uniform refinement."""

import argparse

from inrsbm.experiments import plain_cavity_divergence


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--levels", type=int, nargs="+", default=[5, 6])
    ap.add_argument("--Re", type=float, default=100.0)
    args = ap.parse_args()
    for level, div in plain_cavity_divergence(tuple(args.levels), args.Re).items():
        print(f"level {level}: divergence norm {div:.4e}")


if __name__ == "__main__":
    main()
