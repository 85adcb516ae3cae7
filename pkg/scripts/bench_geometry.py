"""Per-query cost of exact mesh distance vs network inference over icosphere refinements."""

import argparse
from pathlib import Path

from inrsbm.bench import HEADER, bench_geometry
from inrsbm.inr import Mlp
from inrsbm.io import write_table


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--subdivisions", type=int, nargs="+", default=[2, 3, 4])
    ap.add_argument("--queries", type=int, default=2000)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--out", default="runs/bench")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mlp = Mlp.geometric_init(3, (64, 64, 64, 64), seed=0)
    rows = bench_geometry(args.subdivisions, args.queries, args.repeats, mlp)
    write_table(out / "bench.csv", HEADER, rows)
    for r in rows:
        print("  ".join(f"{h}={v:.4g}" if isinstance(v, float) else f"{h}={v}"
                        for h, v in zip(HEADER, r)))


if __name__ == "__main__":
    main()
