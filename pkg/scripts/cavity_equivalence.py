"""Lid-driven cavity with a circular obstacle: trained network vs analytic field."""

import argparse
import json
from pathlib import Path

from inrsbm.experiments import oracle_equivalence, train_circle_model
from inrsbm.inr import Mlp
from inrsbm.io import write_table


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", help="trained circle network; trained here when omitted")
    ap.add_argument("--train-steps", type=int, default=3000)
    ap.add_argument("--Re", type=float, nargs="+", default=[100.0, 400.0])
    ap.add_argument("--level", type=int, default=6)
    ap.add_argument("--dt", type=float, default=0.5)
    ap.add_argument("--max-steps", type=int, default=400)
    ap.add_argument("--out", default="runs/cavity")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.model:
        mlp = Mlp.load(args.model)
    else:
        mlp = train_circle_model(args.train_steps).mlp
        mlp.save(out / "circle.inr")
    report = {}
    for Re in args.Re:
        disc, ref, inr = oracle_equivalence(mlp, Re, args.level, args.dt, args.max_steps)
        report[f"Re{Re:g}"] = dict(disc, steady_ref=ref["steady"], steady_inr=inr["steady"],
                                   divergence_ref=ref["divergence"],
                                   divergence_inr=inr["divergence"])
        for name, run in (("analytic", ref), ("network", inr)):
            for line, arr in run["profiles"].items():
                write_table(out / f"Re{Re:g}_{name}_{line}.csv", ["s", "x", "y", "u", "v", "p"],
                            arr.tolist())
    (out / "equivalence.json").write_text(json.dumps(report, indent=2) + "\n")
    print(json.dumps(report, indent=2))


if __name__ == "__main__":
    main()
