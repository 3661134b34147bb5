"""Birkhoff averages of the distance to the fixed point for gamma >= 1, per seed."""
import argparse

import numpy as np

from towerlab import solenoid as so
from towerlab._io import write_csv
from towerlab.circle_map import CircleMapParams


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--gamma", type=float, default=1.2)
    ap.add_argument("--checkpoints", default="10000,100000,1000000,10000000")
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--ensemble", type=int, default=1)
    ap.add_argument("--out", default="escape_seeds.csv")
    args = ap.parse_args()
    cps = [int(c) for c in args.checkpoints.split(",")]
    S = so.SolenoidParams(CircleMapParams(args.gamma))
    rows = []
    for seed in range(args.seeds):
        avg = so.escape_averages(S, cps, args.ensemble, seed).mean(axis=0)
        rows += [(seed, n, float(v)) for n, v in zip(cps, avg)]
        print(seed, np.round(avg, 4), "monotone" if np.all(np.diff(avg) < 0) else "not monotone", flush=True)
    write_csv(args.out, ["seed", "n", "average"], rows)


if __name__ == "__main__":
    main()
