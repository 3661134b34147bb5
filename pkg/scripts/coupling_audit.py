"""Extraction ledger and (E3) domination on a tower model, with the fitted K1."""
import argparse

import numpy as np

from towerlab import coupling as cp
from towerlab import tower as tw
from towerlab.tower import DensityVector


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", choices=["bundled", "power"], default="bundled")
    ap.add_argument("--branches", type=int, default=8)
    ap.add_argument("--zeta", type=float, default=3.0)
    ap.add_argument("--i-max", type=int, default=8)
    ap.add_argument("--horizon", type=int, default=120)
    ap.add_argument("--tv-horizon", type=int, default=400)
    ap.add_argument("--out", default=".")
    args = ap.parse_args()
    model = tw.bundled_model() if args.model == "bundled" else tw.power_law_model(args.branches, args.zeta)
    n0, gamma0 = tw.find_n0_gamma0(model)
    lam, nu = DensityVector.ground(model), tw.invariant_density(model)
    res = cp.run_extraction(model, lam, nu, n0, i_max=args.i_max, horizon=args.horizon, tv_horizon=args.tv_horizon)
    for h in res.history:
        print(f"depth {h.depth}: cells {h.n_cells} sup ratio {h.sup_ratio:.3f} residual {h.residual_mass:.3e}")
    print(f"n0={n0} gamma0={gamma0:.3f} eps1={res.eps1:.3f} K1_fit={res.K1_fit:.3g} "
          f"ledger defect {res.ledger_defect:.1e} dominated {bool(np.all(res.dominated))}")
    cp.write_e3_csv(f"{args.out}/e3_check.csv", res)
    cp.write_extraction_csv(f"{args.out}/extraction.csv", res)


if __name__ == "__main__":
    main()
