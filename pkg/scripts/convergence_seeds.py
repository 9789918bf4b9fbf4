"""Convergence slope of the uniform estimators towards the exact one, over several data seeds."""
import argparse

import numpy as np

from innovest.experiment import run_convergence_check


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("model", choices=["ex1", "ex2"])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3])
    ap.add_argument("--h-ladder", type=float, nargs="+", default=[1.0, 0.5, 0.125, 0.03125])
    ap.add_argument("--T", type=float, default=10.0)
    args = ap.parse_args()

    slopes = []
    for seed in args.seeds:
        rep = run_convergence_check(args.model, args.h_ladder, seed=seed, T=args.T)
        per = "  ".join(f"{n} {s:.2f}" for n, s in rep.slopes.items())
        print(f"seed {seed}: slope {rep.slope:.3f}  ({per})")
        slopes.append(rep.slope)
    print(f"mean slope {np.mean(slopes):.3f}, sd {np.std(slopes, ddof=1) if len(slopes) > 1 else 0:.3f}")


if __name__ == "__main__":
    main()
