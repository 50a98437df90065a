"""IMB training on the desk model, then cost vs IoU for view-reduction methods.

Needs the desk checkpoint from desk_experiment.py (trained on demand otherwise).
"""

import argparse

import numpy as np
from threadpoolctl import threadpool_limits

from garnet import experiments as X
from garnet.view_reduction import tradeoff_curve


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--budgets", default="", help="comma separated MAC budgets; default spans the random/imb_fps costs")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    setup = X.ReductionSetup()
    with threadpool_limits(args.threads):
        run = X.desk_training(log=print)
        study = X.reduction_study(run, setup, log=print)
        print("stress per epoch:", " ".join(f"{s:.2f}" for s in study["stress"]))
        for n in setup.ns:
            a, b = (np.array(study["ious"][(m, n)]) for m in ("imb_fps", "random"))
            wins = int(np.sum(a > b)), int(np.sum(a < b))
            print(f"n={n}: imb_fps {a.mean():.4f}  random {b.mean():.4f}  (imb better on {wins[0]}, worse on {wins[1]} objects)")
        cost = study["cost"]
        if args.budgets:
            budgets = [float(b) for b in args.budgets.split(",")]
        else:
            lo, hi = cost.total_cost(setup.big_n, 1, "random"), cost.total_cost(setup.big_n, setup.big_n, "imb_fps")
            budgets = list(np.geomspace(lo, hi, 8))
        _, test = X.desk_samples()
        recs = tradeoff_curve(study["model"], test, setup.big_n, budgets, ("imb_fps", "random"), setup.seed)
    print("budget MACs, method, n, mean IoU, mean F-score")
    for r in recs:
        print(r.line())


if __name__ == "__main__":
    main()
