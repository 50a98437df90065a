"""Train the desk model on 200 synthetic objects and report the view-count trend.

Results land in the experiment cache (``$GARNET_CACHE`` or ./artifacts) and
are reused by the acceptance suite.
"""

import argparse

from threadpoolctl import threadpool_limits

from garnet import experiments as X


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=X.DESK_TRAIN.epochs)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    cfg = X.scaled_train_config(args.epochs, **{k: getattr(X.DESK_TRAIN, k) for k in ("batch_size", "base_lr", "seed")})
    with threadpool_limits(args.threads):
        run = X.desk_training(cfg, log=print)
        m = X.desk_metrics(run)
    print(f"cache: {run.directory}")
    print(f"training time: {run.train_seconds / 60:.1f} min for {cfg.epochs} epochs")
    for k, v in m.items():
        print(f"{k}: {v:.4f}")


if __name__ == "__main__":
    main()
