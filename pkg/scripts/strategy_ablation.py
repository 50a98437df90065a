"""Dynamic vs faset vs pix2vox from one init on one object subset."""

import argparse

from threadpoolctl import threadpool_limits

from garnet import experiments as X


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--objects", type=int, default=X.AblationSetup.objects)
    ap.add_argument("--epochs", type=int, default=X.AblationSetup.epochs)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    setup = X.AblationSetup(objects=args.objects, epochs=args.epochs)
    with threadpool_limits(args.threads):
        rows = X.strategy_ablation(setup, log=print)
    print("strategy   probe loss before -> after   IoU@1   IoU@3   IoU@5")
    for r in rows:
        print(f"{r['strategy']:<10} {r['initial_loss']:>10.4f} -> {r['final_loss']:<10.4f} {r['iou_1']:.4f}  {r['iou_3']:.4f}  {r['iou_5']:.4f}")


if __name__ == "__main__":
    main()
