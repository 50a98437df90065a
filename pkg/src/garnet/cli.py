"""Command line interface.

Exit codes: 0 success, 2 usage, 3 I/O, 4 non-finite loss, 5 verification failure.
Every command prints its resolved configuration first and writes its
outputs under ``--out`` (when the command has outputs).

Output files
  gen-data   <out>/manifest.tsv, <id>.gvox, <id>_views/view_XXX.png
  train      <out>/config.txt, train_log.txt, checkpoint.garw
  train-imb  <out>/imb_log.txt, checkpoint.garw (reconstruction weights unchanged)
  eval       <out>/metrics.txt (id, n, iou, fscore), summary.txt (n, mean iou, mean fscore)
  reduce     <out>/selection.txt (id, method, k, indices...)
  tradeoff   <out>/tradeoff.txt (budget, method, n, mean iou, mean fscore)
  gradcheck  <out>/gradcheck.txt (seed, module, leaf, error, probes, shrunk, verdict)
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as C
from . import gradcheck
from .data import build_dataset, load_samples, read_manifest
from .errors import ContractError, FormatError
from .metrics import format_metric_record
from .model import GARNet
from .training import NonFiniteLoss, evaluate, run_training
from .view_reduction import METHODS, select_views, tradeoff_curve, train_imb

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4, 5
MODELS = {"desk": C.DESK, "small": C.SMALL}


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="garnet", description="Multi-view voxel reconstruction with attention fusion.")
    ap.add_argument("--threads", type=int, default=1, help="cap on BLAS worker threads")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="build a synthetic dataset")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--views", type=int, default=24)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--test-fraction", type=float, default=0.2)
    g.add_argument("--image-size", type=int, default=32)
    g.add_argument("--out", required=True)

    def model_flags(p, checkpoint_required=True):
        p.add_argument("--model", choices=sorted(MODELS), default="desk")
        p.add_argument("--checkpoint", required=checkpoint_required)
        p.add_argument("--manifest", required=True)

    t = sub.add_parser("train", help="train the reconstruction network")
    t.add_argument("--config", help="key = value training config file")
    t.add_argument("--strategy", choices=C.STRATEGIES)
    t.add_argument("--nmax", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--split", default="train")
    model_flags(t, checkpoint_required=False)
    t.add_argument("--out", required=True)

    i = sub.add_parser("train-imb", help="fit the view embedding against a trained model")
    model_flags(i)
    i.add_argument("--epochs", type=int, default=C.IMBTrainConfig.epochs)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--split", default="train")
    i.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="mean IoU / F-score per view count")
    model_flags(e)
    e.add_argument("--views", type=_int_list, default=[1, 3, 5])
    e.add_argument("--split", default="test")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)

    r = sub.add_parser("reduce", help="select k of N views per object")
    model_flags(r)
    r.add_argument("--method", choices=METHODS, default="imb_fps")
    r.add_argument("--k", type=int, required=True)
    r.add_argument("--big-n", type=int, help="use the first N views (default: all)")
    r.add_argument("--split", default="test")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)

    o = sub.add_parser("tradeoff", help="accuracy under MAC budgets")
    model_flags(o)
    o.add_argument("--budgets", type=_float_list, required=True)
    o.add_argument("--methods", default="imb_fps,random")
    o.add_argument("--big-n", type=int, default=24)
    o.add_argument("--split", default="test")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--out", required=True)

    c = sub.add_parser("gradcheck", help="finite-difference suite")
    c.add_argument("--module", choices=("all",) + gradcheck.MODULES, default="all")
    c.add_argument("--seeds", type=int, default=5)
    c.add_argument("--coords", type=int, default=4)
    c.add_argument("--out")
    return ap


def _print_config(args, extra=None) -> None:
    for k, v in sorted(vars(args).items()):
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        print(f"{k} = {v}")
    if extra is not None:
        print(C.format_config(extra))
    sys.stdout.flush()


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(args) -> GARNet:
    path = Path(args.checkpoint)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return GARNet.load(path, MODELS[args.model])


def _samples(args):
    return load_samples(read_manifest(args.manifest), args.split)


def cmd_gen_data(args) -> int:
    _print_config(args)
    if args.count < 2:
        raise UsageError("--count must be at least 2")
    if args.views < 1:
        raise UsageError("--views must be at least 1")
    if not 0.0 < args.test_fraction < 1.0:
        raise UsageError("--test-fraction must lie in (0, 1)")
    m = build_dataset(args.count, args.views, args.seed, args.out, args.test_fraction, args.image_size)
    print(f"wrote {len(m.records)} objects ({len(m.split('test'))} test) to {m.root}")
    return EXIT_OK


def _train_config(args) -> C.TrainConfig:
    cfg = C.load_config(args.config) if args.config else C.TrainConfig()
    updates = {}
    for flag, field in (("strategy", "strategy"), ("nmax", "n_max"), ("seed", "seed")):
        if getattr(args, flag) is not None:
            updates[field] = getattr(args, flag)
    if args.epochs is not None:
        updates["epochs"] = args.epochs
        updates["bce_only_epochs"] = min(cfg.bce_only_epochs, args.epochs)
        if cfg.stage1_epochs is not None:
            updates["stage1_epochs"] = min(cfg.stage1_epochs, args.epochs)
    return dataclasses.replace(cfg, **updates)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    _print_config(args, cfg)
    out = _out_dir(args)
    (out / "config.txt").write_text(C.format_config(cfg) + "\n")
    samples = _samples(args)
    if not samples:
        raise UsageError(f"split {args.split!r} is empty")
    model = _load_model(args) if args.checkpoint else GARNet.init(MODELS[args.model], cfg.seed)
    with open(out / "train_log.txt", "w") as log:
        log.write("# epoch, iteration, n_views, phase, loss\n")

        def emit(line):
            log.write(line + "\n")
            log.flush()

        try:
            result = run_training(samples, cfg, model, log=emit)
        except NonFiniteLoss as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
    model.save(out / "checkpoint.garw")
    for e, loss in enumerate(result.epoch_losses):
        print(f"epoch {e} mean loss {loss:.6f}")
    return EXIT_OK


def cmd_train_imb(args) -> int:
    cfg = C.IMBTrainConfig(epochs=args.epochs, seed=args.seed)
    _print_config(args, cfg)
    out = _out_dir(args)
    model = _load_model(args)
    samples = _samples(args)
    with open(out / "imb_log.txt", "w") as log:
        res = train_imb(model, samples, cfg, log=lambda s: (log.write(s + "\n"), print(s)))
    model.save(out / "checkpoint.garw")
    print(f"stress {res.stress[0]:.6f} -> {res.stress[-1]:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _print_config(args)
    if not args.views or min(args.views) < 1:
        raise UsageError("--views needs positive view counts")
    model = _load_model(args)
    samples = _samples(args)
    out = _out_dir(args)
    lines, summary = [], []
    for n in args.views:
        recs = evaluate(model, samples, n, args.seed)
        lines += [format_metric_record(*r) for r in recs]
        mi, mf = np.mean([r[2] for r in recs]), np.mean([r[3] for r in recs])
        summary.append(f"{n}, {mi:.6f}, {mf:.6f}")
        print(f"n={n} mean iou {mi:.6f} mean fscore {mf:.6f}")
    (out / "metrics.txt").write_text("\n".join(lines) + "\n")
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    return EXIT_OK


def cmd_reduce(args) -> int:
    _print_config(args)
    model = _load_model(args)
    samples = _samples(args)
    lines = []
    for j, s in enumerate(samples):
        imgs = s.images if args.big_n is None else s.images[: args.big_n]
        if not 1 <= args.k <= len(imgs):
            raise UsageError(f"--k {args.k} is out of range for {len(imgs)} available views")
        idx = select_views(model, imgs, args.k, args.method, seed=args.seed + j)
        lines.append(f"{s.id}, {args.method}, {args.k}, " + " ".join(str(i) for i in idx))
    (_out_dir(args) / "selection.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_tradeoff(args) -> int:
    _print_config(args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise UsageError(f"unknown methods {bad}")
    model = _load_model(args)
    samples = _samples(args)
    recs = tradeoff_curve(model, samples, args.big_n, args.budgets, methods, args.seed)
    text = "\n".join(r.line() for r in recs) + "\n"
    (_out_dir(args) / "tradeoff.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _print_config(args)
    modules = gradcheck.MODULES if args.module == "all" else (args.module,)
    lines: list[str] = []
    results = gradcheck.run_suite(modules, range(args.seeds), coords_per_leaf=args.coords, log=lines.append)
    if args.out:
        (_out_dir(args) / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    worst = gradcheck.worst_by_module(results)
    for m in modules:
        print(f"{m}: worst {worst[m].error:.3e} at {worst[m].name}")
    failed = [r for r in results if not r.ok]
    for r in failed:
        print(f"FAIL {r.module} {r.name} error {r.error:.3e} probes {r.probes}", file=sys.stderr)
    return EXIT_VERIFY if failed else EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "train-imb": cmd_train_imb,
    "eval": cmd_eval,
    "reduce": cmd_reduce,
    "tradeoff": cmd_tradeoff,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.threads < 1:
        parser.print_usage(sys.stderr)
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except (UsageError, ContractError) as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
