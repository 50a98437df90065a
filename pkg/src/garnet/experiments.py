"""Desk-scale experiments shared by ``scripts/`` and the acceptance suite.

Every expensive result is cached under ``<cache>/<name>-<hash>/`` where the
hash covers the configuration that produced it, so a rerun with the same
settings reuses checkpoints and metric tables instead of retraining.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import DESK, IMBTrainConfig, ModelConfig, TrainConfig, format_config
from .data import Sample, make_objects, to_sample
from .losses import total_loss
from .model import GARNet
from .tensor import no_grad
from .training import choose_views, evaluate, run_training
from .view_reduction import evaluate_reduced, mac_count, train_imb

DEFAULT_CACHE = Path(__file__).resolve().parents[2] / "artifacts"


def cache_root() -> Path:
    return Path(os.environ.get("GARNET_CACHE", DEFAULT_CACHE))


def config_hash(*parts) -> str:
    text = "\n--\n".join(format_config(p) if dataclasses.is_dataclass(p) else repr(p) for p in parts)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def write_table(path: Path, rows: dict[str, float | int | str]) -> None:
    path.write_text("".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n" for k, v in rows.items()))


def read_table(path: Path) -> dict[str, str]:
    out = {}
    for line in path.read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------- data


@dataclass(frozen=True)
class DeskData:
    objects: int = 300
    train_objects: int = 200  # the first ones; the rest are the test split
    views: int = 24
    seed: int = 0
    image_size: int = 32


def desk_samples(d: DeskData = DeskData()) -> tuple[list[Sample], list[Sample]]:
    samples = [to_sample(o) for o in make_objects(d.objects, d.views, d.seed, d.image_size)]
    return samples[: d.train_objects], samples[d.train_objects :]


# ---------------------------------------------------------------- desk training


def scaled_train_config(epochs: int, **kw) -> TrainConfig:
    """Dynamic-strategy schedule with the BCE-only phase and lr milestones scaled to ``epochs``."""
    milestones = tuple(sorted({max(1, int(epochs * f)) for f in (0.2, 0.3, 0.4, 0.5, 0.7, 0.9)}))
    return TrainConfig(epochs=epochs, bce_only_epochs=int(epochs * 2 / 3), lr_halving_epochs=milestones, **kw)


DESK_TRAIN = scaled_train_config(45)


@dataclass
class DeskRun:
    model: GARNet
    directory: Path
    train_seconds: float
    epoch_losses: list[float] = field(default_factory=list)


def desk_training(
    cfg: TrainConfig = DESK_TRAIN,
    data: DeskData = DeskData(),
    model_cfg: ModelConfig = DESK,
    log: Callable[[str], None] | None = None,
) -> DeskRun:
    out = cache_root() / f"desk-{config_hash(cfg, data, model_cfg)}"
    ckpt, meta = out / "checkpoint.garw", out / "meta.txt"
    if ckpt.is_file() and meta.is_file():
        m = read_table(meta)
        losses = [float(x) for x in m["epoch_losses"].split(",") if x]
        return DeskRun(GARNet.load(ckpt, model_cfg), out, float(m["train_seconds"]), losses)
    out.mkdir(parents=True, exist_ok=True)
    train, _ = desk_samples(data)
    (out / "config.txt").write_text(format_config(cfg) + "\n")
    with open(out / "train_log.txt", "w") as fh:

        def emit(line):
            fh.write(line + "\n")
            fh.flush()
            if log is not None:
                log(line)

        start = time.perf_counter()
        res = run_training(train, cfg, model_cfg=model_cfg, log=emit)
        seconds = time.perf_counter() - start
    res.model.save(ckpt)
    write_table(meta, {"train_seconds": seconds, "epoch_losses": ",".join(repr(x) for x in res.epoch_losses)})
    return DeskRun(res.model, out, seconds, res.epoch_losses)


def desk_metrics(run: DeskRun, data: DeskData = DeskData(), seed: int = 0) -> dict[str, float]:
    """Train-split IoU at n=3 and test-split IoU / F-score at n = 1, 3, 5."""
    path = run.directory / f"metrics-{seed}.txt"
    if path.is_file():
        return {k: float(v) for k, v in read_table(path).items()}
    train, test = desk_samples(data)
    out = {"train_iou_3": float(np.mean([r[2] for r in evaluate(run.model, train, 3, seed)]))}
    for n in (1, 3, 5):
        recs = evaluate(run.model, test, n, seed)
        out[f"test_iou_{n}"] = float(np.mean([r[2] for r in recs]))
        out[f"test_fscore_{n}"] = float(np.mean([r[3] for r in recs]))
    write_table(path, out)
    return out


# ---------------------------------------------------------------- strategy ablation


@dataclass(frozen=True)
class AblationSetup:
    objects: int = 24
    epochs: int = 40
    eval_views: int = 3
    seed: int = 0


def probe_loss(model: GARNet, samples, n_views: int, seed: int = 0) -> float:
    """Mean full-phase loss at a fixed view count and fixed view choice."""
    vals = []
    with no_grad():
        for j, s in enumerate(samples):
            idx = choose_views(np.random.default_rng([seed, j, 77]), len(s.images), n_views)
            rec = model.forward(s.images[idx])
            vals.append(total_loss(rec.coarse, rec.fine, s.gt[None], phase="full").item())
    return float(np.mean(vals))


def strategy_ablation(
    setup: AblationSetup = AblationSetup(),
    data: DeskData = DeskData(),
    model_cfg: ModelConfig = DESK,
    log: Callable[[str], None] | None = None,
) -> list[dict[str, float | str]]:
    """Train each strategy from the same init on the same objects; one row per strategy."""
    base = scaled_train_config(setup.epochs, seed=setup.seed)
    out_dir = cache_root() / f"ablation-{config_hash(setup, data, model_cfg, base)}"
    table = out_dir / "ablation.txt"
    if table.is_file():
        rows = []
        for line in table.read_text().splitlines()[1:]:
            s, a, b, *ious = line.split(", ")
            rows.append({"strategy": s, "initial_loss": float(a), "final_loss": float(b)} | {f"iou_{n}": float(v) for n, v in zip((1, 3, 5), ious)})
        return rows
    out_dir.mkdir(parents=True, exist_ok=True)
    train, _ = desk_samples(data)
    subset = train[: setup.objects]
    init = GARNet.init(model_cfg, setup.seed)
    initial = probe_loss(init, subset, setup.eval_views, setup.seed)
    rows = []
    for strategy in ("dynamic", "faset", "pix2vox"):
        cfg = dataclasses.replace(base, strategy=strategy)
        model = GARNet.init(model_cfg, setup.seed)
        with open(out_dir / f"train_log_{strategy}.txt", "w") as fh:
            run_training(subset, cfg, model, log=lambda line: fh.write(line + "\n"))
        row = {"strategy": strategy, "initial_loss": initial, "final_loss": probe_loss(model, subset, setup.eval_views, setup.seed)}
        for n in (1, 3, 5):
            row[f"iou_{n}"] = float(np.mean([r[2] for r in evaluate(model, subset, n, setup.seed)]))
        rows.append(row)
        if log is not None:
            log(f"{strategy}: loss {initial:.4f} -> {row['final_loss']:.4f}")
    lines = ["# strategy, initial probe loss, final probe loss, iou@1, iou@3, iou@5"]
    lines += [", ".join([r["strategy"]] + [repr(r[k]) for k in ("initial_loss", "final_loss", "iou_1", "iou_3", "iou_5")]) for r in rows]
    table.write_text("\n".join(lines) + "\n")
    return rows


# ---------------------------------------------------------------- view reduction


@dataclass(frozen=True)
class ReductionSetup:
    big_n: int = 24
    ns: tuple[int, ...] = (3, 4, 5)
    methods: tuple[str, ...] = ("imb_fps", "random")
    seed: int = 0
    imb: IMBTrainConfig = IMBTrainConfig()


def reduction_study(
    run: DeskRun,
    setup: ReductionSetup = ReductionSetup(),
    data: DeskData = DeskData(),
    log: Callable[[str], None] | None = None,
) -> dict:
    """Train the IMB on the train split, then compare selection methods on the test split."""
    out_dir = run.directory / f"reduction-{config_hash(setup)}"
    ckpt, meta, ious_path = out_dir / "checkpoint.garw", out_dir / "stress.txt", out_dir / "ious.txt"
    model = GARNet.load(run.directory / "checkpoint.garw", run.model.cfg)
    train, test = desk_samples(data)
    if ckpt.is_file() and meta.is_file() and ious_path.is_file():
        model = GARNet.load(ckpt, run.model.cfg)
        stress = [float(x) for x in meta.read_text().split()]
        per_object = {}
        for line in ious_path.read_text().splitlines():
            method, n, *vals = line.split()
            per_object[(method, int(n))] = [float(v) for v in vals]
        return {"model": model, "stress": stress, "ious": per_object, "cost": mac_count(model.cfg)}
    out_dir.mkdir(parents=True, exist_ok=True)
    res = train_imb(model, train, setup.imb, log=log)
    model.save(ckpt)
    meta.write_text(" ".join(repr(s) for s in res.stress) + "\n")
    per_object = {}
    for n in setup.ns:
        for method in setup.methods:
            mi, _, ious = evaluate_reduced(model, test, setup.big_n, n, method, setup.seed)
            per_object[(method, n)] = ious
            if log is not None:
                log(f"n={n} {method} mean iou {mi:.4f}")
    ious_path.write_text("".join(f"{m} {n} " + " ".join(repr(v) for v in vals) + "\n" for (m, n), vals in per_object.items()))
    return {"model": model, "stress": res.stress, "ious": per_object, "cost": mac_count(model.cfg)}


def strictly_decreasing(xs) -> bool:
    return all(b < a for a, b in zip(xs, xs[1:])) and all(math.isfinite(x) for x in xs)
