"""Optimizer, schedules and the three training strategies.

``dynamic`` draws a fresh view count n ~ U{1..n_max} every iteration; n = 1
runs the single-view path, so the mergers are not in the graph at all and
their Adam state does not move. ``faset`` trains everything but the mergers
on single views, then only the mergers on multi-view input. ``pix2vox`` has
the same first stage, then trains the whole network with one random view
count per epoch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import DESK, ModelConfig, TrainConfig
from .data import Sample
from .errors import ContractError
from .losses import total_loss
from .metrics import binarize, fscore_1pct, iou
from .model import GARNet, is_fusion
from .tensor import Tensor


class NonFiniteLoss(FloatingPointError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value} at iteration {iteration}")
        self.iteration = iteration


class Adam:
    """Adam with bias correction and a step counter per parameter.

    Parameters whose ``grad`` is ``None`` are skipped entirely, so a parameter
    that sat out an iteration keeps its moments and its own step count.
    """

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.steps = {k: 0 for k in params}

    def step(self, lr: float | dict[str, float]) -> None:
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            rate = lr[k] if isinstance(lr, dict) else lr
            self.steps[k] += 1
            t = self.steps[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            m_hat = self.m[k] / (1 - self.beta1**t)
            v_hat = self.v[k] / (1 - self.beta2**t)
            p.data = p.data - rate * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(params: dict[str, Tensor], opt: Adam, lr_per_group: dict[str, float]) -> None:
    """One update with ``lr_per_group`` keyed by ``"fusion"`` and ``"reconstruction"``."""
    lrs = {k: lr_per_group["fusion" if is_fusion(k) else "reconstruction"] for k in params}
    opt.step(lrs)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    passed = sum(1 for m in cfg.lr_halving_epochs if m <= epoch)
    return cfg.base_lr * 0.5**passed


def sample_view_count(rng: np.random.Generator, n_max: int, low: int = 1) -> int:
    if n_max < low:
        raise ContractError(f"n_max must be >= {low}")
    return int(rng.integers(low, n_max + 1))


def loss_phase(epoch: int, cfg: TrainConfig) -> str:
    return "bce_only" if epoch < cfg.bce_only_epochs else "full"


def choose_views(rng: np.random.Generator, available: int, n: int) -> np.ndarray:
    if n > available:
        raise ContractError(f"object has {available} views, {n} requested")
    return rng.choice(available, size=n, replace=False)


def train_step(
    batch: Sequence[Sample],
    n_views: int,
    cfg: TrainConfig,
    model: GARNet,
    opt: Adam,
    epoch: int,
    view_rng: np.random.Generator,
    trainable: set[str] | None = None,
    iteration: int = 0,
) -> float:
    """Forward/backward over ``batch`` (mean loss) and one Adam update; returns the loss."""
    if n_views < 1:
        raise ContractError("n_views must be >= 1")
    params = model.params
    frozen = [] if trainable is None else [k for k in params if k not in trainable]
    for k in frozen:
        params[k].requires_grad = False
    for p in params.values():
        p.grad = None
    phase = loss_phase(epoch, cfg)
    total = 0.0
    try:
        for s in batch:
            idx = choose_views(view_rng, len(s.images), n_views)
            rec = model.forward(s.images[idx])
            loss = total_loss(rec.coarse, rec.fine, s.gt[None], cfg.loss, phase) * (1.0 / len(batch))
            loss.backward()
            total += loss.item()
    finally:
        for k in frozen:
            params[k].requires_grad = True
    if not math.isfinite(total):
        raise NonFiniteLoss(iteration, total)
    lr = lr_at(epoch, cfg)
    adam_step(params, opt, {"reconstruction": lr, "fusion": lr * cfg.fusion_lr_multiplier})
    return total


@dataclass
class TrainingResult:
    model: GARNet
    log: list[str] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    iteration_losses: list[float] = field(default_factory=list)


def _schedule(cfg: TrainConfig, epoch: int, n_rng, epoch_n: int, model: GARNet):
    """(n_views, trainable names or None) for one iteration."""
    if cfg.strategy == "dynamic":
        return sample_view_count(n_rng, cfg.n_max), None
    recon = set(model.names("reconstruction"))
    if epoch < cfg.stage1:
        return 1, recon
    if cfg.strategy == "faset":
        if cfg.n_max < 2:
            return 1, recon
        return sample_view_count(n_rng, cfg.n_max, low=2), set(model.names("fusion"))
    return epoch_n, None


def run_training(
    samples: Sequence[Sample],
    cfg: TrainConfig,
    model: GARNet | None = None,
    model_cfg: ModelConfig = DESK,
    log: Callable[[str], None] | None = None,
) -> TrainingResult:
    model = model or GARNet.init(model_cfg, cfg.seed)
    opt = Adam(model.params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    order_rng = np.random.default_rng([cfg.seed, 1])
    n_rng = np.random.default_rng([cfg.seed, 2])
    view_rng = np.random.default_rng([cfg.seed, 3])
    result = TrainingResult(model)
    it = 0
    for epoch in range(cfg.epochs):
        epoch_n = sample_view_count(n_rng, cfg.n_max)
        order = order_rng.permutation(len(samples))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[start : start + cfg.batch_size]]
            n, trainable = _schedule(cfg, epoch, n_rng, epoch_n, model)
            loss = train_step(batch, n, cfg, model, opt, epoch, view_rng, trainable, it)
            line = f"{epoch}, {it}, {n}, {loss_phase(epoch, cfg)}, {loss:.6f}"
            result.log.append(line)
            if log is not None:
                log(line)
            losses.append(loss)
            result.iteration_losses.append(loss)
            it += 1
        result.epoch_losses.append(float(np.mean(losses)) if losses else math.nan)
    return result


def evaluate(model: GARNet, samples: Sequence[Sample], n_views: int, seed: int = 0) -> list[tuple[str, int, float, float]]:
    """``(object_id, n_views, iou, fscore)`` per sample with fixed-seed view choice."""
    out = []
    for j, s in enumerate(samples):
        idx = choose_views(np.random.default_rng([seed, j, n_views]), len(s.images), n_views)
        pred = binarize(model.predict(s.images[idx]), model.cfg.threshold)
        out.append((s.id, n_views, iou(pred, s.gt), fscore_1pct(pred, s.gt)))
    return out
