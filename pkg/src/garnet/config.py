"""Configuration dataclasses and the flat ``key = value`` config file format.

Config files hold one assignment per line. Blank lines and ``#`` comments are
ignored; list values are comma separated; booleans are ``true``/``false``.
Keys are the field names of :class:`TrainConfig` plus the loss weights
``alpha``, ``beta``, ``gamma``, ``mu``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ContractError


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    stem_channels: int = 8  # conv stem and first residual block (the IMB tap)
    block_b_channels: int = 16
    tail_channels: int = 32
    seed_channels: int = 32  # C_0; the flat encoder output has 2*C_0 channels
    d1_channels: int = 16  # C_1
    d2_channels: tuple[int, ...] = (8, 8, 4)
    post_channels: tuple[int, ...] = (16, 8, 4, 2)
    eca_kernel: int = 3
    refiner_channels: tuple[int, int] = (8, 16)
    refiner_res_blocks: int = 2
    imb_hidden: tuple[int, ...] = (32, 16)
    embed_dim: int = 5
    threshold: float = 0.3

    def __post_init__(self):
        if self.image_size < 8 or self.image_size % 4:
            raise ContractError(f"image_size must be >= 8 and divisible by 4, got {self.image_size}")
        if self.volume_size % 4:
            raise ContractError("volume size must be divisible by 4 for the refiner")

    @property
    def volume_size(self) -> int:
        return 4 * 2 ** len(self.d2_channels)

    @property
    def feature_channels(self) -> int:
        """Channels of f'' (last hidden decoder layer concatenated with v)."""
        return self.d2_channels[-1] + 1


DESK = ModelConfig()

# Small channel counts and a 16^3 volume; finite-difference suites run on it.
TINY = ModelConfig(
    image_size=16,
    stem_channels=4,
    block_b_channels=4,
    tail_channels=8,
    seed_channels=4,
    d1_channels=4,
    d2_channels=(4, 2),
    post_channels=(4, 2),
    refiner_channels=(4, 4),
    refiner_res_blocks=1,
    imb_hidden=(8, 8),
)

# TINY widths at the dataset's 32^3 grid, for quick runs on real samples.
SMALL = dataclasses.replace(TINY, d2_channels=(4, 2, 2))

# Channel plan at 224x224 input; recorded, not exercised by tests.
FULL_SCALE = ModelConfig(
    image_size=224,
    stem_channels=64,
    block_b_channels=128,
    tail_channels=256,
    seed_channels=256,
    d1_channels=512,
    d2_channels=(128, 32, 8),
    post_channels=(16, 8, 4, 2),
    refiner_channels=(32, 64),
)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 10.0
    beta: float = 10.0
    gamma: float = 0.5
    mu: float = 0.5

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "mu"):
            if getattr(self, name) < 0:
                raise ContractError(f"loss weight {name} must be nonnegative")


STRATEGIES = ("dynamic", "faset", "pix2vox")


@dataclass(frozen=True)
class TrainConfig:
    n_max: int = 3
    strategy: str = "dynamic"
    epochs: int = 60
    bce_only_epochs: int = 40
    stage1_epochs: int | None = None  # faset / pix2vox split; defaults to epochs // 2
    batch_size: int = 8
    base_lr: float = 1e-3
    lr_halving_epochs: tuple[int, ...] = (12, 18, 24, 30, 42, 54)
    fusion_lr_multiplier: float = 2.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.n_max < 1:
            raise ContractError("n_max must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ContractError(f"unknown strategy {self.strategy!r}")
        if not 0 <= self.bce_only_epochs <= self.epochs:
            raise ContractError("bce_only_epochs must lie in [0, epochs]")
        if self.stage1_epochs is not None and not 0 <= self.stage1_epochs <= self.epochs:
            raise ContractError("stage1_epochs must lie in [0, epochs]")
        if self.fusion_lr_multiplier <= 0 or self.base_lr <= 0:
            raise ContractError("learning rates and multipliers must be positive")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")

    @property
    def stage1(self) -> int:
        return self.epochs // 2 if self.stage1_epochs is None else self.stage1_epochs


# Full-scale schedule: 200 epochs, 140 of them BCE only, batch 32.
FULL_TRAIN = TrainConfig(
    epochs=200,
    bce_only_epochs=140,
    batch_size=32,
    lr_halving_epochs=(40, 60, 80, 100, 140, 180),
)


@dataclass(frozen=True)
class IMBTrainConfig:
    epochs: int = 15
    objects_per_iter: int = 40
    lr: float = 2e-3
    lr_decay: float = 0.1
    lr_decay_every: int = 5
    mode: str = "per_pair_abs"
    normalize_targets: bool = True
    seed: int = 0


def _coerce(value: str, default):
    kind = type(default)
    if isinstance(default, bool):
        low = value.strip().lower()
        if low not in ("true", "false"):
            raise ContractError(f"expected true/false, got {value!r}")
        return low == "true"
    if isinstance(default, tuple):
        parts = [p.strip() for p in value.split(",") if p.strip()]
        return tuple(int(p) for p in parts)
    if default is None:
        return None if value.strip().lower() == "none" else int(value)
    return kind(value.strip())


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    train_fields = {f.name for f in dataclasses.fields(TrainConfig)} - {"loss"}
    loss_fields = {f.name for f in dataclasses.fields(LossWeights)}
    updates, loss_updates = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in train_fields:
            updates[key] = _coerce(value, getattr(base, key))
        elif key in loss_fields:
            loss_updates[key] = float(value)
        else:
            raise ContractError(f"config line {lineno}: unknown key {key!r}")
    if loss_updates:
        updates["loss"] = dataclasses.replace(base.loss, **loss_updates)
    return dataclasses.replace(base, **updates)


def load_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    return parse_config_text(Path(path).read_text(), base)


def format_config(cfg) -> str:
    """Render a dataclass config (nested dataclasses flattened) as ``key = value`` lines."""
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            lines.extend(format_config(v).splitlines())
            continue
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines)
