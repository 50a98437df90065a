"""Per-view 2D encoder.

Layout (desk config, 32x32 input)::

    stem      conv3x3 3->8, relu                               (8, 32, 32)
    block A   conv3x3/s2 8->8, relu, conv3x3 8->8,
              skip = 2x2 average pool, relu after the sum     (8, 16, 16)  early feature
    block B   conv3x3/s2 8->16, relu, conv3x3 16->16,
              skip = conv1x1/s2 8->16, relu after the sum     (16, 8, 8)
    tail      conv3x3/s2 16->32, relu                         (32, 4, 4)
              conv3x3/s2 32->64, relu                         (64, 2, 2)
    reshape   (64, 2, 2) -> (32, 2, 2, 2)                     seed

The tail keeps halving until the map is 2x2, so other input sizes work as long
as they are divisible by 4.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ContractError
from .nn import Params, conv_params
from .tensor import Tensor


@dataclass
class EncodedView:
    early_feature: Tensor
    seed: Tensor


def tail_plan(cfg: ModelConfig) -> list[tuple[int, int, int]]:
    """``(c_in, c_out, stride)`` for each tail conv."""
    size = cfg.image_size // 4
    strides = []
    while size > 2:
        strides.append(2)
        size = (size + 2 - 3) // 2 + 1
    if size != 2:
        raise ContractError(f"image size {cfg.image_size} does not reduce to a 2x2 map")
    if not strides:
        strides = [1]
    plan, c = [], cfg.block_b_channels
    for i, s in enumerate(strides):
        c_out = 2 * cfg.seed_channels if i == len(strides) - 1 else cfg.tail_channels
        plan.append((c, c_out, s))
        c = c_out
    return plan


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    p: Params = {}
    c, cb = cfg.stem_channels, cfg.block_b_channels
    conv_params(p, "encoder.stem", rng, 3, c, 3, 2)
    conv_params(p, "encoder.a1", rng, c, c, 3, 2)
    conv_params(p, "encoder.a2", rng, c, c, 3, 2)
    conv_params(p, "encoder.b1", rng, c, cb, 3, 2)
    conv_params(p, "encoder.b2", rng, cb, cb, 3, 2)
    conv_params(p, "encoder.bskip", rng, c, cb, 1, 2)
    for i, (ci, co, s) in enumerate(tail_plan(cfg)):
        conv_params(p, f"encoder.tail{i}", rng, ci, co, 3 if s == 2 else 1, 2)
    return p


def _c2(x, p, name, stride=1, pad=1):
    return T.conv(x, p[f"{name}.w"], p[f"{name}.b"], 2, stride, pad)


def check_images(images: Tensor, cfg: ModelConfig) -> None:
    shape = images.shape[-3:]
    if images.ndim not in (3, 4) or shape != (3, cfg.image_size, cfg.image_size):
        raise ContractError(
            f"view images must be (3, {cfg.image_size}, {cfg.image_size}), got {images.shape}"
        )
    if images.data.min() < 0.0 or images.data.max() > 1.0:
        raise ContractError("view image values must lie in [0, 1]")


def early_features(images: Tensor, p: Params, cfg: ModelConfig) -> Tensor:
    """Stem plus residual block A: the tap point for the isometric mapping block."""
    check_images(images, cfg)
    x = T.relu(_c2(images, p, "encoder.stem"))
    h = T.relu(_c2(x, p, "encoder.a1", stride=2))
    h = _c2(h, p, "encoder.a2")
    return T.relu(h + T.avg_pool(x, 2, dims=2))


def encode_from_early(early: Tensor, p: Params, cfg: ModelConfig) -> Tensor:
    h = T.relu(_c2(early, p, "encoder.b1", stride=2))
    h = _c2(h, p, "encoder.b2")
    x = T.relu(h + _c2(early, p, "encoder.bskip", stride=2, pad=0))
    for i, (_, _, s) in enumerate(tail_plan(cfg)):
        x = T.relu(_c2(x, p, f"encoder.tail{i}", stride=s, pad=1 if s == 2 else 0))
    return reshape_to_volume(x, cfg.seed_channels)


def encode_views(images: Tensor, p: Params, cfg: ModelConfig) -> EncodedView:
    """Batched encoder: ``images`` (B, 3, H, W) -> early (B, C_e, H/2, W/2), seed (B, C_0, 2, 2, 2)."""
    early = early_features(images, p, cfg)
    return EncodedView(early, encode_from_early(early, p, cfg))


def encode_view(img: Tensor, p: Params, cfg: ModelConfig) -> EncodedView:
    check_images(img, cfg)
    if img.ndim != 3:
        raise ContractError(f"encode_view takes a single (3, H, W) image, got {img.shape}")
    out = encode_views(T.reshape(img, (1,) + img.shape), p, cfg)
    return EncodedView(out.early_feature[0], out.seed[0])


def reshape_to_volume(flat: Tensor, seed_channels: int) -> Tensor:
    """(2*C_0, h, w) -> (C_0, 2, h, w) with (c, h, w) -> (c mod C_0, c div C_0, h, w).

    Accepts an optional leading batch axis.
    """
    c = flat.shape[-3]
    if c % 2:
        raise ContractError(f"reshape_to_volume needs an even channel count, got {c}")
    if c != 2 * seed_channels:
        raise ContractError(f"expected {2 * seed_channels} channels, got {c}")
    lead = flat.shape[:-3]
    h, w = flat.shape[-2:]
    x = T.reshape(flat, lead + (2, seed_channels, h, w))
    k = len(lead)
    axes = tuple(range(k)) + (k + 1, k, k + 2, k + 3)
    return T.transpose(x, axes)


def volume_to_flat(vol: Tensor) -> Tensor:
    """Inverse of :func:`reshape_to_volume`."""
    lead = vol.shape[:-4]
    c0, d, h, w = vol.shape[-4:]
    k = len(lead)
    x = T.transpose(vol, tuple(range(k)) + (k + 1, k, k + 2, k + 3))
    return T.reshape(x, lead + (d * c0, h, w))
