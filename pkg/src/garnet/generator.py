"""Generator with global-aware attention fusion.

Per branch the seed goes through the first decoder block; for multi-view input
the pre-merger scores the branches per feature cell and their weighted sum
becomes an extra (n+1)-th branch. All n+1 branches run through the second
decoder block; the post-merger scores the n view branches from each branch
feature and its deviation from the global one, and the coarse volume is the
score-weighted sum of the per-branch volumes. A single view skips both mergers.

Every branch shares one parameter set. Branches are stacked on a leading axis
so each conv runs once for all of them; softmax is taken over that axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ContractError
from .nn import Params, conv_params, tconv_params
from .tensor import Tensor


@dataclass
class BranchFeature:
    f_prime: Tensor
    f_dprime: Tensor
    v: Tensor


@dataclass
class GeneratorOutput:
    coarse: Tensor  # (1, S, S, S)
    branches: list[BranchFeature]
    post_scores: list[Tensor] | None
    pre_scores: list[Tensor] | None
    global_feature: Tensor | None = None


def post_plan(cfg: ModelConfig) -> list[tuple[int, int]]:
    chans = [2 * cfg.feature_channels, *cfg.post_channels, 1]
    return list(zip(chans[:-1], chans[1:]))


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    p: Params = {}
    tconv_params(p, "decoder1.t0", rng, cfg.seed_channels, cfg.d1_channels, 4, 3, 2)
    c = cfg.d1_channels
    for i, co in enumerate(cfg.d2_channels):
        tconv_params(p, f"decoder2.t{i}", rng, c, co, 4, 3, 2)
        c = co
    conv_params(p, "decoder2.head", rng, c, 1, 1, 3)
    conv_params(p, "premerge.channel", rng, 1, 1, cfg.eca_kernel, 1)
    conv_params(p, "premerge.spatial", rng, 2, 1, 3, 3)
    for i, (ci, co) in enumerate(post_plan(cfg)):
        conv_params(p, f"postmerge.c{i}", rng, ci, co, 3, 3)
    return p


def _tconv3(x, p, name):
    return T.conv(x, p[f"{name}.w"], p[f"{name}.b"], 3, stride=2, pad=1, transposed=True)


def _expect_shape(x: Tensor, tail: tuple, what: str) -> None:
    if x.shape[-len(tail):] != tail or x.ndim not in (len(tail), len(tail) + 1):
        raise ContractError(f"{what}: expected trailing shape {tail}, got {x.shape}")


def decode_stage1(seed: Tensor, p: Params, cfg: ModelConfig) -> Tensor:
    _expect_shape(seed, (cfg.seed_channels, 2, 2, 2), "decode_stage1")
    return T.relu(_tconv3(seed, p, "decoder1.t0"))


def decode_stage2(f_prime: Tensor, p: Params, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Returns ``(f_dprime, v)``; accepts one (C_1, 4, 4, 4) feature or a stack of them."""
    _expect_shape(f_prime, (cfg.d1_channels, 4, 4, 4), "decode_stage2")
    x = f_prime
    for i in range(len(cfg.d2_channels)):
        x = T.relu(_tconv3(x, p, f"decoder2.t{i}"))
    v = T.sigmoid(T.conv(x, p["decoder2.head.w"], p["decoder2.head.b"], 3))
    return T.concat([x, v], axis=x.ndim - 4), v


def premerge_logits(stacked: Tensor, p: Params) -> Tensor:
    """Branch logits (n, C_1, 4, 4, 4) from stacked first-block features."""
    n, c = stacked.shape[:2]
    vmax = T.pool(stacked, "max", "global-spatial", batched=True)
    vavg = T.pool(stacked, "avg", "global-spatial", batched=True)
    w, b = p["premerge.channel.w"], p["premerge.channel.b"]
    k = w.shape[-1]
    chan = T.conv(T.reshape(vmax, (n, 1, c)), w, b, 1, pad=k // 2) + T.conv(
        T.reshape(vavg, (n, 1, c)), w, b, 1, pad=k // 2
    )
    chan = T.reshape(chan, (n, c, 1, 1, 1))
    smax = T.pool(stacked, "max", "channel-wise-spatial", batched=True)
    savg = T.pool(stacked, "avg", "channel-wise-spatial", batched=True)
    spatial = T.conv(T.concat([smax, savg], axis=1), p["premerge.spatial.w"], p["premerge.spatial.b"], 3, pad=1)
    return chan + spatial


def _check_branches(xs: Sequence[Tensor], what: str) -> None:
    if len(xs) < 2:
        raise ContractError(f"{what} needs at least 2 branches; a single view bypasses fusion")
    for i, x in enumerate(xs):
        if x.shape != xs[0].shape:
            raise ContractError(f"{what}: branch {i} has shape {x.shape}, expected {xs[0].shape}")


def premerge_scores(f_primes: Sequence[Tensor], p: Params) -> list[Tensor]:
    _check_branches(f_primes, "premerge_scores")
    return T.unstack(T.softmax(premerge_logits(T.stack(f_primes), p), 0))


def postmerge_logits(branch_f: Tensor, global_f: Tensor, p: Params, cfg: ModelConfig) -> Tensor:
    """Logits (n, 1, S, S, S) from stacked branch features and the global feature."""
    x = T.concat([branch_f, global_f - branch_f], axis=1)
    plan = post_plan(cfg)
    for i in range(len(plan)):
        x = T.conv(x, p[f"postmerge.c{i}.w"], p[f"postmerge.c{i}.b"], 3, pad=1)
        if i < len(plan) - 1:
            x = T.leaky_relu(x, 0.2)
    return x


def postmerge_scores(branch_f: Sequence[Tensor], global_f: Tensor, p: Params, cfg: ModelConfig) -> list[Tensor]:
    _check_branches(branch_f, "postmerge_scores")
    if global_f.shape != branch_f[0].shape:
        raise ContractError(f"global feature shape {global_f.shape} differs from branch shape {branch_f[0].shape}")
    g = T.reshape(global_f, (1,) + global_f.shape)
    return T.unstack(T.softmax(postmerge_logits(T.stack(branch_f), g, p, cfg), 0))


def _weighted_sum(xs: Sequence[Tensor], scores: Sequence[Tensor], what: str) -> Tensor:
    if len(xs) != len(scores) or not xs:
        raise ContractError(f"{what}: {len(xs)} branches but {len(scores)} score maps")
    out = None
    for x, s in zip(xs, scores):
        if x.shape != s.shape:
            raise ContractError(f"{what}: branch shape {x.shape} vs score shape {s.shape}")
        term = x * s
        out = term if out is None else out + term
    return out


def fuse_initial(f_primes: Sequence[Tensor], scores: Sequence[Tensor]) -> Tensor:
    return _weighted_sum(f_primes, scores, "fuse_initial")


def fuse_volumes(vs: Sequence[Tensor], scores: Sequence[Tensor]) -> Tensor:
    return _weighted_sum(vs, scores, "fuse_volumes")


def generate(seeds: Tensor | Sequence[Tensor], p: Params, cfg: ModelConfig) -> GeneratorOutput:
    """Coarse volume from n encoded seeds, stacked (n, C_0, 2, 2, 2) or as a list."""
    if not isinstance(seeds, Tensor):
        if len(seeds) == 0:
            raise ContractError("generate needs at least one view")
        seeds = T.stack(list(seeds))
    if seeds.ndim != 5 or seeds.shape[0] == 0:
        raise ContractError(f"generate expects stacked seeds (n, C_0, 2, 2, 2), got {seeds.shape}")
    n = seeds.shape[0]
    f1 = decode_stage1(seeds, p, cfg)
    if n == 1:
        f2, v = decode_stage2(f1, p, cfg)
        branch = BranchFeature(f1[0], f2[0], v[0])
        return GeneratorOutput(v[0], [branch], None, None)

    pre = T.softmax(premerge_logits(f1, p), 0)
    fused = T.reduce_sum(pre * f1, axis=0, keepdims=True)
    f2, v = decode_stage2(T.concat([f1, fused], axis=0), p, cfg)
    branch_f2 = f2[:n]
    global_f2 = f2[n:]
    post = T.softmax(postmerge_logits(branch_f2, global_f2, p, cfg), 0)
    coarse = T.reduce_sum(post * v[:n], axis=0)
    branches = [BranchFeature(f1[i], f2[i], v[i]) for i in range(n)]
    return GeneratorOutput(coarse, branches, T.unstack(post), T.unstack(pre), global_f2[0])
