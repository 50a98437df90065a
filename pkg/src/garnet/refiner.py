"""3D U-shaped residual refiner.

The network predicts a correction in logit space::

    V = sigmoid(residual_logits + logit(clamp(V_c, 1e-6, 1 - 1e-6)))

and its last conv starts at zero, so a fresh refiner passes ``V_c`` through.

Desk layout (S = 32)::

    down1  conv k4/s2 1->8               (8, 16^3)
    down2  conv k4/s2 8->16              (16, 8^3)
    res    2 x [x + conv3(lrelu(conv3(x)))]
    up1    tconv k4/s2 16->8, concat down1, conv3 16->8   (8, 16^3)
    up2    tconv k4/s2 8->4, conv3 4->4                   (4, 32^3)
    out    conv3 4->1, zero init                          residual logits
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ContractError
from .nn import Params, conv_params, tconv_params
from .tensor import Tensor

CLAMP = 1e-6


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    c1, c2 = cfg.refiner_channels
    c3 = cfg.d2_channels[-1]
    p: Params = {}
    conv_params(p, "refiner.down1", rng, 1, c1, 4, 3)
    conv_params(p, "refiner.down2", rng, c1, c2, 4, 3)
    for i in range(cfg.refiner_res_blocks):
        conv_params(p, f"refiner.res{i}a", rng, c2, c2, 3, 3)
        conv_params(p, f"refiner.res{i}b", rng, c2, c2, 3, 3)
    tconv_params(p, "refiner.up1", rng, c2, c1, 4, 3, 2)
    conv_params(p, "refiner.merge1", rng, 2 * c1, c1, 3, 3)
    tconv_params(p, "refiner.up2", rng, c1, c3, 4, 3, 2)
    conv_params(p, "refiner.merge2", rng, c3, c3, 3, 3)
    conv_params(p, "refiner.out", rng, c3, 1, 3, 3, zero=True)
    return p


def _c(x, p, name, stride=1, pad=1):
    return T.conv(x, p[f"{name}.w"], p[f"{name}.b"], 3, stride, pad)


def _t(x, p, name):
    return T.conv(x, p[f"{name}.w"], p[f"{name}.b"], 3, 2, 1, transposed=True)


def logit(p: Tensor) -> Tensor:
    return T.log(p) - T.log(1.0 - p)


def refine(coarse: Tensor, p: Params, cfg: ModelConfig) -> Tensor:
    """Refine a (1, S, S, S) coarse volume (or a batch (B, 1, S, S, S))."""
    s = cfg.volume_size
    if coarse.shape[-4:] != (1, s, s, s) or coarse.ndim not in (4, 5):
        raise ContractError(f"refine expects (1, {s}, {s}, {s}), got {coarse.shape}")
    lrelu = T.leaky_relu
    d1 = lrelu(_c(coarse, p, "refiner.down1", stride=2))
    x = lrelu(_c(d1, p, "refiner.down2", stride=2))
    for i in range(cfg.refiner_res_blocks):
        h = _c(lrelu(_c(x, p, f"refiner.res{i}a")), p, f"refiner.res{i}b")
        x = lrelu(x + h)
    ch = 0 if coarse.ndim == 4 else 1
    u = lrelu(_t(x, p, "refiner.up1"))
    u = lrelu(_c(T.concat([u, d1], axis=ch), p, "refiner.merge1"))
    u = lrelu(_t(u, p, "refiner.up2"))
    u = lrelu(_c(u, p, "refiner.merge2"))
    residual = _c(u, p, "refiner.out")
    return T.sigmoid(residual + logit(T.clamp(coarse, CLAMP, 1.0 - CLAMP)))
