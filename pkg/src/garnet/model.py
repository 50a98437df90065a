"""The full reconstruction network: encoder -> generator -> refiner."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoder, generator, refiner, view_reduction
from . import tensor as T
from .checkpoint import load_params, save_params
from .config import DESK, ModelConfig
from .errors import ContractError
from .nn import Params
from .tensor import Tensor

FUSION_PREFIXES = ("premerge.", "postmerge.")
IMB_PREFIX = "imb."


def is_fusion(name: str) -> bool:
    return name.startswith(FUSION_PREFIXES)


@dataclass
class Reconstruction:
    coarse: Tensor
    fine: Tensor
    gen: generator.GeneratorOutput
    encoded: encoder.EncodedView


class GARNet:
    def __init__(self, cfg: ModelConfig, params: Params):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: ModelConfig = DESK, seed: int = 0) -> "GARNet":
        rng = np.random.default_rng([seed, 17])
        p: Params = {}
        p.update(encoder.init_params(cfg, rng))
        p.update(generator.init_params(cfg, rng))
        p.update(refiner.init_params(cfg, rng))
        p.update(view_reduction.init_imb_params(cfg, rng))
        return cls(cfg, p)

    def names(self, group: str) -> list[str]:
        """Parameter names of one group: fusion, imb or reconstruction (everything else)."""
        if group == "fusion":
            return [k for k in self.params if is_fusion(k)]
        if group == "imb":
            return [k for k in self.params if k.startswith(IMB_PREFIX)]
        if group == "reconstruction":
            return [k for k in self.params if not is_fusion(k) and not k.startswith(IMB_PREFIX)]
        raise ContractError(f"unknown parameter group {group!r}")

    def forward(self, images) -> Reconstruction:
        """Reconstruct from (n, 3, H, W) view images; returns coarse and refined (1, S, S, S) volumes."""
        images = images if isinstance(images, Tensor) else Tensor(np.asarray(images))
        if images.ndim == 3:
            images = T.reshape(images, (1,) + images.shape)
        if images.shape[0] == 0:
            raise ContractError("forward needs at least one view")
        enc = encoder.encode_views(images, self.params, self.cfg)
        gen = generator.generate(enc.seed, self.params, self.cfg)
        fine = refiner.refine(gen.coarse, self.params, self.cfg)
        return Reconstruction(gen.coarse, fine, gen, enc)

    def predict(self, images) -> np.ndarray:
        with T.no_grad():
            return self.forward(images).fine.data[0]

    def save(self, path) -> None:
        save_params(path, self.params)

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise ContractError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, v in arrays.items():
            if k not in self.params:
                raise ContractError(f"unexpected parameter {k!r} in checkpoint")
            if v.shape != self.params[k].shape:
                raise ContractError(f"parameter {k!r}: shape {v.shape} vs model {self.params[k].shape}")
            self.params[k] = Tensor(v.copy(), requires_grad=True)

    @classmethod
    def load(cls, path, cfg: ModelConfig = DESK) -> "GARNet":
        model = cls.init(cfg)
        model.load_state(load_params(path))
        return model
