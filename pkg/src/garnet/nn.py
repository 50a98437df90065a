"""Parameter creation helpers shared by the network modules."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor

Params = dict[str, Tensor]


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: float) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def conv_params(params: Params, name: str, rng, c_in: int, c_out: int, k: int, dims: int, zero=False) -> None:
    shape = (c_out, c_in) + (k,) * dims
    w = np.zeros(shape) if zero else kaiming_uniform(rng, shape, c_in * k**dims)
    params[f"{name}.w"] = Tensor(w, requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(c_out), requires_grad=True)


def tconv_params(params: Params, name: str, rng, c_in: int, c_out: int, k: int, dims: int, stride: int) -> None:
    # each output cell of a strided transposed conv sees c_in * (k/stride)^dims inputs
    shape = (c_in, c_out) + (k,) * dims
    fan_in = c_in * (k / stride) ** dims
    params[f"{name}.w"] = Tensor(kaiming_uniform(rng, shape, fan_in), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(c_out), requires_grad=True)


def linear_params(params: Params, name: str, rng, n_in: int, n_out: int) -> None:
    params[f"{name}.w"] = Tensor(kaiming_uniform(rng, (n_out, n_in), n_in), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(n_out), requires_grad=True)


def count(params: Params, prefix: str = "") -> int:
    return sum(t.size for name, t in params.items() if name.startswith(prefix))


def copy_params(params: Params) -> Params:
    return {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in params.items()}


def zero_grad(params: Params) -> None:
    for t in params.values():
        t.grad = None
