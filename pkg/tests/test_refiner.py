import numpy as np
import pytest

from garnet import refiner
from garnet import tensor as T
from garnet.config import DESK, TINY
from garnet.errors import ContractError
from garnet.gradcheck import check_module
from garnet.model import GARNet
from garnet.tensor import Tensor


def test_identity_at_init_desk(rng):
    p = GARNet.init(DESK, 0).params
    vc = rng.uniform(1e-4, 1 - 1e-4, (1, 32, 32, 32))
    out = refiner.refine(Tensor(vc), p, DESK).data
    assert out.shape == vc.shape
    assert np.max(np.abs(out - vc)) < 1e-9


def test_output_strictly_inside_unit_interval(rng):
    p = GARNet.init(TINY, 0).params
    # logits stay well inside the range where float64 sigmoid is not rounded to 0 or 1
    p["refiner.out.w"].data = rng.standard_normal(p["refiner.out.w"].shape)
    vc = rng.choice([0.0, 1.0, 0.5], size=(1, 16, 16, 16))
    out = refiner.refine(Tensor(vc), p, TINY).data
    assert np.all((out > 0) & (out < 1))


def test_batched_matches_single(rng):
    p = GARNet.init(TINY, 1).params
    p["refiner.out.w"].data = rng.standard_normal(p["refiner.out.w"].shape)
    vc = rng.random((2, 1, 16, 16, 16))
    both = refiner.refine(Tensor(vc), p, TINY).data
    for i in range(2):
        np.testing.assert_allclose(both[i], refiner.refine(Tensor(vc[i]), p, TINY).data, atol=1e-12)


def test_shape_contract():
    p = GARNet.init(TINY, 0).params
    with pytest.raises(ContractError):
        refiner.refine(Tensor(np.full((1, 8, 8, 8), 0.5)), p, TINY)


@pytest.mark.parametrize("seed", [0, 1])
def test_refiner_gradients(seed):
    assert all(r.ok for r in check_module("refiner", seed))
