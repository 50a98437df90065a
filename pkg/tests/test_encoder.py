import numpy as np
import pytest

from garnet import encoder
from garnet import tensor as T
from garnet.config import DESK, TINY
from garnet.errors import ContractError
from garnet.model import GARNet
from garnet.tensor import Tensor


@pytest.fixture(scope="module")
def desk_params():
    return GARNet.init(DESK, 3).params


def zero_bias(p):
    q = dict(p)
    for k in q:
        if k.endswith(".b"):
            q[k] = Tensor(np.zeros_like(q[k].data))
    return q


def test_zero_image_shapes(desk_params):
    out = encoder.encode_view(Tensor(np.zeros((3, 32, 32))), zero_bias(desk_params), DESK)
    assert out.early_feature.shape == (8, 16, 16)
    assert out.seed.shape == (32, 2, 2, 2)
    assert np.all(np.isfinite(out.seed.data))


def test_identical_images_identical_outputs(desk_params, rng):
    img = rng.random((3, 32, 32))
    a = encoder.encode_views(Tensor(np.stack([img, img])), desk_params, DESK)
    assert np.array_equal(a.seed.data[0], a.seed.data[1])
    assert np.array_equal(a.early_feature.data[0], a.early_feature.data[1])


def test_pixel_perturbation_stays_in_receptive_field(desk_params, rng):
    # early feature cell (i, j) sees input rows 2i-2 .. 2i+2 (stem 3x3, then 3x3/s2, then 3x3, plus the pool skip)
    img = rng.random((3, 32, 32))
    base = encoder.early_features(Tensor(img[None]), desk_params, DESK).data[0]
    bumped = img.copy()
    bumped[:, 10, 20] = 1.0 - bumped[:, 10, 20]
    moved = encoder.early_features(Tensor(bumped[None]), desk_params, DESK).data[0]
    changed = np.argwhere(np.any(base != moved, axis=0))
    assert len(changed) > 0
    for i, j in changed:
        assert abs(2 * i - 10) <= 4 and abs(2 * j - 20) <= 4


def test_shapes_do_not_depend_on_pixels(rng):
    p = GARNet.init(TINY, 0).params
    for imgs in (np.zeros((2, 3, 16, 16)), rng.random((2, 3, 16, 16))):
        out = encoder.encode_views(Tensor(imgs), p, TINY)
        assert out.seed.shape == (2, TINY.seed_channels, 2, 2, 2)


def test_image_contract():
    p = GARNet.init(TINY, 0).params
    with pytest.raises(ContractError):
        encoder.encode_view(Tensor(np.zeros((3, 8, 8))), p, TINY)
    with pytest.raises(ContractError):
        encoder.encode_view(Tensor(np.full((3, 16, 16), 1.5)), p, TINY)


def test_reshape_index_map():
    flat = np.arange(8.0).reshape(2, 2, 2)
    vol = encoder.reshape_to_volume(Tensor(flat), 1).data
    assert vol.shape == (1, 2, 2, 2)
    assert sorted(vol.ravel()) == list(range(8))
    for c in range(2):
        for h in range(2):
            for w in range(2):
                assert vol[c % 1, c // 1, h, w] == flat[c, h, w]


def test_reshape_bijection_and_roundtrip(rng):
    flat = rng.standard_normal((6, 2, 2))
    vol = encoder.reshape_to_volume(Tensor(flat), 3).data
    for c in range(6):
        np.testing.assert_array_equal(vol[c % 3, c // 3], flat[c])
    back = encoder.volume_to_flat(Tensor(vol)).data
    assert np.array_equal(back, flat)
    assert vol.sum() == flat.sum()


def test_reshape_rejects_odd_channels():
    with pytest.raises(ContractError):
        encoder.reshape_to_volume(Tensor(np.zeros((3, 2, 2))), 1)


def test_translation_covariance_on_interior(rng):
    # the stem and block A are convolutional: shifting the input by 2 pixels shifts early features by 1 cell
    p = GARNet.init(DESK, 1).params
    img = rng.random((3, 32, 32))
    shifted = np.roll(img, 2, axis=2)
    a = encoder.early_features(Tensor(img[None]), p, DESK).data[0]
    b = encoder.early_features(Tensor(shifted[None]), p, DESK).data[0]
    np.testing.assert_allclose(b[:, 3:-3, 4:-3], a[:, 3:-3, 3:-4], atol=1e-12)
