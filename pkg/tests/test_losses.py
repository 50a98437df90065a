import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from garnet import tensor as T
from garnet.config import LossWeights
from garnet.errors import ContractError
from garnet.losses import EPS, bce_loss, loss_terms, precision_loss, recall_loss, total_loss
from garnet.tensor import Tensor


def loop_bce(p, g):
    acc = 0.0
    for pi, gi in zip(p.ravel(), g.ravel()):
        q = min(max(pi, 1e-7), 1 - 1e-7)
        acc += -(gi * math.log(q) + (1 - gi) * math.log(1 - q))
    return acc / p.size


def loop_overlap(p, g):
    inter = tot_p = tot_g = 0.0
    for pi, gi in zip(p.ravel(), g.ravel()):
        inter += pi * gi
        tot_p += pi
        tot_g += gi
    return inter, tot_p, tot_g


def loop_total(c, f, g, w, phase):
    val = w.alpha * loop_bce(c, g) + w.beta * loop_bce(f, g)
    if phase == "full":
        inter, tp, tg = loop_overlap(f, g)
        val += w.gamma * (1 - inter / (tg + EPS)) + w.mu * (1 - inter / (tp + EPS))
    return val


def random_case(r):
    shape = tuple(r.integers(1, 6, size=3))
    g = (r.random(shape) < r.uniform(0.05, 0.9)).astype(float)
    g.flat[r.integers(g.size)] = 1.0
    mode = r.integers(3)
    p = r.random(shape) if mode else r.choice([0.0, 1.0, 1e-9, 1 - 1e-9], size=shape)
    return p, g


def test_loss_terms_match_loop_oracles_on_1000_grids():
    r = np.random.default_rng(99)
    worst = 0.0
    for _ in range(1000):
        p, g = random_case(r)
        inter, tp, tg = loop_overlap(p, g)
        worst = max(
            worst,
            abs(bce_loss(Tensor(p), g).item() - loop_bce(p, g)),
            abs(recall_loss(Tensor(p), g).item() - (1 - inter / (tg + EPS))),
            abs(precision_loss(Tensor(p), g).item() - (1 - inter / (tp + EPS))),
        )
    assert worst < 1e-12


def test_bce_examples(rng):
    g = (rng.random((4, 4, 4)) < 0.4).astype(float)
    assert bce_loss(Tensor(g), g).item() <= 1e-6
    assert bce_loss(Tensor(np.full((4, 4, 4), 0.5)), g).item() == pytest.approx(math.log(2), abs=1e-15)


def test_recall_examples(rng):
    g = (rng.random((4, 4, 4)) < 0.4).astype(float)
    g[0, 0, 0] = 1
    assert recall_loss(Tensor(g), g).item() < 1e-7
    assert recall_loss(Tensor(np.zeros_like(g)), g).item() == 1.0


def test_recall_at_half_is_one_half():
    r = np.random.default_rng(4)
    for _ in range(100):
        g = (r.random((5, 5, 5)) < r.uniform(0.01, 1)).astype(float)
        g.flat[0] = 1
        got = recall_loss(Tensor(np.full(g.shape, 0.5)), g).item()
        # bitwise equal to the closed form with its eps guard; within eps/G of the ideal 0.5
        assert got == 1.0 - (0.5 * g.sum()) / (g.sum() + EPS)
        assert abs(got - 0.5) <= EPS / g.sum()


def test_precision_at_one_is_one_minus_q():
    r = np.random.default_rng(5)
    for _ in range(100):
        g = (r.random((5, 5, 5)) < r.uniform(0.01, 1)).astype(float)
        q = g.sum() / g.size
        got = precision_loss(Tensor(np.ones(g.shape)), g).item()
        assert got == 1.0 - g.sum() / (g.size + EPS)
        assert abs(got - (1 - q)) <= EPS


def test_precision_limit_and_perfect(rng):
    g = (rng.random((4, 4, 4)) < 0.4).astype(float)
    g.flat[0] = 1
    assert precision_loss(Tensor(g), g).item() < 1e-7
    assert precision_loss(Tensor(np.zeros(g.shape)), g).item() == 1.0
    assert precision_loss(Tensor(np.full(g.shape, 1e-15)), g).item() == pytest.approx(1.0, abs=1e-5)


def test_empty_gt_rejected_for_recall():
    with pytest.raises(ContractError):
        recall_loss(Tensor(np.full((2, 2), 0.5)), np.zeros((2, 2)))


def test_shape_mismatch_rejected():
    with pytest.raises(ContractError):
        bce_loss(Tensor(np.full((2, 2), 0.5)), np.zeros((2, 3)))


def test_total_loss_cases():
    g = np.zeros((4, 4, 4))
    g[:2, :2, :2] = 1  # q = 1/8
    half = Tensor(np.full(g.shape, 0.5))
    w = LossWeights()
    assert total_loss(Tensor(g), Tensor(g), g, w, "full").item() <= 1e-5
    got = total_loss(half, half, g, w, "full").item()
    assert abs(got - loop_total(half.data, half.data, g, w, "full")) < 1e-12
    zero = LossWeights(10, 10, 0, 0)
    assert total_loss(half, half, g, zero, "full").item() == total_loss(half, half, g, w, "bce_only").item()
    with pytest.raises(ContractError):
        total_loss(half, half, g, w, "other")


def test_recall_precision_apply_to_fine_only(rng):
    g = (rng.random((4, 4, 4)) < 0.5).astype(float)
    g.flat[0] = 1
    c, f = Tensor(rng.random(g.shape)), Tensor(rng.random(g.shape))
    terms = loss_terms(c, f, g)
    expected = 10 * terms["bce_coarse"].item() + 10 * terms["bce_fine"].item() + 0.5 * terms["recall"].item() + 0.5 * terms["precision"].item()
    assert total_loss(c, f, g).item() == pytest.approx(expected, abs=1e-12)
    assert terms["recall"].item() == recall_loss(f, g).item()


@given(st.integers(0, 2**32 - 1))
def test_terms_nonnegative_and_bounded(seed):
    r = np.random.default_rng(seed)
    p, g = random_case(r)
    terms = loss_terms(Tensor(p), Tensor(p), g)
    assert all(t.item() >= 0 for t in terms.values())
    assert terms["recall"].item() <= 1 + 1e-7 and terms["precision"].item() <= 1 + 1e-7


@pytest.mark.parametrize("phase", ["bce_only", "full"])
def test_total_loss_gradient(rng, phase):
    g = (rng.random((3, 4, 4)) < 0.4).astype(float)
    g.flat[0] = 1
    c = rng.uniform(0.05, 0.95, g.shape)
    f = rng.uniform(0.05, 0.95, g.shape)
    assert T.grad_check(lambda t: total_loss(t, Tensor(f), g, LossWeights(), phase), c) < 1e-4
    assert T.grad_check(lambda t: total_loss(Tensor(c), t, g, LossWeights(), phase), f) < 1e-4
