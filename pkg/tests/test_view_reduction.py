import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from garnet import tensor as T
from garnet import view_reduction as VR
from garnet.config import DESK, SMALL, TINY, IMBTrainConfig
from garnet.data import Viewpoint, generate_gt, make_objects, render_at, to_sample
from garnet.errors import ContractError
from garnet.model import GARNet
from garnet.tensor import Tensor


def oracle_fps(points, k):
    """Quadratic max-min scan in plain Python, distances squared, coordinates summed in order."""
    pts = [list(map(float, p)) for p in points]
    n, d = len(pts), len(pts[0])

    def sq(a, b):
        acc = 0.0
        for j in range(d):
            acc += (a[j] - b[j]) * (a[j] - b[j])
        return acc

    c = list(pts[0])
    for p in pts[1:]:
        for j in range(d):
            c[j] += p[j]
    c = [x / n for x in c]
    best, first = -1.0, 0
    for i in range(n):
        if sq(pts[i], c) > best:
            best, first = sq(pts[i], c), i
    chosen = [first]
    while len(chosen) < k:
        best, nxt = -1.0, None
        for i in range(n):
            if i in chosen:
                continue
            m = min(sq(pts[i], pts[s]) for s in chosen)
            if m > best:
                best, nxt = m, i
        chosen.append(nxt)
    return chosen


def test_fps_example_1d():
    assert VR.fps_select(np.array([[0.0], [1.0], [10.0]]), 2) == [2, 0]


def test_fps_identical_points_tie_break():
    assert VR.fps_select(np.ones((6, 3)), 4) == [0, 1, 2, 3]


def test_fps_full_selection_deterministic(rng):
    pts = rng.standard_normal((9, 4))
    a = VR.fps_select(pts, 9)
    assert sorted(a) == list(range(9)) and a == VR.fps_select(pts.copy(), 9)


def test_fps_range_errors():
    with pytest.raises(ContractError):
        VR.fps_select(np.zeros((3, 2)), 0)
    with pytest.raises(ContractError):
        VR.fps_select(np.zeros((3, 2)), 4)


def test_fps_matches_oracle_on_1000_sets():
    r = np.random.default_rng(77)
    for t in range(1000):
        n = int(r.integers(1, 65))
        d = int(r.integers(1, 9))
        if t % 3 == 0:
            pts = r.integers(-2, 3, size=(n, d)).astype(float)  # many exact ties and duplicates
        else:
            pts = r.standard_normal((n, d))
        k = int(r.integers(1, n + 1))
        assert VR.fps_select(pts, k) == oracle_fps(pts, k)


def test_pca_line_direction():
    t = np.linspace(-1, 1, 11)
    z = VR.pca_project(np.stack([t, t], 1), 1)
    direction = z[:, 0] / np.sqrt(2)
    np.testing.assert_allclose(np.abs(direction), np.abs(t) * 1.0, atol=1e-9)


def test_pca_preserves_distances_at_full_dim(rng):
    x = rng.standard_normal((12, 4))
    z = VR.pca_project(x, 4)
    dx = np.linalg.norm(x[:, None] - x[None], axis=-1)
    dz = np.linalg.norm(z[:, None] - z[None], axis=-1)
    assert np.max(np.abs(dx - dz)) < 1e-7


def test_pca_variances_match_eigendecomposition(rng):
    x = rng.standard_normal((40, 5)) @ np.diag([5, 3, 2, 1, 0.5])
    z = VR.pca_project(x, 5)
    var = z.var(axis=0)
    assert np.all(np.diff(var) <= 1e-9)
    xc = x - x.mean(0)
    eig = np.sort(np.linalg.eigvalsh(xc.T @ xc / len(x)))[::-1]
    np.testing.assert_allclose(var, eig, rtol=1e-6)
    # sign convention: the largest loading of each direction is positive
    comps = np.linalg.lstsq(xc, z, rcond=None)[0]
    for j in range(5):
        assert comps[np.argmax(np.abs(comps[:, j])), j] > 0


def test_pca_rank_deficiency():
    x = np.zeros((6, 3))
    x[:, 0] = np.arange(6)
    with pytest.raises(ContractError):
        VR.pca_project(x, 2)
    with pytest.raises(ContractError):
        VR.pca_project(np.ones((2, 3)), 3)


def test_imb_embed_examples():
    p = GARNet.init(DESK, 0).params
    z = {k: Tensor(np.zeros_like(v.data)) if k.endswith(".b") else v for k, v in p.items()}
    assert np.all(VR.imb_embed(Tensor(np.zeros((8, 16, 16))), z, DESK).data == 0)
    f = np.random.default_rng(0).random((8, 16, 16))
    out = VR.imb_embed(Tensor(np.stack([f, f])), p, DESK).data
    assert out.shape == (2, 5) and np.array_equal(out[0], out[1])
    with pytest.raises(ContractError):
        VR.imb_embed(Tensor(np.zeros((4, 16, 16))), p, DESK)


def test_imb_loss_examples():
    same = [np.zeros(5)] * 3
    maps = [np.ones((2, 2))] * 3
    assert VR.imb_loss(same, maps).item() == 0.0
    p = [np.array([0.0, 0.0]), np.array([3.0, 4.0])]  # distance 5
    q = [np.zeros(5), np.ones(5)]  # L1 distance 5
    assert VR.imb_loss(p, q, "per_pair_abs").item() == 0.0
    assert VR.imb_loss(p, q, "literal").item() == 0.0
    p = [np.array([0.0]), np.array([3.0])]
    q = [np.zeros(1), np.ones(1)]
    assert VR.imb_loss(p, q).item() == 4.0
    with pytest.raises(ContractError):
        VR.imb_loss([np.zeros(2)], [np.zeros(2)])


@given(st.integers(0, 2**32 - 1), st.integers(2, 6))
def test_per_pair_abs_bounds_literal(seed, n):
    r = np.random.default_rng(seed)
    pts = r.standard_normal((n, 3))
    maps = r.random((n, 7))
    assert VR.imb_loss(pts, maps, "per_pair_abs").item() >= VR.imb_loss(pts, maps, "literal").item() - 1e-12


def test_imb_loss_gradient(rng):
    q = np.abs(rng.standard_normal((4, 4)))
    q = q + q.T
    np.fill_diagonal(q, 0)
    assert T.grad_check(lambda t: VR.imb_loss(t, q_dist=q), rng.standard_normal((4, 5))) < 1e-4


def test_score_map_distances_are_l1(rng):
    maps = rng.random((3, 1, 4, 4, 4))
    d = VR.score_map_distances(maps)
    assert d[0, 2] == pytest.approx(np.abs(maps[0] - maps[2]).sum(), abs=1e-12)
    assert np.all(np.diag(d) == 0) and np.array_equal(d, d.T)


# ---------------------------------------------------------------- cost model


def test_conv_and_linear_hand_counts():
    assert VR._conv_macs(2, 4, 3, 3, 8) == 110_592
    imb = [l for l in VR.layer_table(DESK) if l.name == "imb.l2"][0]
    assert imb.macs == 16 * 5 == 80


def test_cost_model_totals_are_sums_of_layers():
    cost = VR.mac_count(DESK)
    by_bucket = {}
    for l in cost.layers:
        by_bucket[l.bucket] = by_bucket.get(l.bucket, 0) + l.macs
    assert by_bucket["pre_imb"] == cost.macs_pre_imb
    assert by_bucket["imb"] == cost.macs_imb
    assert by_bucket["post_imb"] == cost.macs_post_imb_per_branch
    assert by_bucket["refiner"] == cost.macs_refiner
    assert all(l.macs >= 0 for l in cost.layers)


@pytest.mark.parametrize("cfg", [TINY, DESK], ids=["tiny", "desk"])
@pytest.mark.parametrize("n", [1, 3])
def test_cost_model_matches_executed_macs(cfg, n, rng):
    # second traversal: MACs recorded while actually running the network
    model = GARNet.init(cfg, 0)
    imgs = rng.random((n, 3, cfg.image_size, cfg.image_size))
    cost = VR.mac_count(cfg)
    with T.no_grad(), T.count_macs() as log:
        model.forward(imgs)
    expected = n * (cost.macs_pre_imb + cost.macs_post_imb_per_branch) + cost.macs_fusion(n) + cost.macs_refiner
    assert sum(m for _, m in log) == expected
    with T.no_grad(), T.count_macs() as log:
        VR.embed_views(model, imgs)
    assert sum(m for _, m in log) == n * (cost.macs_pre_imb + cost.macs_imb)


def test_total_cost_properties():
    cost = VR.mac_count(DESK)
    for method in VR.METHODS:
        vals = [cost.total_cost(24, n, method) for n in range(1, 25)]
        assert all(b > a for a, b in zip(vals, vals[1:]))
    for n in (3, 4, 5):
        gap = cost.total_cost(24, n, "imb_fps") - cost.total_cost(24, n, "random")
        assert gap == 24 * (cost.macs_pre_imb + cost.macs_imb) - n * cost.macs_pre_imb
    assert cost.macs_fusion(1) == 0
    with pytest.raises(ContractError):
        cost.total_cost(4, 5, "random")


def test_max_branches():
    cost = VR.mac_count(DESK)
    assert cost.max_branches(24, math.inf, "imb_fps") == 24
    assert cost.max_branches(24, 0, "random") == 0
    b = cost.total_cost(24, 7, "random")
    assert cost.max_branches(24, b, "random") == 7
    assert cost.max_branches(24, b - 1, "random") == 6


# ---------------------------------------------------------------- selection


@pytest.fixture(scope="module")
def tiny_model():
    return GARNet.init(SMALL, 4)


@pytest.fixture(scope="module")
def tiny_samples():
    return [to_sample(o) for o in make_objects(4, 8, seed=3, image_size=16)]


def test_select_views_contracts(tiny_model, tiny_samples):
    imgs = tiny_samples[0].images
    for m in VR.METHODS:
        assert VR.select_views(tiny_model, imgs, 8, m) == list(range(8))
        idx = VR.select_views(tiny_model, imgs, 3, m, seed=1)
        assert len(set(idx)) == 3 and idx == sorted(idx)
        assert VR.reduce_views(tiny_model, imgs, 3, m, seed=1).shape == (3,) + imgs.shape[1:]
    with pytest.raises(ContractError):
        VR.select_views(tiny_model, imgs, 9, "random")
    with pytest.raises(ContractError):
        VR.select_views(tiny_model, imgs, 2, "bogus")


def test_seed_dependence(tiny_model, tiny_samples):
    imgs = tiny_samples[0].images
    assert VR.select_views(tiny_model, imgs, 3, "imb_fps", 0) == VR.select_views(tiny_model, imgs, 3, "imb_fps", 9)
    assert VR.select_views(tiny_model, imgs, 3, "random", 5) == VR.select_views(tiny_model, imgs, 3, "random", 5)
    picks = {tuple(VR.select_views(tiny_model, imgs, 3, "random", s)) for s in range(10)}
    assert len(picks) > 1


def test_imb_fps_picks_one_view_per_cluster():
    model = GARNet.init(DESK, 2)
    gt = generate_gt(np.random.default_rng(8))
    centers = [(0.3, 0.1), (1.9, 0.6), (3.5, -0.3), (5.0, 0.9)]
    vps = [Viewpoint(a + da, e) for a, e in centers for da in (0.0, 1e-3)]
    imgs = np.stack(render_at(gt, vps))
    emb = VR.embed_views(model, imgs)
    d = np.linalg.norm(emb[:, None] - emb[None], axis=-1)
    cluster = np.repeat(np.arange(4), 2)
    same = cluster[:, None] == cluster[None]
    # embedding-distance oracle: the clusters are separated in the embedding
    assert d[same].max() < d[~same].min()
    sel = VR.select_views(model, imgs, 4, "imb_fps")
    assert sorted(cluster[sel]) == [0, 1, 2, 3]


# ---------------------------------------------------------------- IMB training and tradeoff


def test_imb_lr_schedule():
    cfg = IMBTrainConfig()
    assert VR.imb_lr(0, cfg) == 2e-3
    assert VR.imb_lr(10, cfg) == pytest.approx(2e-5, rel=1e-12)


def test_train_imb_touches_only_imb(tiny_samples):
    model = GARNet.init(SMALL, 6)
    before = {k: v.data.copy() for k, v in model.params.items()}
    probe = tiny_samples[0].images[:3]
    out_before = model.predict(probe)
    res = VR.train_imb(model, tiny_samples, IMBTrainConfig(epochs=3, objects_per_iter=2))
    assert len(res.stress) == 4 and res.lrs == [2e-3] * 3
    for k, v in model.params.items():
        if k.startswith("imb."):
            continue
        assert v.data.tobytes() == before[k].tobytes(), k
    assert any(not np.array_equal(model.params[k].data, before[k]) for k in model.names("imb"))
    assert model.predict(probe).tobytes() == out_before.tobytes()


def test_tradeoff_records(tiny_model, tiny_samples):
    recs = VR.tradeoff_curve(tiny_model, tiny_samples, 8, [1.0, math.inf], ("imb_fps", "random"))
    assert [(r.method, r.feasible) for r in recs] == [("imb_fps", False), ("random", False), ("imb_fps", True), ("random", True)]
    assert math.isnan(recs[0].mean_iou)
    assert recs[2].n == recs[3].n == 8 and recs[2].mean_iou == recs[3].mean_iou
    assert recs[2].line().split(", ")[1:3] == ["imb_fps", "8"]
