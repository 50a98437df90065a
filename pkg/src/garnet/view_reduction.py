"""View reduction by diversity maximization, and the compute-cost model.

The isometric mapping block (IMB) embeds each view's early encoder feature
(the output of the first residual block) into a small Euclidean space whose
pairwise distances are trained to follow the L1 distances between the views'
post-merger score maps. Farthest point sampling in that space then keeps a
diverse subset of views. Random sampling, FPS on raw early features and FPS
after PCA are the baselines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import encoder
from . import tensor as T
from .config import IMBTrainConfig, ModelConfig
from .errors import ContractError
from .nn import Params, linear_params
from .tensor import Tensor

if TYPE_CHECKING:
    from .data import Sample
    from .model import GARNet

METHODS = ("random", "fps_direct", "pca_fps", "imb_fps")

# ---------------------------------------------------------------- IMB


def imb_plan(cfg: ModelConfig) -> list[tuple[int, int]]:
    dims = [2 * cfg.stem_channels, *cfg.imb_hidden, cfg.embed_dim]
    return list(zip(dims[:-1], dims[1:]))


def init_imb_params(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    p: Params = {}
    for i, (a, b) in enumerate(imb_plan(cfg)):
        linear_params(p, f"imb.l{i}", rng, a, b)
    return p


def imb_embed(early: Tensor, p: Params, cfg: ModelConfig) -> Tensor:
    """(C_e, h, w) -> (d,), or a batch (B, C_e, h, w) -> (B, d)."""
    c = cfg.stem_channels
    if early.shape[-3] != c or early.ndim not in (3, 4):
        raise ContractError(f"imb_embed expects ({c}, h, w) early features, got {early.shape}")
    batched = early.ndim == 4
    x = T.concat(
        [
            T.pool(early, "max", "global-spatial", batched=batched),
            T.pool(early, "avg", "global-spatial", batched=batched),
        ],
        axis=-1,
    )
    n = len(imb_plan(cfg))
    for i in range(n):
        x = T.linear(x, p[f"imb.l{i}.w"], p[f"imb.l{i}.b"])
        if i < n - 1:
            x = T.leaky_relu(x, 0.2)
    return x


def score_map_distances(maps: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    """Pairwise L1 distances between flattened score maps, (n, n)."""
    q = np.asarray([np.asarray(m.data if isinstance(m, Tensor) else m).ravel() for m in maps])
    out = np.zeros((len(q), len(q)))
    for i in range(len(q)):
        out[i] = np.abs(q - q[i]).sum(axis=1)
    return out


def imb_loss(points, score_maps=None, mode: str = "per_pair_abs", q_dist: np.ndarray | None = None) -> Tensor:
    """Distance-matching loss over all ordered pairs.

    ``per_pair_abs``: sum_ij | ||P_i - P_j||_2 - ||Q_i - Q_j||_1 |.
    ``literal``: | sum_ij ( ||P_i - P_j||_2 - ||Q_i - Q_j||_1 ) |.
    Pass either the score maps or their precomputed distance matrix ``q_dist``.
    """
    if not isinstance(points, Tensor):
        points = T.stack([T.as_tensor(pt) for pt in points])
    n = points.shape[0]
    if n < 2:
        raise ContractError("imb_loss needs at least 2 views")
    if q_dist is None:
        if score_maps is None or len(score_maps) != n:
            raise ContractError("imb_loss needs one score map per point")
        q_dist = score_map_distances(score_maps)
    d = points.shape[1]
    diff = T.reshape(points, (n, 1, d)) - T.reshape(points, (1, n, d))
    gap = T.norm(diff, axis=-1) - q_dist
    if mode == "per_pair_abs":
        return T.reduce_sum(T.absolute(gap))
    if mode == "literal":
        return T.absolute(T.reduce_sum(gap))
    raise ContractError(f"unknown imb_loss mode {mode!r}")


# ---------------------------------------------------------------- sampling


def _sq_dist_to(points: np.ndarray, ref: np.ndarray) -> np.ndarray:
    # coordinates accumulated in order so the result is reproducible bit for bit
    acc = np.zeros(len(points))
    for j in range(points.shape[1]):
        diff = points[:, j] - ref[j]
        acc += diff * diff
    return acc


def fps_select(points, k: int) -> list[int]:
    """Greedy max-min selection.

    Starts at the point farthest from the centroid, then repeatedly takes the
    point with the largest distance to its nearest selected point. Ties go to
    the lowest index.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ContractError(f"fps_select expects (N, d) points, got shape {pts.shape}")
    n = len(pts)
    if not 1 <= k <= n:
        raise ContractError(f"fps_select: k={k} outside [1, {n}]")
    centroid = pts[0].copy()
    for row in pts[1:]:
        centroid += row
    centroid /= n
    chosen = [int(np.argmax(_sq_dist_to(pts, centroid)))]
    nearest = _sq_dist_to(pts, pts[chosen[0]])
    taken = np.zeros(n, dtype=bool)
    taken[chosen[0]] = True
    while len(chosen) < k:
        cand = np.where(taken, -1.0, nearest)
        nxt = int(np.argmax(cand))
        chosen.append(nxt)
        taken[nxt] = True
        nearest = np.minimum(nearest, _sq_dist_to(pts, pts[nxt]))
    return chosen


def pca_project(features, d: int, tol: float = 1e-9, max_iter: int = 1000) -> np.ndarray:
    """Project onto the top-``d`` principal directions found by power iteration with deflation.

    Each direction's sign is fixed so its largest-magnitude loading is positive.
    Returns (M, d) coordinates.
    """
    x = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    if len(x) < d:
        raise ContractError(f"pca_project needs at least {d} samples, got {len(x)}")
    x = x - x.mean(axis=0)
    scale = np.sum(x * x)
    rng = np.random.default_rng(0)
    comps: list[np.ndarray] = []
    for _ in range(d):
        v = rng.standard_normal(x.shape[1])
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = x.T @ (x @ v)
            for c in comps:
                w -= (c @ w) * c
            lam = np.linalg.norm(w)
            if lam <= 1e-12 * max(scale, 1e-300):
                break
            w /= lam
            done = np.linalg.norm(w - v) < tol
            v = w
            if done:
                break
        if lam <= 1e-12 * max(scale, 1e-300):
            break
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        comps.append(v)
    if len(comps) < d:
        raise ContractError(f"features have rank {len(comps)} < requested {d} components")
    return x @ np.stack(comps, axis=1)


# ---------------------------------------------------------------- cost model


@dataclass
class LayerCost:
    name: str
    bucket: str  # pre_imb | imb | post_imb | premerge | postmerge | refiner
    macs: int


@dataclass
class CostModel:
    layers: list[LayerCost]
    macs_pre_imb: int = 0
    macs_imb: int = 0
    macs_post_imb_per_branch: int = 0
    macs_premerge_per_branch: int = 0
    macs_postmerge_per_branch: int = 0
    macs_d2: int = 0
    macs_refiner: int = 0

    def macs_fusion(self, n: int) -> int:
        """Mergers for n branches plus the decoder pass of the fused branch; zero for one view."""
        if n < 2:
            return 0
        return n * (self.macs_premerge_per_branch + self.macs_postmerge_per_branch) + self.macs_d2

    def total_cost(self, big_n: int, n: int, method: str) -> int:
        if not 1 <= n <= big_n:
            raise ContractError(f"need 1 <= n <= N, got n={n}, N={big_n}")
        back = n * self.macs_post_imb_per_branch + self.macs_fusion(n) + self.macs_refiner
        if method == "imb_fps":
            return big_n * (self.macs_pre_imb + self.macs_imb) + back
        if method in ("fps_direct", "pca_fps"):
            return big_n * self.macs_pre_imb + back
        if method == "random":
            return n * self.macs_pre_imb + back
        raise ContractError(f"unknown method {method!r}")

    def max_branches(self, big_n: int, budget: float, method: str) -> int:
        """Largest affordable n, or 0 when even one branch exceeds the budget."""
        best = 0
        for n in range(1, big_n + 1):
            if self.total_cost(big_n, n, method) <= budget:
                best = n
        return best


def _conv_macs(c_in, c_out, k, dims, out_size):
    return c_out * c_in * k**dims * out_size**dims


def layer_table(cfg: ModelConfig) -> list[LayerCost]:
    """Per-layer MACs: C_out * C_in * k^dims * output volume for convs, in*out for linears."""
    h = cfg.image_size
    c, cb = cfg.stem_channels, cfg.block_b_channels
    L = []
    L.append(LayerCost("encoder.stem", "pre_imb", _conv_macs(3, c, 3, 2, h)))
    L.append(LayerCost("encoder.a1", "pre_imb", _conv_macs(c, c, 3, 2, h // 2)))
    L.append(LayerCost("encoder.a2", "pre_imb", _conv_macs(c, c, 3, 2, h // 2)))
    for name, (a, b) in zip((f"imb.l{i}" for i in range(99)), imb_plan(cfg)):
        L.append(LayerCost(name, "imb", a * b))
    L.append(LayerCost("encoder.b1", "post_imb", _conv_macs(c, cb, 3, 2, h // 4)))
    L.append(LayerCost("encoder.b2", "post_imb", _conv_macs(cb, cb, 3, 2, h // 4)))
    L.append(LayerCost("encoder.bskip", "post_imb", _conv_macs(c, cb, 1, 2, h // 4)))
    size = h // 4
    for i, (ci, co, s) in enumerate(encoder.tail_plan(cfg)):
        size = (size + 2 - 3) // 2 + 1 if s == 2 else size
        L.append(LayerCost(f"encoder.tail{i}", "post_imb", _conv_macs(ci, co, 3 if s == 2 else 1, 2, size)))
    L.append(LayerCost("decoder1.t0", "post_imb", _conv_macs(cfg.seed_channels, cfg.d1_channels, 4, 3, 4)))
    ci, size = cfg.d1_channels, 4
    for i, co in enumerate(cfg.d2_channels):
        size *= 2
        L.append(LayerCost(f"decoder2.t{i}", "post_imb", _conv_macs(ci, co, 4, 3, size)))
        ci = co
    L.append(LayerCost("decoder2.head", "post_imb", _conv_macs(ci, 1, 1, 3, size)))
    L.append(LayerCost("premerge.channel", "premerge", 2 * _conv_macs(1, 1, cfg.eca_kernel, 1, cfg.d1_channels)))
    L.append(LayerCost("premerge.spatial", "premerge", _conv_macs(2, 1, 3, 3, 4)))
    from .generator import post_plan

    vs = cfg.volume_size
    for i, (a, b) in enumerate(post_plan(cfg)):
        L.append(LayerCost(f"postmerge.c{i}", "postmerge", _conv_macs(a, b, 3, 3, vs)))
    r1, r2 = cfg.refiner_channels
    c3 = cfg.d2_channels[-1]
    L.append(LayerCost("refiner.down1", "refiner", _conv_macs(1, r1, 4, 3, vs // 2)))
    L.append(LayerCost("refiner.down2", "refiner", _conv_macs(r1, r2, 4, 3, vs // 4)))
    for i in range(cfg.refiner_res_blocks):
        L.append(LayerCost(f"refiner.res{i}a", "refiner", _conv_macs(r2, r2, 3, 3, vs // 4)))
        L.append(LayerCost(f"refiner.res{i}b", "refiner", _conv_macs(r2, r2, 3, 3, vs // 4)))
    L.append(LayerCost("refiner.up1", "refiner", _conv_macs(r2, r1, 4, 3, vs // 2)))
    L.append(LayerCost("refiner.merge1", "refiner", _conv_macs(2 * r1, r1, 3, 3, vs // 2)))
    L.append(LayerCost("refiner.up2", "refiner", _conv_macs(r1, c3, 4, 3, vs)))
    L.append(LayerCost("refiner.merge2", "refiner", _conv_macs(c3, c3, 3, 3, vs)))
    L.append(LayerCost("refiner.out", "refiner", _conv_macs(c3, 1, 3, 3, vs)))
    return L


def mac_count(cfg: ModelConfig) -> CostModel:
    layers = layer_table(cfg)

    def total(bucket, prefix=None):
        return sum(l.macs for l in layers if l.bucket == bucket and (prefix is None or l.name.startswith(prefix)))

    return CostModel(
        layers=layers,
        macs_pre_imb=total("pre_imb"),
        macs_imb=total("imb"),
        macs_post_imb_per_branch=total("post_imb"),
        macs_premerge_per_branch=total("premerge"),
        macs_postmerge_per_branch=total("postmerge"),
        macs_d2=total("post_imb", "decoder2."),
        macs_refiner=total("refiner"),
    )


# ---------------------------------------------------------------- reduction


def early_feature_batch(model: "GARNet", images: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return encoder.early_features(Tensor(images), model.params, model.cfg).data


def embed_views(model: "GARNet", images: np.ndarray) -> np.ndarray:
    with T.no_grad():
        early = encoder.early_features(Tensor(images), model.params, model.cfg)
        return imb_embed(early, model.params, model.cfg).data


def select_views(model: "GARNet", images: np.ndarray, k: int, method: str, seed: int = 0) -> list[int]:
    """Indices of the ``k`` retained views, in their original order."""
    n = len(images)
    if not 1 <= k <= n:
        raise ContractError(f"cannot keep {k} of {n} views")
    if method not in METHODS:
        raise ContractError(f"unknown reduction method {method!r}")
    if k == n:
        return list(range(n))
    if method == "random":
        idx = np.random.default_rng([seed, 29]).choice(n, size=k, replace=False)
    elif method == "fps_direct":
        idx = fps_select(early_feature_batch(model, images).reshape(n, -1), k)
    elif method == "pca_fps":
        idx = fps_select(pca_project(early_feature_batch(model, images), model.cfg.embed_dim), k)
    else:
        idx = fps_select(embed_views(model, images), k)
    return sorted(int(i) for i in idx)


def reduce_views(model: "GARNet", images: np.ndarray, k: int, method: str, seed: int = 0) -> np.ndarray:
    return images[select_views(model, images, k, method, seed)]


# ---------------------------------------------------------------- IMB training


def post_score_distances(model: "GARNet", images: np.ndarray) -> np.ndarray:
    """L1 distances between post-merger score maps computed with every view present."""
    with T.no_grad():
        rec = model.forward(images)
    return score_map_distances([s.data for s in rec.gen.post_scores])


@dataclass
class IMBTrainingResult:
    stress: list[float]  # full-set mean stress before training and after each epoch
    lrs: list[float] = field(default_factory=list)
    target_scale: float = 1.0  # score-map distances were divided by this


def imb_lr(epoch: int, cfg: IMBTrainConfig) -> float:
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


def _mean_stress(model, feats, dists, mode) -> float:
    with T.no_grad():
        vals = [
            imb_loss(imb_embed(Tensor(f), model.params, model.cfg), mode=mode, q_dist=d).item()
            for f, d in zip(feats, dists)
        ]
    return float(np.mean(vals))


def train_imb(model: "GARNet", samples: Sequence["Sample"], cfg: IMBTrainConfig = IMBTrainConfig(), log=None) -> IMBTrainingResult:
    """Fit the IMB parameters of ``model`` against its frozen reconstruction network.

    Only ``imb.*`` parameters change. Each iteration averages the loss over
    ``cfg.objects_per_iter`` objects with all their views. With
    ``cfg.normalize_targets`` every target distance is divided by the mean
    off-diagonal target over the whole set; L1 distances between 32^3 score
    maps are in the thousands, far out of reach of a freshly initialised
    embedding, and a global scale does not change what FPS selects.
    """
    from .training import Adam

    feats = [early_feature_batch(model, s.images) for s in samples]
    dists = [post_score_distances(model, s.images) for s in samples]
    scale = 1.0
    if cfg.normalize_targets:
        off = np.concatenate([d[~np.eye(len(d), dtype=bool)] for d in dists])
        scale = float(off.mean()) if off.size and off.mean() > 0 else 1.0
        dists = [d / scale for d in dists]
    names = model.names("imb")
    opt = Adam({k: model.params[k] for k in names})
    rng = np.random.default_rng([cfg.seed, 41])
    result = IMBTrainingResult([_mean_stress(model, feats, dists, cfg.mode)], target_scale=scale)
    if log is not None:
        log(f"imb epoch 0 target_scale {scale:.6g} stress {result.stress[0]:.6f}")
    for epoch in range(cfg.epochs):
        lr = imb_lr(epoch, cfg)
        result.lrs.append(lr)
        order = rng.permutation(len(samples))
        for start in range(0, len(order), cfg.objects_per_iter):
            batch = order[start : start + cfg.objects_per_iter]
            for k in names:
                model.params[k].grad = None
            for i in batch:
                pts = imb_embed(Tensor(feats[i]), model.params, model.cfg)
                (imb_loss(pts, mode=cfg.mode, q_dist=dists[i]) * (1.0 / len(batch))).backward()
            opt.step({k: lr for k in names})
        result.stress.append(_mean_stress(model, feats, dists, cfg.mode))
        if log is not None:
            log(f"imb epoch {epoch + 1} lr {lr:.3g} stress {result.stress[-1]:.6f}")
    return result


# ---------------------------------------------------------------- tradeoff


@dataclass
class TradeoffRecord:
    budget_macs: float
    method: str
    n: int
    mean_iou: float
    mean_fscore: float

    @property
    def feasible(self) -> bool:
        return self.n > 0

    def line(self) -> str:
        return f"{self.budget_macs:.6g}, {self.method}, {self.n}, {self.mean_iou:.6f}, {self.mean_fscore:.6f}"


def evaluate_reduced(model: "GARNet", samples, big_n: int, n: int, method: str, seed: int = 0) -> tuple[float, float, list[float]]:
    """Mean IoU / F-score after reducing the first ``big_n`` views of every sample to ``n``."""
    from .metrics import binarize, fscore_1pct, iou

    ious, fs = [], []
    for j, s in enumerate(samples):
        imgs = s.images[:big_n]
        keep = select_views(model, imgs, n, method, seed=seed + j)
        pred = binarize(model.predict(imgs[keep]), model.cfg.threshold)
        ious.append(iou(pred, s.gt))
        fs.append(fscore_1pct(pred, s.gt))
    return float(np.mean(ious)), float(np.mean(fs)), ious


def tradeoff_curve(
    model: "GARNet",
    samples,
    big_n: int,
    budgets: Sequence[float],
    methods: Sequence[str] = ("imb_fps", "random"),
    seed: int = 0,
) -> list[TradeoffRecord]:
    cost = mac_count(model.cfg)
    cache: dict[tuple[str, int], tuple[float, float]] = {}
    out = []
    for budget in budgets:
        for method in methods:
            n = cost.max_branches(big_n, budget, method)
            if n == 0:
                out.append(TradeoffRecord(float(budget), method, 0, math.nan, math.nan))
                continue
            if (method, n) not in cache:
                cache[(method, n)] = evaluate_reduced(model, samples, big_n, n, method, seed)[:2]
            mi, mf = cache[(method, n)]
            out.append(TradeoffRecord(float(budget), method, n, mi, mf))
    return out
