"""Finite-difference verification of every differentiable module.

Each check builds a scalar objective from one module (a fixed random
projection of its output, so no coordinate cancels by symmetry), runs one
backward pass, then compares a sample of parameter and input coordinates
against central differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import encoder, generator, refiner, view_reduction
from . import tensor as T
from .config import TINY, LossWeights, ModelConfig
from .losses import total_loss
from .model import GARNet
from .tensor import Tensor

MODULES = ("encoder", "generator", "refiner", "losses", "imb", "model")
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    module: str
    name: str  # parameter or input name
    error: float
    probes: int = 0  # coordinates actually compared
    shrunk: int = 0  # of which needed a smaller eps to avoid a kink

    @property
    def ok(self) -> bool:
        return self.error < TOLERANCE and self.probes > 0

    def line(self) -> str:
        return f"{self.module}, {self.name}, {self.error:.3e}, {self.probes}, {self.shrunk}, {'ok' if self.ok else 'FAIL'}"


def _projection(rng, shape):
    r = rng.standard_normal(shape)
    return lambda y: T.reduce_sum(y * Tensor(r))


def _problem(module: str, cfg: ModelConfig, rng: np.random.Generator):
    """(leaves by name, objective) for one module; leaves are Tensors that may be perturbed."""
    model = GARNet.init(cfg, int(rng.integers(1 << 30)))
    p = model.params
    # zero biases put activations of all-zero receptive fields exactly on a kink
    for k, v in p.items():
        if k.endswith(".b"):
            v.data = 0.1 * rng.standard_normal(v.shape)
    s = cfg.volume_size
    if module == "encoder":
        images = Tensor(rng.uniform(0.1, 0.9, (2, 3, cfg.image_size, cfg.image_size)), requires_grad=True)
        proj = _projection(rng, (2, cfg.seed_channels, 2, 2, 2))
        leaves = {k: v for k, v in p.items() if k.startswith("encoder.")} | {"input.images": images}
        return leaves, lambda: proj(encoder.encode_views(images, p, cfg).seed)
    if module == "generator":
        seeds = Tensor(rng.standard_normal((2, cfg.seed_channels, 2, 2, 2)), requires_grad=True)
        proj = _projection(rng, (1, s, s, s))
        prefixes = ("decoder1.", "decoder2.", "premerge.", "postmerge.")
        leaves = {k: v for k, v in p.items() if k.startswith(prefixes)} | {"input.seeds": seeds}
        return leaves, lambda: proj(generator.generate(seeds, p, cfg).coarse)
    if module == "refiner":
        # the output conv starts at zero; give it weights so upstream gradients are non-trivial
        p["refiner.out.w"].data = 0.3 * rng.standard_normal(p["refiner.out.w"].shape)
        coarse = Tensor(rng.uniform(0.05, 0.95, (1, s, s, s)), requires_grad=True)
        proj = _projection(rng, (1, s, s, s))
        leaves = {k: v for k, v in p.items() if k.startswith("refiner.")} | {"input.coarse": coarse}
        return leaves, lambda: proj(refiner.refine(coarse, p, cfg))
    if module == "losses":
        coarse = Tensor(rng.uniform(0.05, 0.95, (1, s, s, s)), requires_grad=True)
        fine = Tensor(rng.uniform(0.05, 0.95, (1, s, s, s)), requires_grad=True)
        gt = rng.random((1, s, s, s)) < 0.3
        gt.flat[0] = True
        leaves = {"input.coarse": coarse, "input.fine": fine}
        return leaves, lambda: total_loss(coarse, fine, gt, LossWeights(), "full")
    if module == "imb":
        early = Tensor(rng.standard_normal((6, cfg.stem_channels, cfg.image_size // 2, cfg.image_size // 2)), requires_grad=True)
        q = np.abs(rng.standard_normal((6, 6)))
        q = q + q.T
        np.fill_diagonal(q, 0.0)
        leaves = {k: v for k, v in p.items() if k.startswith("imb.")} | {"input.early": early}
        return leaves, lambda: view_reduction.imb_loss(view_reduction.imb_embed(early, p, cfg), q_dist=q)
    if module == "model":
        p["refiner.out.w"].data = 0.3 * rng.standard_normal(p["refiner.out.w"].shape)
        images = rng.uniform(0.1, 0.9, (2, 3, cfg.image_size, cfg.image_size))
        gt = rng.random((1, s, s, s)) < 0.3
        gt.flat[0] = True
        leaves = {k: v for k, v in p.items() if not k.startswith("imb.")}

        def objective():
            rec = model.forward(images)
            return total_loss(rec.coarse, rec.fine, gt, LossWeights(), "full")

        return leaves, objective
    raise ValueError(f"unknown module {module!r}")


def check_module(
    module: str,
    seed: int = 0,
    cfg: ModelConfig = TINY,
    coords_per_leaf: int = 4,
    eps: float = 1e-5,
) -> list[CheckResult]:
    """Worst error per leaf, ``|analytic - numeric| / max(1, |numeric|)`` over sampled coordinates.

    A probe whose +-eps evaluations switch any relu/clamp/max branch straddles
    a point where the derivative does not exist. Such a coordinate is probed
    again with eps shrunk tenfold, up to two times, and dropped if it still
    straddles; ``CheckResult.shrunk`` counts the re-probed coordinates.
    """
    rng = np.random.default_rng([seed, MODULES.index(module) if module in MODULES else 99])
    leaves, objective = _problem(module, cfg, rng)
    for t in leaves.values():
        t.requires_grad = True
        t.grad = None
    with T.activation_patterns() as base_pattern:
        objective().backward()

    def probe(t, c, h):
        old = t.data[c]
        vals, smooth = [], True
        for x in (old + h, old - h):
            t.data[c] = x
            with T.activation_patterns() as pat:
                vals.append(objective().item())
            smooth = smooth and _same_pattern(pat, base_pattern)
        t.data[c] = old
        return (vals[0] - vals[1]) / (2 * h) if smooth else None

    out = []
    for name, t in leaves.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = rng.choice(t.size, size=min(coords_per_leaf, t.size), replace=False)
        res = CheckResult(module, name, 0.0)
        with T.no_grad():
            for f in flat:
                c = np.unravel_index(f, t.shape)
                for j, h in enumerate((eps, eps / 10, eps / 100)):
                    num = probe(t, c, h)
                    if num is not None:
                        break
                if num is None:
                    continue
                res.probes += 1
                res.shrunk += j > 0
                res.error = max(res.error, abs(analytic[c] - num) / max(1.0, abs(num)))
        out.append(res)
    return out


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def run_suite(
    modules=MODULES,
    seeds=range(5),
    cfg: ModelConfig = TINY,
    coords_per_leaf: int = 4,
    log: Callable[[str], None] | None = None,
) -> list[CheckResult]:
    results = []
    for m in modules:
        for s in seeds:
            for r in check_module(m, s, cfg, coords_per_leaf):
                results.append(r)
                if log is not None:
                    log(f"seed {s}, {r.line()}")
    return results


def worst_by_module(results: list[CheckResult]) -> dict[str, CheckResult]:
    worst: dict[str, CheckResult] = {}
    for r in results:
        if r.module not in worst or r.error > worst[r.module].error:
            worst[r.module] = r
    return worst
