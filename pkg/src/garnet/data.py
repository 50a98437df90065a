"""Synthetic multi-view voxel dataset and its file formats.

Objects are unions of 2-5 boxes, axis-aligned cylinders and L-brackets, grown
so every new primitive overlaps the shape built so far. Views are orthographic
ray casts from random azimuth/elevation; the three image channels are
silhouette, first-hit depth (1 = nearest) and occupancy count along the ray.

Viewpoint angles are written next to the images for test oracles, but the
loader that feeds the model (:func:`load_samples`) never reads them.

On disk a dataset is a directory holding ``manifest.tsv`` (one
``id<TAB>gt_path<TAB>view_dir<TAB>split`` line per object, paths relative to
the manifest), ``<id>.gvox`` grids and ``<id>_views/view_XXX.png`` images.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ContractError, FormatError

GRID = 32
VOX_MAGIC = b"GVOX1"
MIN_OCCUPIED = 32
ELEVATION_RANGE = (-math.pi / 6, math.pi / 3)


@dataclass
class Viewpoint:
    azimuth: float
    elevation: float


@dataclass
class SyntheticObject:
    id: str
    gt: np.ndarray  # (S, S, S) bool
    views: list[np.ndarray] = field(default_factory=list)  # each (3, H, W) in [0, 1]
    viewpoints: list[Viewpoint] = field(default_factory=list)  # oracle-only metadata


@dataclass
class Sample:
    """What the model may see: an id, the target grid and the view images."""

    id: str
    gt: np.ndarray
    images: np.ndarray  # (V, 3, H, W)


@dataclass
class ManifestRecord:
    id: str
    gt_path: str
    view_dir: str
    split: str


@dataclass
class DatasetManifest:
    root: Path
    records: list[ManifestRecord]

    def split(self, tag: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == tag]


# ---------------------------------------------------------------- shapes


def _box(shape, lo, hi) -> np.ndarray:
    g = np.zeros(shape, dtype=bool)
    lo = np.clip(np.round(lo).astype(int), 1, np.array(shape) - 1)
    hi = np.clip(np.round(hi).astype(int), 1, np.array(shape) - 1)
    if np.all(hi > lo):
        g[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = True
    return g


def _cylinder(shape, center, radius, length, axis) -> np.ndarray:
    idx = np.indices(shape).astype(np.float64) + 0.5
    others = [a for a in range(3) if a != axis]
    r2 = sum((idx[a] - center[a]) ** 2 for a in others)
    along = np.abs(idx[axis] - center[axis])
    g = (r2 <= radius**2) & (along <= length / 2)
    border = np.zeros(shape, dtype=bool)
    border[1:-1, 1:-1, 1:-1] = True
    return g & border


def _primitive(rng: np.random.Generator, shape, center) -> np.ndarray:
    kind = rng.integers(3)
    center = np.asarray(center, dtype=np.float64)
    if kind == 0:
        ext = rng.uniform(4, 12, size=3)
        return _box(shape, center - ext / 2, center + ext / 2)
    if kind == 1:
        return _cylinder(shape, center, rng.uniform(2.5, 5.5), rng.uniform(6, 16), int(rng.integers(3)))
    a, b = rng.choice(3, size=2, replace=False)
    thick = rng.uniform(3, 5)
    length1, length2 = rng.uniform(8, 16), rng.uniform(6, 12)
    ext1 = np.full(3, thick)
    ext1[a] = length1
    lo1 = center - ext1 / 2
    ext2 = np.full(3, thick)
    ext2[b] = length2
    lo2 = lo1.copy()
    return _box(shape, lo1, lo1 + ext1) | _box(shape, lo2, lo2 + ext2)


def is_connected(grid: np.ndarray) -> bool:
    _, n = ndimage.label(grid)
    return n == 1


def generate_gt(rng: np.random.Generator, size: int = GRID, max_tries: int = 100) -> np.ndarray:
    shape = (size,) * 3
    for _ in range(max_tries):
        n_parts = int(rng.integers(2, 6))
        g = _primitive(rng, shape, size / 2 + rng.uniform(-3, 3, size=3))
        for _ in range(n_parts - 1):
            occ = np.argwhere(g)
            if len(occ) == 0:
                break
            anchor = occ[rng.integers(len(occ))] + 0.5
            g = g | _primitive(rng, shape, anchor + rng.uniform(-3, 3, size=3))
        if g.sum() >= MIN_OCCUPIED and is_connected(g):
            return g
    raise RuntimeError("could not generate a valid object")


def generate_object(rng: np.random.Generator, object_id: str = "obj", n_views: int = 0, image_size: int = 32) -> SyntheticObject:
    gt = generate_gt(rng)
    obj = SyntheticObject(object_id, gt)
    if n_views:
        obj.viewpoints = random_viewpoints(rng, n_views)
        obj.views = render_at(gt, obj.viewpoints, image_size)
    return obj


# ---------------------------------------------------------------- rendering


def random_viewpoints(rng: np.random.Generator, n: int) -> list[Viewpoint]:
    if n < 1:
        raise ContractError("need at least one view")
    az = rng.uniform(0.0, 2 * math.pi, size=n)
    el = rng.uniform(*ELEVATION_RANGE, size=n)
    return [Viewpoint(float(a), float(e)) for a, e in zip(az, el)]


def camera_basis(vp: Viewpoint) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Forward, image-right and image-down unit vectors in grid-index coordinates."""
    ca, sa = math.cos(vp.azimuth), math.sin(vp.azimuth)
    ce, se = math.cos(vp.elevation), math.sin(vp.elevation)
    forward = np.array([ce * ca, ce * sa, se])
    right = np.array([-sa, ca, 0.0])
    up = np.cross(forward, right)
    return forward, right, -up


def render_view(gt: np.ndarray, vp: Viewpoint, image_size: int = 32, step: float = 0.5) -> np.ndarray:
    size = gt.shape[0]
    half = size * 0.6875  # image half-width in voxels; covers rotated objects near the centre
    reach = size * math.sqrt(3) / 2
    forward, right, down = camera_basis(vp)
    coords = (np.arange(image_size) + 0.5 - image_size / 2) * (2 * half / image_size)
    ts = np.arange(-reach, reach, step)
    pts = (
        coords[None, :, None, None] * right
        + coords[:, None, None, None] * down
        + ts[None, None, :, None] * forward
    ) + size / 2
    idx = np.floor(pts).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < size), axis=-1)
    idx = np.clip(idx, 0, size - 1)
    hit = gt[idx[..., 0], idx[..., 1], idx[..., 2]] & inside  # (H, W, T)
    any_hit = hit.any(axis=-1)
    first = np.argmax(hit, axis=-1)
    depth = np.where(any_hit, 1.0 - first / len(ts), 0.0)
    count = np.clip(hit.sum(axis=-1) * step / (2 * reach), 0.0, 1.0)
    return np.stack([any_hit.astype(np.float64), depth, count])


def render_at(gt: np.ndarray, viewpoints: list[Viewpoint], image_size: int = 32) -> list[np.ndarray]:
    return [render_view(gt, vp, image_size) for vp in viewpoints]


def render_views(gt: np.ndarray, n: int, rng: np.random.Generator, image_size: int = 32) -> list[np.ndarray]:
    return render_at(gt, random_viewpoints(rng, n), image_size)


# ---------------------------------------------------------------- GVOX1


def encode_voxel(grid: np.ndarray) -> bytes:
    g = np.asarray(grid, dtype=bool)
    if g.ndim != 3:
        raise ContractError(f"voxel grid must be 3-D, got shape {g.shape}")
    return VOX_MAGIC + struct.pack("<3H", *g.shape) + np.packbits(g.ravel()).tobytes()


def decode_voxel(blob: bytes) -> np.ndarray:
    if blob[:5] != VOX_MAGIC:
        raise FormatError("bad magic, expected GVOX1", 0)
    if len(blob) < 11:
        raise FormatError("truncated header", len(blob))
    shape = struct.unpack("<3H", blob[5:11])
    n = shape[0] * shape[1] * shape[2]
    need = 11 + (n + 7) // 8
    if len(blob) < need:
        raise FormatError(f"truncated payload, need {need} bytes", len(blob))
    if len(blob) > need:
        raise FormatError("trailing bytes after payload", need)
    bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8, offset=11), count=n)
    return bits.astype(bool).reshape(shape)


def write_voxel(path: str | Path, grid: np.ndarray) -> None:
    Path(path).write_bytes(encode_voxel(grid))


def read_voxel(path: str | Path) -> np.ndarray:
    return decode_voxel(Path(path).read_bytes())


# ---------------------------------------------------------------- dataset on disk


def _write_image(path: Path, img: np.ndarray) -> None:
    arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_image(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def make_objects(count: int, views_per_object: int, seed: int, image_size: int = 32) -> list[SyntheticObject]:
    """In-memory objects; object ``i`` uses its own rng stream seeded by ``(seed, i)``."""
    return [
        generate_object(np.random.default_rng([seed, i]), f"obj{i:05d}", views_per_object, image_size)
        for i in range(count)
    ]


def split_ids(ids: list[str], test_fraction: float, seed: int) -> dict[str, str]:
    if not 0.0 <= test_fraction < 1.0:
        raise ContractError("test_fraction must lie in [0, 1)")
    order = np.random.default_rng([seed, 1_000_003]).permutation(len(ids))
    n_test = int(round(len(ids) * test_fraction))
    test = {ids[i] for i in order[:n_test]}
    return {i: ("test" if i in test else "train") for i in ids}


def split(manifest: DatasetManifest, test_fraction: float, seed: int) -> DatasetManifest:
    tags = split_ids([r.id for r in manifest.records], test_fraction, seed)
    recs = [ManifestRecord(r.id, r.gt_path, r.view_dir, tags[r.id]) for r in manifest.records]
    return DatasetManifest(manifest.root, recs)


def write_manifest(manifest: DatasetManifest) -> Path:
    path = manifest.root / "manifest.tsv"
    lines = [f"{r.id}\t{r.gt_path}\t{r.view_dir}\t{r.split}" for r in manifest.records]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.tsv"
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4 or parts[3] not in ("train", "test"):
            raise ContractError(f"{path}:{lineno}: malformed manifest line")
        records.append(ManifestRecord(*parts))
    return DatasetManifest(path.parent, records)


def build_dataset(
    count: int,
    views_per_object: int,
    seed: int,
    out_dir: str | Path,
    test_fraction: float = 0.2,
    image_size: int = 32,
) -> DatasetManifest:
    if count < 2:
        raise ContractError("a dataset needs at least 2 objects")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for obj in make_objects(count, views_per_object, seed, image_size):
        write_voxel(root / f"{obj.id}.gvox", obj.gt)
        vdir = root / f"{obj.id}_views"
        vdir.mkdir(exist_ok=True)
        for k, img in enumerate(obj.views):
            _write_image(vdir / f"view_{k:03d}.png", img)
        meta = "".join(f"{k} {vp.azimuth:.17g} {vp.elevation:.17g}\n" for k, vp in enumerate(obj.viewpoints))
        (vdir / "viewpoints.txt").write_text(meta)
        records.append(ManifestRecord(obj.id, f"{obj.id}.gvox", f"{obj.id}_views", "train"))
    manifest = split(DatasetManifest(root, records), test_fraction, seed)
    write_manifest(manifest)
    return manifest


def load_sample(manifest: DatasetManifest, rec: ManifestRecord) -> Sample:
    gt = read_voxel(manifest.root / rec.gt_path)
    vdir = manifest.root / rec.view_dir
    images = np.stack([read_image(p) for p in sorted(vdir.glob("view_*.png"))])
    return Sample(rec.id, gt, images)


def load_samples(manifest: DatasetManifest, split_tag: str | None = None) -> list[Sample]:
    recs = manifest.records if split_tag is None else manifest.split(split_tag)
    return [load_sample(manifest, r) for r in recs]


def load_viewpoints(manifest: DatasetManifest, rec: ManifestRecord) -> list[Viewpoint]:
    """Viewpoint metadata, for oracles and diagnostics only."""
    path = manifest.root / rec.view_dir / "viewpoints.txt"
    out = []
    for line in path.read_text().splitlines():
        _, a, e = line.split()
        out.append(Viewpoint(float(a), float(e)))
    return out


def to_sample(obj: SyntheticObject) -> Sample:
    return Sample(obj.id, obj.gt, np.stack(obj.views))
