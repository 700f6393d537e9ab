"""Cut-paste augmentation.

Object instances are cropped out of the dataset's own images (using the
annotation polygons as binary masks when present, the full box otherwise)
and composited at random positions onto copies of the training images.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .core import BBox, ContractError, GroundTruthBox, iou, parallel_map
from .formats import Dataset, ImageInfo

log = logging.getLogger(__name__)

__all__ = [
    "Instance",
    "InstanceBank",
    "AugmentConfig",
    "Composite",
    "load_rasters",
    "save_raster",
    "extract_instances",
    "paste_compose",
    "augment_dataset",
]


@dataclass(frozen=True)
class Instance:
    patch: np.ndarray
    mask: np.ndarray
    source_image: int
    box: BBox
    category: int


@dataclass
class InstanceBank:
    by_category: dict[int, list[Instance]] = field(default_factory=dict)

    def add(self, inst: Instance) -> None:
        self.by_category.setdefault(inst.category, []).append(inst)

    def entries(self) -> list[Instance]:
        return [inst for c in sorted(self.by_category) for inst in self.by_category[c]]

    def __len__(self) -> int:
        return sum(len(v) for v in self.by_category.values())


@dataclass(frozen=True)
class AugmentConfig:
    per_source_images: int = 2
    # strict "more than 10, fewer than 30" as inclusive bounds
    min_objects: int = 11
    max_objects: int = 29
    seed: int = 0
    scale_jitter: tuple[float, float] = (1.0, 1.0)
    allow_overlap: bool = True
    max_overlap_iou: float = 0.0
    category_balanced: bool = False
    feather: bool = False
    retry_cap: int = 10

    def __post_init__(self) -> None:
        if self.per_source_images < 1:
            raise ContractError("per_source_images must be >= 1")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ContractError(f"need 1 <= min_objects <= max_objects, got {self.min_objects}, {self.max_objects}")
        lo, hi = self.scale_jitter
        if not 0 < lo <= hi:
            raise ContractError(f"bad scale_jitter range {self.scale_jitter}")


class Composite(NamedTuple):
    raster: np.ndarray
    ground_truth: list[GroundTruthBox]
    # True wherever a pasted instance touched the output
    coverage: np.ndarray


def _as_rgb(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype != np.uint8:
        raise ContractError(f"rasters must be uint8, got {a.dtype}")
    if a.ndim == 2:
        a = np.repeat(a[:, :, None], 3, axis=2)
    if a.ndim != 3 or a.shape[2] not in (3, 4):
        raise ContractError(f"unsupported raster shape {a.shape}")
    return a[:, :, :3]


def load_rasters(ds: Dataset, images_dir: str | Path) -> dict[int, np.ndarray]:
    """Decode each image's file; unreadable files are logged and left out."""
    out = {}
    for im in ds.images:
        path = Path(images_dir) / im.file_name
        try:
            with Image.open(path) as f:
                out[im.id] = np.asarray(f.convert("RGB"))
        except (OSError, ValueError) as e:
            log.warning("skipping image %s: %s", path, e)
    return out


def save_raster(path: str | Path, raster: np.ndarray) -> None:
    Image.fromarray(raster).save(path, format="PNG")


def _polygon_mask(g: GroundTruthBox, x0: int, y0: int, w: int, h: int) -> np.ndarray:
    canvas = Image.new("1", (w, h), 0)
    draw = ImageDraw.Draw(canvas)
    for poly in g.segmentation or ():
        pts = [(poly[i] - x0, poly[i + 1] - y0) for i in range(0, len(poly), 2)]
        draw.polygon(pts, fill=1)
    return np.asarray(canvas, dtype=bool)


def extract_instances(ds: Dataset, rasters: Mapping[int, np.ndarray]) -> InstanceBank:
    bank = InstanceBank()
    for g in ds.ground_truth:
        if g.crowd:
            continue
        raster = rasters.get(g.image)
        if raster is None:
            log.warning("no raster for image %s; instance skipped", g.image)
            continue
        raster = _as_rgb(raster)
        rh, rw = raster.shape[:2]
        x0, y0 = max(int(round(g.box.x_tl)), 0), max(int(round(g.box.y_tl)), 0)
        x1, y1 = min(int(round(g.box.x_br)), rw), min(int(round(g.box.y_br)), rh)
        if x1 <= x0 or y1 <= y0:
            log.warning("zero-area box %s in image %s skipped", g.box.as_tuple(), g.image)
            continue
        patch = raster[y0:y1, x0:x1].copy()
        if g.segmentation:
            mask = _polygon_mask(g, x0, y0, x1 - x0, y1 - y0)
            if not mask.any():
                mask = np.ones(patch.shape[:2], dtype=bool)
        else:
            mask = np.ones(patch.shape[:2], dtype=bool)
        bank.add(Instance(patch, mask, g.image, g.box, g.category))
    return bank


def _feathered(mask: np.ndarray) -> np.ndarray:
    # separable [1, 2, 1] / 4 blur, one pixel wide
    a = np.pad(mask.astype(float), 1)
    a = (a[:-2] + 2 * a[1:-1] + a[2:]) / 4
    return (a[:, :-2] + 2 * a[:, 1:-1] + a[:, 2:]) / 4


def _rescaled(inst: Instance, k: float) -> tuple[np.ndarray, np.ndarray]:
    if k == 1.0:
        return inst.patch, inst.mask
    h, w = inst.patch.shape[:2]
    size = (max(1, int(round(w * k))), max(1, int(round(h * k))))
    patch = np.asarray(Image.fromarray(inst.patch).resize(size, Image.BILINEAR))
    mask = np.asarray(Image.fromarray(inst.mask).resize(size, Image.NEAREST), dtype=bool)
    return patch, mask


def paste_compose(
    scene: np.ndarray,
    gts: Sequence[GroundTruthBox],
    bank: InstanceBank,
    n: int,
    rng: np.random.Generator,
    *,
    image_id: int | None = None,
    cfg: AugmentConfig = AugmentConfig(),
) -> Composite:
    """Paste ``n`` bank instances onto a copy of ``scene``.

    The returned annotations are the scene's own boxes followed by one box
    per pasted instance. Instances that cannot be placed within
    ``cfg.retry_cap`` draws are skipped with a warning.
    """
    if n < 1:
        raise ContractError(f"n must be >= 1, got {n}")
    entries = bank.entries()
    if not entries:
        raise ContractError("instance bank is empty")
    out = _as_rgb(scene).copy()
    H, W = out.shape[:2]
    coverage = np.zeros((H, W), dtype=bool)
    if image_id is None:
        image_id = gts[0].image if gts else 0
    boxes = [GroundTruthBox(g.box, g.category, image_id, g.crowd, g.segmentation) for g in gts]
    cats = sorted(bank.by_category)
    lo, hi = cfg.scale_jitter

    for _ in range(n):
        placed = False
        for _attempt in range(cfg.retry_cap):
            if cfg.category_balanced:
                pool = bank.by_category[cats[int(rng.integers(len(cats)))]]
                inst = pool[int(rng.integers(len(pool)))]
            else:
                inst = entries[int(rng.integers(len(entries)))]
            patch, mask = _rescaled(inst, float(rng.uniform(lo, hi)) if hi > lo else 1.0)
            h, w = mask.shape
            if h > H or w > W:
                continue
            x = int(rng.integers(0, W - w + 1))
            y = int(rng.integers(0, H - h + 1))
            box = BBox(x, y, x + w, y + h)
            if not cfg.allow_overlap and any(iou(box, b.box) > cfg.max_overlap_iou for b in boxes):
                continue
            region = out[y : y + h, x : x + w]
            if cfg.feather:
                alpha = _feathered(mask)[:, :, None]
                blended = alpha * patch + (1.0 - alpha) * region
                region[:] = np.rint(blended).astype(np.uint8)
                coverage[y : y + h, x : x + w] |= alpha[:, :, 0] > 0
            else:
                region[mask] = patch[mask]
                coverage[y : y + h, x : x + w] |= mask
            boxes.append(GroundTruthBox(box, inst.category, image_id))
            placed = True
            break
        if not placed:
            log.warning("could not place an instance on image %s after %d tries", image_id, cfg.retry_cap)
    return Composite(out, boxes, coverage)


def _seeded(seed: int, image_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, image_id & 0xFFFFFFFFFFFFFFFF]))


def augment_dataset(
    ds: Dataset,
    rasters: Mapping[int, np.ndarray],
    cfg: AugmentConfig = AugmentConfig(),
    *,
    threads: int = 1,
) -> tuple[Dataset, dict[int, np.ndarray]]:
    """Create ``cfg.per_source_images`` pasted variants of every source image.

    Returns the extended dataset (originals untouched, new images appended
    with fresh ids) and the rasters of the new images only. Each source
    image draws from its own stream seeded by ``(cfg.seed, image id)``, so
    the output does not depend on ``threads``.
    """
    bank = extract_instances(ds, rasters)
    by_image: dict[int, list[GroundTruthBox]] = {}
    for g in ds.ground_truth:
        by_image.setdefault(g.image, []).append(g)

    def work(im: ImageInfo) -> list[tuple[np.ndarray, list[GroundTruthBox]]]:
        scene = rasters.get(im.id)
        if scene is None or not len(bank):
            log.warning("image %s not augmented (no raster or empty bank)", im.id)
            return []
        rng = _seeded(cfg.seed, im.id)
        made = []
        for _ in range(cfg.per_source_images):
            n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
            comp = paste_compose(scene, by_image.get(im.id, []), bank, n, rng, image_id=im.id, cfg=cfg)
            made.append((comp.raster, comp.ground_truth))
        return made

    results = parallel_map(work, ds.images, threads)
    next_id = max(ds.image_ids, default=0) + 1
    images = list(ds.images)
    gts = list(ds.ground_truth)
    new_rasters: dict[int, np.ndarray] = {}
    for im, made in zip(ds.images, results):
        stem = Path(im.file_name).stem or str(im.id)
        for k, (raster, boxes) in enumerate(made):
            h, w = raster.shape[:2]
            images.append(ImageInfo(next_id, float(w), float(h), f"{stem}_aug{k}.png"))
            gts.extend(GroundTruthBox(b.box, b.category, next_id, b.crowd, b.segmentation) for b in boxes)
            new_rasters[next_id] = raster
            next_id += 1
    return Dataset(images, ds.categories, gts), new_rasters
