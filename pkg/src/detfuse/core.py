"""Shared data model and box geometry.

Boxes are stored in corner form ``(x_tl, y_tl, x_br, y_br)`` with real-valued
pixel coordinates. Every type here is an immutable value.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence, TypeVar

__all__ = [
    "BBox",
    "ScoredDetection",
    "GroundTruthBox",
    "CategoryTable",
    "ContractError",
    "InvariantError",
    "VISDRONE_CATEGORIES",
    "area",
    "intersection",
    "iou",
    "meets_quality",
    "from_xywh",
    "parallel_map",
]

T = TypeVar("T")
R = TypeVar("R")


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class InvariantError(AssertionError):
    """An internal invariant failed; indicates a bug rather than bad input."""


@dataclass(frozen=True)
class BBox:
    x_tl: float
    y_tl: float
    x_br: float
    y_br: float

    def __post_init__(self) -> None:
        # store plain floats so numpy scalars never leak into serialized text
        coords = tuple(float(c) for c in (self.x_tl, self.y_tl, self.x_br, self.y_br))
        for name, c in zip(("x_tl", "y_tl", "x_br", "y_br"), coords):
            object.__setattr__(self, name, c)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if self.x_br < self.x_tl or self.y_br < self.y_tl:
            raise ValueError(f"box has negative extent: {coords}")

    def __iter__(self) -> Iterator[float]:
        return iter((self.x_tl, self.y_tl, self.x_br, self.y_br))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_tl, self.y_tl, self.x_br, self.y_br)

    @property
    def width(self) -> float:
        return self.x_br - self.x_tl

    @property
    def height(self) -> float:
        return self.y_br - self.y_tl

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.x_tl, self.y_tl, self.width, self.height)

    def clip(self, width: float, height: float) -> "BBox":
        def c(v: float, hi: float) -> float:
            return min(max(v, 0.0), hi)

        return BBox(c(self.x_tl, width), c(self.y_tl, height), c(self.x_br, width), c(self.y_br, height))

    def shifted(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x_tl + dx, self.y_tl + dy, self.x_br + dx, self.y_br + dy)

    def scaled(self, k: float) -> "BBox":
        return BBox(self.x_tl * k, self.y_tl * k, self.x_br * k, self.y_br * k)


@dataclass(frozen=True)
class ScoredDetection:
    box: BBox
    score: float
    category: int
    model: int = 0
    image: int = 0

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must lie in [0, 1], got {self.score!r}")
        if self.category < 0:
            raise ValueError(f"category must be >= 0, got {self.category}")


@dataclass(frozen=True)
class GroundTruthBox:
    box: BBox
    category: int
    image: int = 0
    crowd: bool = False
    # Polygon outlines in image pixels, flat [x0, y0, x1, y1, ...] per part.
    segmentation: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self) -> None:
        if self.category < 0:
            raise ValueError(f"category must be >= 0, got {self.category}")


@dataclass(frozen=True)
class CategoryTable:
    entries: tuple[tuple[int, str], ...]

    def __post_init__(self) -> None:
        ids = [i for i, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate category ids in {ids}")

    @classmethod
    def from_names(cls, names: Sequence[str], start: int = 1) -> "CategoryTable":
        return cls(tuple((start + k, n) for k, n in enumerate(names)))

    @property
    def ids(self) -> list[int]:
        return [i for i, _ in self.entries]

    def name(self, category: int) -> str:
        for i, n in self.entries:
            if i == category:
                return n
        raise KeyError(category)

    def __contains__(self, category: object) -> bool:
        return any(i == category for i, _ in self.entries)

    def __len__(self) -> int:
        return len(self.entries)


VISDRONE_CATEGORIES = CategoryTable.from_names(
    [
        "pedestrian",
        "people",
        "bicycle",
        "car",
        "van",
        "truck",
        "tricycle",
        "awning-tricycle",
        "bus",
        "motor",
    ]
)


def area(b: BBox) -> float:
    return (b.x_br - b.x_tl) * (b.y_br - b.y_tl)


def intersection(b1: BBox, b2: BBox) -> float:
    w = min(b1.x_br, b2.x_br) - max(b1.x_tl, b2.x_tl)
    h = min(b1.y_br, b2.y_br) - max(b1.y_tl, b2.y_tl)
    if w <= 0.0 or h <= 0.0:
        return 0.0
    return w * h


def iou(b1: BBox, b2: BBox) -> float:
    """Intersection over union; 0 when the union has no area."""
    inter = intersection(b1, b2)
    union = area(b1) + area(b2) - inter
    if union <= 0.0:
        return 0.0
    # rounding can push a near-identical pair a hair above 1
    return min(inter / union, 1.0)


def meets_quality(b_p: BBox, b_gt: BBox, t: float) -> bool:
    """True when the prediction overlaps the truth strictly above ``t``.

    The evaluator uses ``>=`` instead (COCO convention); see
    :func:`detfuse.evaluation.match_detections`.
    """
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"quality threshold must lie in [0, 1], got {t}")
    return iou(b_p, b_gt) > t


def from_xywh(x: float, y: float, w: float, h: float) -> BBox:
    if w < 0 or h < 0:
        raise ValueError(f"width and height must be non-negative, got w={w}, h={h}")
    return BBox(x, y, x + w, y + h)


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> list[R]:
    """Order-preserving map; results are identical for any thread count."""
    items = list(items)
    if threads < 1:
        raise ContractError(f"threads must be >= 1, got {threads}")
    if threads == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
