"""Domain records and axis-aligned box geometry.

Boxes use the COCO ``[x, y, w, h]`` convention with float pixel coordinates.
All records are frozen dataclasses so they can be shared freely between
threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"degenerate box {vals}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def translate(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x + dx, self.y + dy, self.w, self.h)

    def to_list(self) -> List[float]:
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def from_xyxy(cls, x1: float, y1: float, x2: float, y2: float) -> "BBox":
        return cls(x1, y1, x2 - x1, y2 - y1)


@dataclass(frozen=True)
class ImageRecord:
    id: int
    width: int
    height: int
    file_path: str

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image {self.id} has invalid size {self.width}x{self.height}")


@dataclass(frozen=True)
class Annotation:
    image_id: int
    bbox: BBox
    category_id: int
    id: Optional[int] = None


@dataclass(frozen=True)
class Detection:
    image_id: int
    bbox: BBox
    category_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass
class Dataset:
    images: List[ImageRecord]
    annotations: List[Annotation]
    categories: Dict[int, str]
    root: Optional[Path] = None  # directory that image file paths are relative to
    n_dropped: int = 0
    n_clamped: int = 0
    _by_image: Dict[int, List[Annotation]] = field(default=None, init=False, repr=False, compare=False)

    def image(self, image_id: int) -> ImageRecord:
        for img in self.images:
            if img.id == image_id:
                return img
        raise KeyError(image_id)

    def annotations_for(self, image_id: int) -> List[Annotation]:
        if self._by_image is None:
            groups: Dict[int, List[Annotation]] = {img.id: [] for img in self.images}
            for ann in self.annotations:
                groups.setdefault(ann.image_id, []).append(ann)
            self._by_image = groups
        return self._by_image.get(image_id, [])

    def image_path(self, image: ImageRecord) -> Path:
        p = Path(image.file_path)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p


@dataclass(frozen=True)
class AffineScale:
    """Anisotropic scale followed by translation: p -> (sx*x + tx, sy*y + ty)."""

    sx: float
    sy: float
    tx: float
    ty: float

    def apply(self, x: float, y: float) -> Tuple[float, float]:
        return (self.sx * x + self.tx, self.sy * y + self.ty)

    def apply_box(self, b: BBox) -> BBox:
        x1, y1 = self.apply(b.x, b.y)
        x2, y2 = self.apply(b.x2, b.y2)
        return BBox.from_xyxy(x1, y1, x2, y2)


def intersection_area(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: BBox, b: BBox) -> float:
    # min/max/+ are commutative in IEEE arithmetic, so iou(a, b) == iou(b, a) bit for bit
    if a == b:
        return 1.0
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    union = a.area + b.area - inter
    return min(1.0, inter / union)


def contains(window: BBox, box: BBox) -> bool:
    """Closed-interval containment of ``box`` in ``window``."""
    return (
        box.x >= window.x
        and box.y >= window.y
        and box.x2 <= window.x2
        and box.y2 <= window.y2
    )


def fit_transform(src: BBox, dst: BBox) -> AffineScale:
    sx = dst.w / src.w
    sy = dst.h / src.h
    return AffineScale(sx, sy, dst.x - sx * src.x, dst.y - sy * src.y)


def clamp_box(b: BBox, width: float, height: float) -> Optional[BBox]:
    """Clip ``b`` to ``[0, width] x [0, height]``; None if nothing is left."""
    x1 = min(max(b.x, 0.0), width)
    y1 = min(max(b.y, 0.0), height)
    x2 = min(max(b.x2, 0.0), width)
    y2 = min(max(b.y2, 0.0), height)
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        return None
    return BBox.from_xyxy(x1, y1, x2, y2)


def greedy_iou_match(a: Sequence[BBox], b: Sequence[BBox], threshold: float,
                     allowed: Optional[Callable[[int, int], bool]] = None) -> List[Tuple[int, int, float]]:
    """One-to-one matching by descending IoU, ties broken by (index in a, index in b).

    Only pairs with ``iou >= threshold`` (and passing ``allowed``) are eligible.
    """
    pairs = []
    for i, ba in enumerate(a):
        for j, bb in enumerate(b):
            if allowed is not None and not allowed(i, j):
                continue
            v = iou(ba, bb)
            if v >= threshold and v > 0.0:
                pairs.append((-v, i, j))
    pairs.sort()
    used_a, used_b, out = set(), set(), []
    for neg, i, j in pairs:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        out.append((i, j, -neg))
    return out
