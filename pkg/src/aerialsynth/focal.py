"""Object-dense focal regions.

Box centers of an image are clustered with K-means; around each cluster
center a fixed-size window is placed so that it fully contains as many boxes
as possible. Window origins are integer pixels, and the placement is exact
over all integer origins whose window contains the center.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ._util import derive_seed, parallel_map
from .errors import WindowLargerThanImage, WindowOutOfBounds
from .geometry import Annotation, BBox, Dataset, ImageRecord, clamp_box, contains

logger = logging.getLogger(__name__)

DEFAULT_K = 3
DEFAULT_WINDOW = 256

Point = Tuple[float, float]


@dataclass
class ClusterResult:
    centers: List[Point]
    assignment: List[int]
    inertia: float
    inertia_history: List[float] = field(default_factory=list)
    n_iter: int = 0


def _sq_dists(pts: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def _inertia(pts: np.ndarray, centers: np.ndarray, assign: np.ndarray) -> float:
    return float(((pts - centers[assign]) ** 2).sum())


def _plusplus(pts: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(pts)
    centers = [pts[int(rng.integers(n))]]
    d2 = ((pts - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centers.append(pts[idx])
        d2 = np.minimum(d2, ((pts - pts[idx]) ** 2).sum(axis=1))
    return np.array(centers, dtype=np.float64)


def _assign(pts: np.ndarray, centers: np.ndarray, prev: Optional[np.ndarray] = None) -> np.ndarray:
    d = _sq_dists(pts, centers)
    best = d.argmin(axis=1)
    if prev is not None:
        # keep the previous cluster on exact ties so assignments cannot oscillate
        rows = np.arange(len(pts))
        keep = d[rows, prev] <= d[rows, best]
        best = np.where(keep, prev, best)
    return best


def kmeans(points: Sequence[Point], k: int, seed: int = 0, max_iter: int = 100,
           tol: float = 1e-6) -> ClusterResult:
    """Lloyd's algorithm from k-means++ seeding."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n == 0:
        raise ValueError("kmeans needs at least one point")
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        logger.warning("k=%d exceeds %d points; lowering k", k, n)
        k = n
    rng = np.random.default_rng(seed)
    centers = _plusplus(pts, k, rng)
    assign = _assign(pts, centers)
    history = [_inertia(pts, centers, assign)]
    it = 0
    for it in range(1, max_iter + 1):
        new_centers = centers.copy()
        counts = np.bincount(assign, minlength=k)
        for c in range(k):
            if counts[c]:
                new_centers[c] = pts[assign == c].mean(axis=0)
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            d_own = ((pts - new_centers[assign]) ** 2).sum(axis=1)
            for c in empty:
                far = int(d_own.argmax())
                new_centers[c] = pts[far]
                d_own[far] = 0.0
        shift = float(np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max())
        centers = new_centers
        new_assign = _assign(pts, centers, assign)
        history.append(_inertia(pts, centers, new_assign))
        changed = bool((new_assign != assign).any())
        assign = new_assign
        if shift < tol and not changed:
            break
    return ClusterResult(
        [(float(x), float(y)) for x, y in centers],
        [int(a) for a in assign],
        history[-1],
        history,
        it,
    )


def _origin_range(center: float, size: int, extent: int) -> Tuple[int, int]:
    return max(0, math.ceil(center) - size), min(extent - size, math.floor(center))


def place_window(m: Point, boxes: Sequence[BBox], size: int, image: Tuple[int, int]) -> Tuple[BBox, int]:
    """Best ``size x size`` window containing ``m``, by fully-contained box count.

    Each box admits a rectangle of integer window origins that contain it.
    A sweep over x (origin-rectangle starts) with a max-count array over
    compressed y finds the origin covered by the most rectangles; ties go to
    the smallest x, then the smallest y.
    """
    width, height = image
    if size > width or size > height:
        raise WindowLargerThanImage(f"window {size} larger than image {width}x{height}")
    mx, my = m
    if not (0 <= mx <= width and 0 <= my <= height):
        raise ValueError(f"center {m} outside image {width}x{height}")
    xlo, xhi = _origin_range(mx, size, width)
    ylo, yhi = _origin_range(my, size, height)

    rects = []
    for b in boxes:
        x0 = max(math.ceil(b.x2) - size, xlo)
        x1 = min(math.floor(b.x), xhi)
        y0 = max(math.ceil(b.y2) - size, ylo)
        y1 = min(math.floor(b.y), yhi)
        if x0 <= x1 and y0 <= y1:
            rects.append((x0, x1, y0, y1))

    ys = sorted({ylo, yhi + 1, *(r[2] for r in rects), *(r[3] + 1 for r in rects)})
    yindex = {v: i for i, v in enumerate(ys)}
    counts = np.zeros(len(ys) - 1, dtype=np.int64)

    events = []  # (x, kind, y0, y1); removals (kind 0) sort before additions at equal x
    for x0, x1, y0, y1 in rects:
        events.append((x0, 1, y0, y1))
        events.append((x1 + 1, 0, y0, y1))
    events.sort()
    candidates = sorted({xlo, *(r[0] for r in rects)})

    best = (-1, xlo, ylo)
    e = 0
    for x in candidates:
        while e < len(events) and events[e][0] <= x:
            _, kind, y0, y1 = events[e]
            counts[yindex[y0]:yindex[y1 + 1]] += 1 if kind else -1
            e += 1
        leaf = int(counts.argmax())
        if counts[leaf] > best[0]:
            best = (int(counts[leaf]), x, ys[leaf])

    count, ox, oy = best
    window = BBox(float(ox), float(oy), float(size), float(size))
    recount = sum(1 for b in boxes if contains(window, b))
    assert recount == count, (recount, count)
    return window, count


@dataclass
class FocalRegion:
    image_id: int
    index: int
    window: BBox
    contained: List[Annotation]
    cluster_center: Point

    @property
    def patch_id(self) -> str:
        return f"{self.image_id}_{self.index}"

    @property
    def origin(self) -> Tuple[int, int]:
        return int(self.window.x), int(self.window.y)


def _regions_for_image(dataset: Dataset, img: ImageRecord, k_default: int, size: int, seed: int,
                       keep_clipped_min_visibility: Optional[float]) -> List[FocalRegion]:
    anns = dataset.annotations_for(img.id)
    if not anns:
        return []
    if size > img.width or size > img.height:
        logger.warning("image %d (%dx%d) smaller than window %d; skipped", img.id, img.width, img.height, size)
        return []
    centers = [a.bbox.center for a in anns]
    k = min(k_default, len(anns))
    clusters = kmeans(centers, k, seed=derive_seed(seed, img.id))
    boxes = [a.bbox for a in anns]
    regions: List[FocalRegion] = []
    seen = set()
    for cx, cy in clusters.centers:
        m = (min(max(cx, 0.0), float(img.width)), min(max(cy, 0.0), float(img.height)))
        window, _ = place_window(m, boxes, size, (img.width, img.height))
        if (window.x, window.y) in seen:
            continue
        seen.add((window.x, window.y))
        contained = []
        for a in anns:
            if contains(window, a.bbox):
                contained.append(Annotation(a.image_id, a.bbox.translate(-window.x, -window.y), a.category_id, a.id))
            elif keep_clipped_min_visibility is not None:
                clipped = clamp_box(a.bbox.translate(-window.x, -window.y), size, size)
                if clipped is not None and clipped.area / a.bbox.area >= keep_clipped_min_visibility:
                    contained.append(Annotation(a.image_id, clipped, a.category_id, a.id))
        regions.append(FocalRegion(img.id, len(regions), window, contained, m))
    return regions


def extract_focal_regions(dataset: Dataset, k_default: int = DEFAULT_K, size: int = DEFAULT_WINDOW,
                          seed: int = 0, jobs: int = 1,
                          keep_clipped_min_visibility: Optional[float] = None) -> List[FocalRegion]:
    per_image = parallel_map(
        lambda img: _regions_for_image(dataset, img, k_default, size, seed, keep_clipped_min_visibility),
        dataset.images, jobs,
    )
    return [r for regions in per_image for r in regions]


def crop_region(image: np.ndarray, region: FocalRegion) -> np.ndarray:
    h, w = image.shape[:2]
    win = region.window
    if win.x < 0 or win.y < 0 or win.x2 > w or win.y2 > h:
        raise WindowOutOfBounds(f"window {win.to_list()} outside {w}x{h} image")
    x0, y0 = region.origin
    return image[y0:y0 + int(win.h), x0:x0 + int(win.w)].copy()


def paste_region(image: np.ndarray, patch: np.ndarray, origin: Tuple[int, int]) -> np.ndarray:
    out = image.copy()
    x0, y0 = origin
    ph, pw = patch.shape[:2]
    if x0 < 0 or y0 < 0 or y0 + ph > out.shape[0] or x0 + pw > out.shape[1]:
        raise WindowOutOfBounds(f"patch at {origin} does not fit the image")
    out[y0:y0 + ph, x0:x0 + pw] = patch
    return out
