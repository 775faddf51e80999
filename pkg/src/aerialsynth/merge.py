"""Assemble generated patches into full-resolution images.

``paste_back`` writes each patch over its source window in a copy of the real
image. ``mosaic`` packs patches into fresh zero canvases with shelf next-fit
(rows left to right, top to bottom, new canvas when full).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import MissingPatch, OverlapInMosaicPlan, PatchLargerThanCanvas, SizeMismatch
from .geometry import Annotation, BBox, intersection_area

PASTE_BACK = "paste_back"
MOSAIC = "mosaic"
DEFAULT_CANVAS = (1280, 1280)


@dataclass(frozen=True)
class Placement:
    patch_id: str
    origin: Tuple[int, int]
    size: Tuple[int, int]  # (width, height)
    source: int  # source image id (paste_back) or canvas index (mosaic)

    @property
    def rect(self) -> BBox:
        return BBox(float(self.origin[0]), float(self.origin[1]), float(self.size[0]), float(self.size[1]))

    def to_json(self) -> dict:
        return {"patch_id": self.patch_id, "origin": list(self.origin), "size": list(self.size),
                "source": self.source}


@dataclass
class MergePlan:
    mode: str
    canvas_size: Tuple[int, int]
    placements: List[Placement] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"mode": self.mode, "canvas_size": list(self.canvas_size),
                "placements": [p.to_json() for p in self.placements]}


def plan_mosaic(patches: Sequence[Tuple[str, Tuple[int, int]]],
                canvas: Tuple[int, int] = DEFAULT_CANVAS) -> List[MergePlan]:
    """Shelf next-fit packing of ``(patch_id, (width, height))`` in the given order."""
    cw, ch = canvas
    plans: List[MergePlan] = []
    x = y = shelf = 0
    for pid, (w, h) in patches:
        if w > cw or h > ch:
            raise PatchLargerThanCanvas(f"patch {pid} ({w}x{h}) exceeds canvas {cw}x{ch}")
        if plans and x + w > cw:
            x, y, shelf = 0, y + shelf, 0
        if not plans or y + h > ch:
            plans.append(MergePlan(MOSAIC, canvas))
            x = y = shelf = 0
        plans[-1].placements.append(Placement(pid, (x, y), (w, h), len(plans) - 1))
        x += w
        shelf = max(shelf, h)
    return plans


def plan_paste_back(regions: Sequence[Tuple[str, int, Tuple[int, int], Tuple[int, int]]],
                    image_sizes: Mapping[int, Tuple[int, int]]) -> List[MergePlan]:
    """One plan per source image from ``(patch_id, image_id, origin, size)`` records."""
    plans: Dict[int, MergePlan] = {}
    for pid, image_id, origin, size in regions:
        plan = plans.setdefault(image_id, MergePlan(PASTE_BACK, tuple(image_sizes[image_id])))
        plan.placements.append(Placement(pid, tuple(origin), tuple(size), image_id))
    return [plans[k] for k in sorted(plans)]


def check_disjoint(plan: MergePlan) -> None:
    cw, ch = plan.canvas_size
    ps = plan.placements
    for i, p in enumerate(ps):
        r = p.rect
        if r.x < 0 or r.y < 0 or r.x2 > cw or r.y2 > ch:
            raise OverlapInMosaicPlan(f"placement {p.patch_id} exceeds canvas")
        for q in ps[i + 1:]:
            if intersection_area(r, q.rect) > 0:
                raise OverlapInMosaicPlan(f"placements {p.patch_id} and {q.patch_id} overlap")


def _fetch(patches: Mapping[str, np.ndarray], p: Placement) -> np.ndarray:
    if p.patch_id not in patches:
        raise MissingPatch(f"patch {p.patch_id} not available")
    img = patches[p.patch_id]
    if (img.shape[1], img.shape[0]) != tuple(p.size):
        raise SizeMismatch(f"patch {p.patch_id} is {img.shape[1]}x{img.shape[0]}, plan says {p.size[0]}x{p.size[1]}")
    return img


def execute_merge(plan: MergePlan, patches: Mapping[str, np.ndarray],
                  sources: Optional[Mapping[int, np.ndarray]] = None,
                  labels: Optional[Mapping[str, Sequence[Annotation]]] = None,
                  source_annotations: Optional[Mapping[int, Sequence[Annotation]]] = None,
                  output_image_id: int = 0) -> Tuple[np.ndarray, List[Annotation]]:
    """Render ``plan`` and translate patch labels into the output frame.

    In paste_back mode a patch label is dropped when a later placement
    overwrites any of its pixels, and source annotations survive only when
    they lie wholly outside every pasted window.
    """
    labels = labels or {}
    cw, ch = plan.canvas_size
    if plan.mode == MOSAIC:
        check_disjoint(plan)
        out = np.zeros((ch, cw, 3), dtype=np.uint8)
    elif plan.mode == PASTE_BACK:
        image_id = plan.placements[0].source if plan.placements else None
        if sources is None or image_id not in sources:
            raise MissingPatch(f"source image {image_id} not available")
        out = np.array(sources[image_id], dtype=np.uint8, copy=True)
        if (out.shape[1], out.shape[0]) != (cw, ch):
            raise SizeMismatch(f"source image {image_id} does not match plan canvas {cw}x{ch}")
    else:
        raise ValueError(f"unknown merge mode {plan.mode!r}")

    anns: List[Annotation] = []
    for n, p in enumerate(plan.placements):
        img = _fetch(patches, p)
        x0, y0 = p.origin
        if x0 < 0 or y0 < 0 or x0 + p.size[0] > cw or y0 + p.size[1] > ch:
            raise SizeMismatch(f"placement {p.patch_id} does not fit the canvas")
        out[y0:y0 + p.size[1], x0:x0 + p.size[0]] = img
        later = [q.rect for q in plan.placements[n + 1:]] if plan.mode == PASTE_BACK else []
        for a in labels.get(p.patch_id, ()):
            b = a.bbox.translate(x0, y0)
            if any(intersection_area(b, r) > 0 for r in later):
                continue
            anns.append(Annotation(output_image_id, b, a.category_id))

    if plan.mode == PASTE_BACK and source_annotations:
        windows = [p.rect for p in plan.placements]
        for a in source_annotations.get(plan.placements[0].source, ()):
            if all(intersection_area(a.bbox, r) == 0 for r in windows):
                anns.append(Annotation(output_image_id, a.bbox, a.category_id))
    return out, anns
