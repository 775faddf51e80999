"""Conditioning inputs for a layout-to-image generator.

For one patch layout this builds the per-object prototype composites (each a
zero canvas with a single rescaled prototype), a flattened composite, the
global/per-object text prompts, Fourier box features and the foreground
weight map, and serializes them as a bundle manifest.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Mapping, Sequence, Tuple

import numpy as np

from ._util import derive_seed, write_json
from .errors import BoxOutsideCanvas, EmptyLayout, MalformedFile, MissingPrototypeClass, UnknownCategory
from .geometry import Annotation, BBox
from .prototypes import Prototype
from .raster import (
    area_resample,
    load_image,
    load_weight_map,
    pixel_rect,
    save_image,
    save_weight_map,
    to_uint8,
)

DEFAULT_FOURIER_BANDS = 8
DEFAULT_WEIGHT = 2.0
_EPS = 1e-9

Size = Tuple[int, int]  # (width, height)


@dataclass
class ObjectCondition:
    bbox: BBox
    class_id: int
    prompt: str
    fourier: List[float]
    prototype_ref: str


@dataclass
class ConditionBundle:
    patch_id: str
    canvas_size: Size
    per_object_canvases: List[np.ndarray]
    flattened_canvas: np.ndarray
    global_prompt: str
    objects: List[ObjectCondition]
    weight_map: np.ndarray


def _check_inside(b: BBox, canvas: Size) -> None:
    w, h = canvas
    if b.x < -_EPS or b.y < -_EPS or b.x2 > w + _EPS or b.y2 > h + _EPS:
        raise BoxOutsideCanvas(f"box {b.to_list()} outside canvas {w}x{h}")


def paint_order(boxes: Sequence[BBox]) -> List[int]:
    """Indices in painting order: larger area first, layout order on ties."""
    return sorted(range(len(boxes)), key=lambda j: (-boxes[j].area, j))


def sample_prototypes(layout: Sequence[Annotation], bank: Mapping[int, Sequence[Prototype]],
                      seed: int) -> List[Prototype]:
    rng = np.random.default_rng(seed)
    chosen = []
    for a in layout:
        protos = bank.get(a.category_id)
        if not protos:
            raise MissingPrototypeClass(f"no prototypes for class {a.category_id}")
        chosen.append(protos[int(rng.integers(len(protos)))])
    return chosen


def render_object(patch: np.ndarray, b: BBox, canvas: Size) -> Tuple[Tuple[int, int, int, int], np.ndarray]:
    """Rescale ``patch`` onto the pixel rectangle of ``b``."""
    w, h = canvas
    x0, y0, x1, y1 = pixel_rect(b, w, h)
    return (x0, y0, x1, y1), to_uint8(area_resample(patch, y1 - y0, x1 - x0))


def paint_canvases(layout: Sequence[Annotation], protos: Sequence[Prototype],
                   canvas: Size) -> Tuple[List[np.ndarray], np.ndarray]:
    w, h = canvas
    rendered = []
    per_object = []
    for a, p in zip(layout, protos):
        _check_inside(a.bbox, canvas)
        (x0, y0, x1, y1), pix = render_object(p.patch, a.bbox, canvas)
        blank = np.zeros((h, w, 3), dtype=np.uint8)
        blank[y0:y1, x0:x1] = pix
        per_object.append(blank)
        rendered.append(((x0, y0, x1, y1), pix))
    flat = np.zeros((h, w, 3), dtype=np.uint8)
    for j in paint_order([a.bbox for a in layout]):
        (x0, y0, x1, y1), pix = rendered[j]
        flat[y0:y1, x0:x1] = pix
    return per_object, flat


def compose_canvases(layout: Sequence[Annotation], bank: Mapping[int, Sequence[Prototype]],
                     canvas: Size, seed: int) -> Tuple[List[np.ndarray], np.ndarray]:
    if canvas[0] < 1 or canvas[1] < 1:
        raise ValueError(f"canvas {canvas} must be at least 1x1")
    for a in layout:
        _check_inside(a.bbox, canvas)
    return paint_canvases(layout, sample_prototypes(layout, bank, seed), canvas)


def build_prompts(layout: Sequence[Annotation], categories: Mapping[int, str]) -> Tuple[str, List[str]]:
    if not layout:
        raise EmptyLayout("cannot build a prompt for an empty layout")
    names = []
    for a in layout:
        if a.category_id not in categories:
            raise UnknownCategory(f"unknown category {a.category_id}")
        names.append(categories[a.category_id])
    return f"An aerial image with {','.join(names)}.", [f"An aerial image of {n}." for n in names]


def fourier_embed(b: BBox, canvas: Size, bands: int = DEFAULT_FOURIER_BANDS) -> List[float]:
    """sin/cos features of the canvas-normalized box at frequencies 2^k * pi.

    Layout is band-major (``k``, then x/y/w/h, then sin/cos) so adding bands
    only appends entries.
    """
    if bands < 1:
        raise ValueError("need at least one frequency band")
    _check_inside(b, canvas)
    w, h = canvas
    coords = (b.x / w, b.y / h, b.w / w, b.h / h)
    out = []
    for k in range(bands):
        freq = (2.0 ** k) * math.pi
        for v in coords:
            out.append(math.sin(freq * v))
            out.append(math.cos(freq * v))
    return out


def build_weight_map(layout: Sequence[Annotation], canvas: Size, w: float = DEFAULT_WEIGHT) -> np.ndarray:
    """Unit weights with ``w`` at every pixel whose center lies in a layout box."""
    if w < 1:
        raise ValueError("foreground weight must be >= 1")
    cw, ch = canvas
    out = np.ones((ch, cw), dtype=np.float64)
    for a in layout:
        b = a.bbox
        # pixel j has center j + 0.5; closed box edges
        c0 = max(math.ceil(b.x - 0.5), 0)
        c1 = min(math.floor(b.x2 - 0.5), cw - 1)
        r0 = max(math.ceil(b.y - 0.5), 0)
        r1 = min(math.floor(b.y2 - 0.5), ch - 1)
        if c1 >= c0 and r1 >= r0:
            out[r0:r1 + 1, c0:c1 + 1] = w
    return out


def prototype_ref(p: Prototype) -> str:
    return f"{p.class_id}:{p.source_image_id}:{p.ann_index}"


def build_bundle(patch_id: str, layout: Sequence[Annotation], bank: Mapping[int, Sequence[Prototype]],
                 categories: Mapping[int, str], canvas: Size, global_seed: int,
                 fourier_bands: int = DEFAULT_FOURIER_BANDS, weight: float = DEFAULT_WEIGHT) -> ConditionBundle:
    global_prompt, prompts = build_prompts(layout, categories)
    for a in layout:
        _check_inside(a.bbox, canvas)
    protos = sample_prototypes(layout, bank, derive_seed(global_seed, patch_id))
    per_object, flat = paint_canvases(layout, protos, canvas)
    objects = [
        ObjectCondition(a.bbox, a.category_id, prompt, fourier_embed(a.bbox, canvas, fourier_bands), prototype_ref(p))
        for a, p, prompt in zip(layout, protos, prompts)
    ]
    return ConditionBundle(patch_id, tuple(canvas), per_object, flat, global_prompt, objects,
                           build_weight_map(layout, canvas, weight))


# --- manifest ------------------------------------------------------------------

def write_bundle(directory: Path, bundle: ConditionBundle) -> Path:
    """Write images and ``manifest.json`` into ``directory``; paths are relative to it."""
    directory = Path(directory)
    save_image(directory / "flattened.png", bundle.flattened_canvas)
    save_weight_map(directory / "weight.png", bundle.weight_map)
    per_object = []
    for j, (obj, img) in enumerate(zip(bundle.objects, bundle.per_object_canvases)):
        name = f"object_{j:03d}.png"
        save_image(directory / name, img)
        per_object.append({
            "canvas": name,
            "bbox": obj.bbox.to_list(),
            "class_id": obj.class_id,
            "prompt": obj.prompt,
            "fourier": obj.fourier,
            "prototype_ref": obj.prototype_ref,
        })
    manifest = {
        "patch_id": bundle.patch_id,
        "canvas": list(bundle.canvas_size),
        "flattened_canvas": "flattened.png",
        "per_object": per_object,
        "global_prompt": bundle.global_prompt,
        "weight_map": "weight.png",
    }
    path = directory / "manifest.json"
    write_json(path, manifest)
    return path


def read_manifest(path: Path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        doc["canvas"] = [int(v) for v in doc["canvas"]]
        doc["patch_id"], doc["flattened_canvas"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MalformedFile(f"bad bundle manifest {path}: {exc}") from exc
    return doc


def read_bundle(path: Path) -> ConditionBundle:
    path = Path(path)
    doc = read_manifest(path)
    base = path.parent
    objects, canvases = [], []
    for o in doc["per_object"]:
        objects.append(ObjectCondition(BBox(*o["bbox"]), int(o["class_id"]), o["prompt"],
                                       list(o["fourier"]), o.get("prototype_ref", "")))
        canvases.append(load_image(base / o["canvas"]))
    return ConditionBundle(
        doc["patch_id"], tuple(doc["canvas"]), canvases, load_image(base / doc["flattened_canvas"]),
        doc["global_prompt"], objects, load_weight_map(base / doc["weight_map"]),
    )
