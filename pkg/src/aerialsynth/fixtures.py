"""Deterministic synthetic UAV-style fixture.

Produces textured backgrounds with clustered small objects of three classes,
COCO annotations, noisy detections (COCO results) and a ready-to-run config.
"""

from __future__ import annotations

from pathlib import Path
from typing import Tuple

import numpy as np

from ._util import write_json
from .config import SCHEMA_VERSION
from .detector_io import detections_to_json, write_dataset
from .geometry import Annotation, BBox, ImageRecord, clamp_box
from .raster import save_image
from .refine import DetectorNoise, simulate_detections

CATEGORIES = {1: "car", 2: "person", 3: "truck"}
# (w range, h range, base colour)
_CLASS_SHAPES = {
    1: ((14, 26), (9, 15), (200, 40, 40)),
    2: ((5, 9), (10, 17), (40, 180, 60)),
    3: ((24, 40), (13, 21), (50, 70, 200)),
}


def _background(rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    base = rng.uniform(70, 140, 3)
    grad = rng.uniform(-30, 30, (2, 3))
    img = base + (xx[..., None] / width) * grad[0] + (yy[..., None] / height) * grad[1]
    img += rng.normal(0, 6, img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def _draw(img: np.ndarray, b: BBox, colour, rng: np.random.Generator) -> None:
    x0, y0 = int(round(b.x)), int(round(b.y))
    x1, y1 = int(round(b.x2)), int(round(b.y2))
    col = np.clip(np.asarray(colour) + rng.normal(0, 15, 3), 0, 255)
    img[y0:y1, x0:x1] = col.astype(np.uint8)
    # darker core so crops are not flat
    cx0, cy0 = x0 + (x1 - x0) // 4, y0 + (y1 - y0) // 4
    cx1, cy1 = x1 - (x1 - x0) // 4, y1 - (y1 - y0) // 4
    img[cy0:cy1, cx0:cx1] = (col * 0.6).astype(np.uint8)


def make_fixture(out_dir: Path, n_images: int = 20, seed: int = 0,
                 size: Tuple[int, int] = (640, 480)) -> Path:
    """Write the fixture into ``out_dir`` and return the config path."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    width, height = size
    images, anns, dets = [], [], []
    for i in range(1, n_images + 1):
        img = _background(rng, width, height)
        image_anns = []
        for _ in range(int(rng.integers(2, 4))):
            cx, cy = rng.uniform(80, width - 80), rng.uniform(80, height - 80)
            for _ in range(int(rng.integers(3, 9))):
                c = int(rng.integers(1, 4))
                (wl, wh), (hl, hh), colour = _CLASS_SHAPES[c]
                w, h = float(rng.integers(wl, wh + 1)), float(rng.integers(hl, hh + 1))
                x = float(np.floor(cx + rng.normal(0, 35) - w / 2))
                y = float(np.floor(cy + rng.normal(0, 35) - h / 2))
                b = clamp_box(BBox(x, y, w, h), width, height)
                if b is None or b.w < 3 or b.h < 3:
                    continue
                _draw(img, b, colour, rng)
                image_anns.append(Annotation(i, b, c))
        name = f"images/{i:03d}.png"
        save_image(out_dir / name, img)
        images.append(ImageRecord(i, width, height, name))
        anns.extend(image_anns)
        sim = simulate_detections(
            image_anns,
            DetectorNoise(miss_rate=0.1, false_rate=0.1, jitter_std_px=1.0, score_mu=0.75, score_sigma=0.12),
            seed=int(rng.integers(2**31)), image_size=size, image_id=i, classes=sorted(CATEGORIES),
        )
        dets.extend(sim.detections)
    write_dataset(out_dir / "annotations.json", images, anns, CATEGORIES)
    write_json(out_dir / "detections.json", detections_to_json(dets))
    config = {
        "schema": SCHEMA_VERSION,
        "global_seed": seed,
        "paths": {"dataset": "annotations.json", "detections": "detections.json", "output_dir": "out"},
        "generator": {"mode": "builtin", "background": "source"},
        "merge": {"mode": "mosaic", "canvas": [1280, 1280]},
    }
    cfg_path = out_dir / "config.json"
    write_json(cfg_path, config)
    return cfg_path
