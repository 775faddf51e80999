"""Raster helpers: PNG I/O and exact area-average resampling.

Images are ``uint8`` arrays of shape ``(H, W, 3)``; float rasters are
``(H, W)`` arrays.
"""

from __future__ import annotations

import io
from pathlib import Path
from typing import Tuple

import numpy as np
from PIL import Image

from ._util import atomic_write_bytes, round_half_up
from .errors import FileNotFound, MalformedFile
from .geometry import BBox


def load_image(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFound(f"file not found: {path}")
    try:
        with Image.open(path) as im:
            return np.array(im.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise MalformedFile(f"cannot decode image {path}: {exc}") from exc


def image_size(path: Path) -> Tuple[int, int]:
    """(width, height) without decoding pixels."""
    with Image.open(path) as im:
        return im.size


def save_image(path: Path, arr: np.ndarray) -> None:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(arr, dtype=np.uint8), mode="RGB").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def save_weight_map(path: Path, weights: np.ndarray) -> None:
    """16-bit PNG, stored value = round(1000 * w)."""
    fixed = np.floor(np.asarray(weights, dtype=np.float64) * 1000.0 + 0.5)
    if fixed.min(initial=0) < 0 or fixed.max(initial=0) > 65535:
        raise ValueError("weight map out of 16-bit fixed-point range")
    buf = io.BytesIO()
    Image.fromarray(fixed.astype(np.uint16)).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def load_weight_map(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im, dtype=np.float64) / 1000.0


def _area_weights(n_src: int, n_dst: int) -> np.ndarray:
    """Row i holds the fraction of each source cell covered by destination cell i,
    normalized so each row sums to 1."""
    scale = n_src / n_dst
    edges = np.arange(n_dst + 1, dtype=np.float64) * scale
    lo, hi = edges[:-1, None], edges[1:, None]
    src_lo = np.arange(n_src, dtype=np.float64)[None, :]
    overlap = np.clip(np.minimum(hi, src_lo + 1) - np.maximum(lo, src_lo), 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def area_resample(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Area-average resample to ``(out_h, out_w)``; returns float64."""
    src = np.asarray(img, dtype=np.float64)
    ry = _area_weights(src.shape[0], out_h)
    rx = _area_weights(src.shape[1], out_w)
    if src.ndim == 2:
        return ry @ src @ rx.T
    return np.einsum("ij,jkc,lk->ilc", ry, src, rx)


def to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(arr + 0.5), 0, 255).astype(np.uint8)


def pixel_rect(b: BBox, width: int, height: int) -> Tuple[int, int, int, int]:
    """Integer pixel rectangle ``(x0, y0, x1, y1)`` covered when painting ``b``.

    Edges are rounded half-up and clamped to the canvas; a box always covers
    at least one pixel.
    """
    x0 = min(max(round_half_up(b.x), 0), width - 1)
    y0 = min(max(round_half_up(b.y), 0), height - 1)
    x1 = min(max(round_half_up(b.x2), x0 + 1), width)
    y1 = min(max(round_half_up(b.y2), y0 + 1), height)
    return x0, y0, x1, y1


def crop_box(img: np.ndarray, b: BBox) -> np.ndarray:
    """Crop the pixels of ``b``: size round(w) x round(h), shifted inward at borders."""
    h_img, w_img = img.shape[:2]
    pw = min(max(round_half_up(b.w), 1), w_img)
    ph = min(max(round_half_up(b.h), 1), h_img)
    x0 = min(max(round_half_up(b.x), 0), w_img - pw)
    y0 = min(max(round_half_up(b.y), 0), h_img - ph)
    return img[y0:y0 + ph, x0:x0 + pw].copy()
