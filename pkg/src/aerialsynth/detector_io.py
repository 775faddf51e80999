"""COCO annotation / detection-result I/O and per-class confidence models.

The score model fits a Gaussian ``N(mu_c, sigma_c^2)`` to each class's
detection confidences and exposes its quantile function. Classes with fewer
than ``MIN_GAUSSIAN_SAMPLES`` scores fall back to empirical quantiles.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import jsonschema

from ._util import write_json
from .errors import (
    AlphaOutOfRange,
    ClassNotFitted,
    DanglingImageRef,
    FileNotFound,
    MalformedFile,
    NoSamplesForClass,
    UnknownCategory,
)
from .geometry import Annotation, BBox, Dataset, Detection, ImageRecord, clamp_box

logger = logging.getLogger(__name__)

MIN_GAUSSIAN_SAMPLES = 30

_NUM = {"type": "number"}
_BBOX = {"type": "array", "items": _NUM, "minItems": 4, "maxItems": 4}

COCO_SCHEMA = {
    "type": "object",
    "required": ["images", "annotations", "categories"],
    "properties": {
        "images": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "width", "height", "file_name"],
                "properties": {
                    "id": {"type": "integer"},
                    "width": {"type": "integer", "minimum": 1},
                    "height": {"type": "integer", "minimum": 1},
                    "file_name": {"type": "string"},
                },
            },
        },
        "annotations": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["image_id", "bbox", "category_id"],
                "properties": {
                    "id": {"type": "integer"},
                    "image_id": {"type": "integer"},
                    "bbox": _BBOX,
                    "category_id": {"type": "integer"},
                },
            },
        },
        "categories": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "name"],
                "properties": {"id": {"type": "integer"}, "name": {"type": "string"}},
            },
        },
    },
}

DETECTIONS_SCHEMA = {
    "type": "array",
    "items": {
        "type": "object",
        "required": ["image_id", "category_id", "bbox", "score"],
        "properties": {
            "image_id": {"type": "integer"},
            "category_id": {"type": "integer"},
            "bbox": _BBOX,
            "score": _NUM,
        },
    },
}


@dataclass
class LoadReport:
    """Warning counters filled in by the loaders."""

    dropped: int = 0
    clamped: int = 0
    scores_clamped: int = 0

    @property
    def warnings(self) -> int:
        return self.dropped + self.clamped + self.scores_clamped


def _read_json(path: Path):
    path = Path(path)
    if not path.exists():
        raise FileNotFound(f"file not found: {path}")
    try:
        return json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedFile(f"{path}: {exc}") from exc


def _validate(doc, schema, path) -> None:
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path)
        raise MalformedFile(f"{path}: {exc.message} at '{where}'") from None


def _finite(vals: Sequence[float], path, what) -> None:
    if not all(math.isfinite(v) for v in vals):
        raise MalformedFile(f"{path}: non-finite value in {what}")


def parse_dataset(doc: dict, path="<memory>", root: Optional[Path] = None,
                  report: Optional[LoadReport] = None) -> Dataset:
    _validate(doc, COCO_SCHEMA, path)
    report = report if report is not None else LoadReport()
    categories = {int(c["id"]): c["name"] for c in doc["categories"]}
    images: List[ImageRecord] = []
    seen = {}
    for im in doc["images"]:
        if im["id"] in seen:
            raise MalformedFile(f"{path}: duplicate image id {im['id']}")
        rec = ImageRecord(int(im["id"]), int(im["width"]), int(im["height"]), im["file_name"])
        seen[rec.id] = rec
        images.append(rec)

    annotations: List[Annotation] = []
    for i, a in enumerate(doc["annotations"]):
        _finite(a["bbox"], path, f"annotation {i}")
        if a["category_id"] not in categories:
            raise UnknownCategory(f"{path}: annotation {i} has unknown category {a['category_id']}")
        img = seen.get(a["image_id"])
        if img is None:
            raise DanglingImageRef(f"{path}: annotation {i} references missing image {a['image_id']}")
        x, y, w, h = (float(v) for v in a["bbox"])
        if w <= 0 or h <= 0:
            report.dropped += 1
            continue
        raw = BBox(x, y, w, h)
        box = clamp_box(raw, img.width, img.height)
        if box is None:
            report.dropped += 1
            continue
        if box != raw:
            report.clamped += 1
        annotations.append(Annotation(img.id, box, int(a["category_id"]), a.get("id")))
    if report.dropped or report.clamped:
        logger.warning("%s: dropped %d degenerate and clamped %d out-of-bounds boxes",
                       path, report.dropped, report.clamped)
    return Dataset(images, annotations, categories, root=root,
                   n_dropped=report.dropped, n_clamped=report.clamped)


def load_dataset(path: Path, report: Optional[LoadReport] = None) -> Dataset:
    path = Path(path)
    return parse_dataset(_read_json(path), path, root=path.parent, report=report)


def dataset_to_coco(images: Iterable[ImageRecord], annotations: Iterable[Annotation],
                    categories: Mapping[int, str]) -> dict:
    anns = []
    for i, a in enumerate(annotations, start=1):
        anns.append({
            "id": i,
            "image_id": a.image_id,
            "bbox": a.bbox.to_list(),
            "category_id": a.category_id,
            "area": a.bbox.area,
            "iscrowd": 0,
        })
    return {
        "images": [
            {"id": im.id, "width": im.width, "height": im.height, "file_name": im.file_path}
            for im in images
        ],
        "annotations": anns,
        "categories": [{"id": k, "name": v} for k, v in sorted(categories.items())],
    }


def write_dataset(path: Path, images, annotations, categories) -> None:
    write_json(path, dataset_to_coco(images, annotations, categories))


def parse_detections(doc, path="<memory>", report: Optional[LoadReport] = None) -> List[Detection]:
    _validate(doc, DETECTIONS_SCHEMA, path)
    report = report if report is not None else LoadReport()
    dets = []
    for i, d in enumerate(doc):
        _finite(list(d["bbox"]) + [d["score"]], path, f"detection {i}")
        x, y, w, h = (float(v) for v in d["bbox"])
        if w <= 0 or h <= 0:
            report.dropped += 1
            continue
        score = float(d["score"])
        if score < 0.0 or score > 1.0:
            score = min(max(score, 0.0), 1.0)
            report.scores_clamped += 1
        dets.append(Detection(int(d["image_id"]), BBox(x, y, w, h), int(d["category_id"]), score))
    if report.warnings:
        logger.warning("%s: clamped %d scores, dropped %d degenerate boxes",
                       path, report.scores_clamped, report.dropped)
    return dets


def load_detections(path: Path, report: Optional[LoadReport] = None) -> List[Detection]:
    path = Path(path)
    return parse_detections(_read_json(path), path, report)


def detections_to_json(dets: Iterable[Detection]) -> list:
    return [
        {"image_id": d.image_id, "category_id": d.category_id, "bbox": d.bbox.to_list(), "score": d.score}
        for d in dets
    ]


# --- standard normal inverse -------------------------------------------------

# Acklam's rational approximation (|rel err| < 1.15e-9), followed by one
# Halley step against erfc which brings it to full double precision.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _tail(q: float) -> float:
    num = ((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]
    den = (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
    return num / den


def norm_ppf(p: float) -> float:
    """Inverse of the standard normal CDF on the open interval (0, 1)."""
    if not 0.0 < p < 1.0:
        raise AlphaOutOfRange(f"quantile level {p} not in (0, 1)")
    if p > 0.5:
        # 1 - p is exact here; working in the lower half keeps the Halley step accurate
        return -norm_ppf(1.0 - p)
    if p < _P_LOW:
        x = _tail(math.sqrt(-2.0 * math.log(p)))
    else:
        q = p - 0.5
        r = q * q
        num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
        den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
        x = num / den
    e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(x * x / 2.0)
    return x - u / (1.0 + x * u / 2.0)


# --- class score model -------------------------------------------------------

@dataclass(frozen=True)
class ClassStats:
    mu: float
    sigma: float
    n_samples: int
    fallback_scores: Tuple[float, ...] = ()

    @property
    def gaussian(self) -> bool:
        return self.n_samples >= MIN_GAUSSIAN_SAMPLES and self.sigma > 0


@dataclass(frozen=True)
class ClassScoreModel:
    classes: Dict[int, ClassStats]
    missing: Tuple[int, ...] = ()

    def quantile(self, class_id: int, alpha: float) -> float:
        return class_quantile(self, class_id, alpha)

    def to_json(self) -> dict:
        return {
            "classes": {
                str(c): {"mu": s.mu, "sigma": s.sigma, "n_samples": s.n_samples,
                         "fallback_scores": list(s.fallback_scores)}
                for c, s in sorted(self.classes.items())
            },
            "missing": list(self.missing),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ClassScoreModel":
        return cls(
            {int(c): ClassStats(v["mu"], v["sigma"], v["n_samples"], tuple(v["fallback_scores"]))
             for c, v in doc["classes"].items()},
            tuple(doc.get("missing", ())),
        )


def _fit_scores(scores: Sequence[float]) -> ClassStats:
    s = sorted(scores)
    n = len(s)
    mu = math.fsum(s) / n
    if n < 2 or s[0] == s[-1]:
        sigma = 0.0
    else:
        sigma = math.sqrt(math.fsum((v - mu) ** 2 for v in s) / (n - 1))
    fallback = tuple(s) if n < MIN_GAUSSIAN_SAMPLES else ()
    return ClassStats(mu, sigma, n, fallback)


def fit_class_score_model(dets: Iterable[Detection],
                          classes: Optional[Iterable[int]] = None) -> ClassScoreModel:
    """Fit one score distribution per predicted class.

    Classes listed in ``classes`` without any detection are recorded in
    ``model.missing`` (and logged) instead of aborting the fit.
    """
    groups: Dict[int, List[float]] = {}
    for d in dets:
        groups.setdefault(d.category_id, []).append(d.score)
    fitted = {c: _fit_scores(v) for c, v in sorted(groups.items())}
    missing = tuple(sorted(set(classes or ()) - set(fitted)))
    for c in missing:
        logger.warning("%s", NoSamplesForClass(f"no detections for class {c}"))
    if not fitted and missing:
        raise NoSamplesForClass("no class has any detection")
    return ClassScoreModel(fitted, missing)


def empirical_quantile(sorted_scores: Sequence[float], alpha: float) -> float:
    """Linear interpolation between order statistics at rank (n - 1) * alpha."""
    n = len(sorted_scores)
    if n == 1:
        return sorted_scores[0]
    h = (n - 1) * alpha
    lo = int(math.floor(h))
    if lo >= n - 1:
        return sorted_scores[-1]
    frac = h - lo
    a, b = sorted_scores[lo], sorted_scores[lo + 1]
    return a + frac * (b - a)


def class_quantile(model: ClassScoreModel, c: int, alpha: float) -> float:
    if not 0.0 < alpha < 1.0:
        raise AlphaOutOfRange(f"alpha {alpha} not in (0, 1)")
    stats = model.classes.get(c)
    if stats is None:
        raise ClassNotFitted(f"class {c} has no fitted score model")
    if stats.gaussian:
        return stats.mu + stats.sigma * norm_ppf(alpha)
    if stats.sigma == 0.0:
        return stats.mu
    return empirical_quantile(stats.fallback_scores, alpha)
