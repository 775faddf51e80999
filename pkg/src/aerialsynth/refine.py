"""Detector-guided label refinement for synthesized images.

Given the layout labels an image was generated from and a detector's output
on that image, the labels are corrected in three passes:

1. keep layout labels re-found by a detection scoring at least the class's
   ``alpha`` quantile; unmatched or weakly matched labels are dropped;
2. add unmatched detections scoring at least the class's ``beta`` quantile;
3. replace kept labels by their detection (box and class) when the detection
   scores strictly above the class's ``gamma`` quantile.

Quantiles are taken per detected class from a ``ClassScoreModel``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .detector_io import ClassScoreModel, class_quantile
from .errors import ClassNotFitted
from .geometry import Annotation, BBox, Detection, greedy_iou_match

logger = logging.getLogger(__name__)

KEPT = "kept"
KEPT_REPLACED = "kept_replaced"
ADDED_FALSE_GEN = "added_false_gen"


@dataclass(frozen=True)
class RefineConfig:
    tau_ref: float = 0.5
    alpha: float = 0.1
    beta: float = 0.9
    gamma: float = 0.9

    def __post_init__(self):
        if not 0.0 < self.tau_ref <= 1.0:
            raise ValueError(f"tau_ref {self.tau_ref} not in (0, 1]")
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} {v} not in (0, 1)")


@dataclass(frozen=True)
class RefinedLabel:
    bbox: BBox
    class_id: int
    provenance: str
    matched_score: Optional[float] = None
    real_index: Optional[int] = None
    det_index: Optional[int] = None

    def to_json(self) -> dict:
        return {
            "bbox": self.bbox.to_list(),
            "class_id": self.class_id,
            "provenance": self.provenance,
            "matched_score": self.matched_score,
            "real_index": self.real_index,
            "det_index": self.det_index,
        }


@dataclass
class RefineReport:
    n_input: int = 0
    n_missed_dropped: int = 0
    n_low_conf_dropped: int = 0
    n_false_added: int = 0
    n_replaced: int = 0
    n_output: int = 0
    n_warnings: int = 0

    def __add__(self, other: "RefineReport") -> "RefineReport":
        return RefineReport(*(getattr(self, f.name) + getattr(other, f.name) for f in fields(self)))

    def check(self) -> None:
        expected = self.n_input - self.n_missed_dropped - self.n_low_conf_dropped + self.n_false_added
        if self.n_output != expected:
            raise AssertionError(f"refinement report does not balance: {self}")

    def to_json(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def match_labels(real: Sequence[Annotation], det: Sequence[Detection], tau_ref: float) -> Dict[int, int]:
    """Class-agnostic one-to-one matching, annotation index -> detection index."""
    return {i: j for i, j, _ in greedy_iou_match([a.bbox for a in real], [d.bbox for d in det], tau_ref)}


def refine(real: Sequence[Annotation], det: Sequence[Detection], model: ClassScoreModel,
           cfg: RefineConfig = RefineConfig()) -> Tuple[List[RefinedLabel], RefineReport]:
    report = RefineReport(n_input=len(real))
    cache: Dict[Tuple[int, float], Optional[float]] = {}

    def threshold(c: int, level: float) -> Optional[float]:
        if (c, level) not in cache:
            try:
                cache[(c, level)] = class_quantile(model, c, level)
            except ClassNotFitted:
                report.n_warnings += 1
                logger.warning("class %d has no score model; its detections count as low confidence", c)
                cache[(c, level)] = None
        return cache[(c, level)]

    def passes(d: Detection, level: float, strict: bool = False) -> bool:
        thr = threshold(d.category_id, level)
        if thr is None:
            return False
        return d.score > thr if strict else d.score >= thr

    matches = match_labels(real, det, cfg.tau_ref)

    # missed generations / low-confidence matches
    kept: List[RefinedLabel] = []
    for i, a in enumerate(real):
        j = matches.get(i)
        if j is None:
            report.n_missed_dropped += 1
        elif passes(det[j], cfg.alpha):
            kept.append(RefinedLabel(a.bbox, a.category_id, KEPT, det[j].score, i, j))
        else:
            report.n_low_conf_dropped += 1

    # false generations
    matched_dets = set(matches.values())
    added = []
    for j, d in enumerate(det):
        if j not in matched_dets and passes(d, cfg.beta):
            added.append(RefinedLabel(d.bbox, d.category_id, ADDED_FALSE_GEN, d.score, None, j))
    report.n_false_added = len(added)

    # misalignments; added labels are never revisited
    for n, lab in enumerate(kept):
        d = det[lab.det_index]
        if passes(d, cfg.gamma, strict=True):
            kept[n] = RefinedLabel(d.bbox, d.category_id, KEPT_REPLACED, d.score, lab.real_index, lab.det_index)
            report.n_replaced += 1

    out = kept + added
    report.n_output = len(out)
    report.check()
    return out, report


# --- simulation and evaluation -------------------------------------------------

@dataclass(frozen=True)
class DetectorNoise:
    miss_rate: float = 0.0
    false_rate: float = 0.0
    jitter_std_px: float = 0.0
    score_mu: float = 0.8
    score_sigma: float = 0.1
    class_scores: Mapping[int, Tuple[float, float]] = field(default_factory=dict)  # class -> (mu, sigma)

    def __post_init__(self):
        for name in ("miss_rate", "false_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.jitter_std_px < 0:
            raise ValueError("jitter_std_px must be >= 0")

    def score_params(self, c: int) -> Tuple[float, float]:
        return self.class_scores.get(c, (self.score_mu, self.score_sigma))


@dataclass
class SimulatedDetections:
    detections: List[Detection]
    sources: List[Optional[int]]  # gt index each detection came from, None if injected
    n_gt: int = 0

    @property
    def missed(self) -> List[int]:
        return sorted(set(range(self.n_gt)) - {s for s in self.sources if s is not None})


def simulate_detections(gt: Sequence[Annotation], noise: DetectorNoise, seed: int,
                        image_size: Tuple[int, int] = (256, 256), image_id: Optional[int] = None,
                        classes: Optional[Sequence[int]] = None) -> SimulatedDetections:
    """Deterministic stand-in for a detector, recording where each detection came from."""
    rng = np.random.default_rng(seed)
    if image_id is None:
        image_id = gt[0].image_id if gt else 0
    classes = sorted(set(classes or ()) or {a.category_id for a in gt} or {1})

    def score(c: int) -> float:
        mu, sigma = noise.score_params(c)
        s = mu if sigma == 0 else rng.normal(mu, sigma)
        return float(min(max(s, 0.0), 1.0))

    dets, sources = [], []
    for i, a in enumerate(gt):
        if rng.random() < noise.miss_rate:
            continue
        b = a.bbox
        if noise.jitter_std_px > 0:
            dx, dy, dw, dh = rng.normal(0.0, noise.jitter_std_px, 4)
            b = BBox(b.x + dx, b.y + dy, max(b.w + dw, 1.0), max(b.h + dh, 1.0))
        dets.append(Detection(image_id, b, a.category_id, score(a.category_id)))
        sources.append(i)

    width, height = image_size
    n_false = int(rng.poisson(noise.false_rate * len(gt))) if gt else 0
    for _ in range(n_false):
        w = float(rng.uniform(4.0, max(4.0, min(64.0, width / 4))))
        h = float(rng.uniform(4.0, max(4.0, min(64.0, height / 4))))
        x = float(rng.uniform(0.0, max(width - w, 0.0)))
        y = float(rng.uniform(0.0, max(height - h, 0.0)))
        c = int(classes[int(rng.integers(len(classes)))])
        dets.append(Detection(image_id, BBox(x, y, w, h), c, score(c)))
        sources.append(None)
    return SimulatedDetections(dets, sources, len(gt))


def simulate_detector(gt: Sequence[Annotation], noise: DetectorNoise, seed: int,
                      image_size: Tuple[int, int] = (256, 256), image_id: Optional[int] = None) -> List[Detection]:
    return simulate_detections(gt, noise, seed, image_size, image_id).detections


@dataclass(frozen=True)
class LabelQuality:
    precision: float
    recall: float
    precision_undefined: bool = False
    recall_undefined: bool = False


def label_quality(refined: Sequence[RefinedLabel], truth: Sequence[Annotation], iou_thr: float = 0.5) -> LabelQuality:
    """Precision/recall of refined labels against known truth.

    An empty denominator reports 1.0 with the matching ``*_undefined`` flag set.
    """
    matched = len(greedy_iou_match(
        [r.bbox for r in refined], [t.bbox for t in truth], iou_thr,
        lambda i, j: refined[i].class_id == truth[j].category_id,
    ))
    return LabelQuality(
        matched / len(refined) if refined else 1.0,
        matched / len(truth) if truth else 1.0,
        not refined,
        not truth,
    )
