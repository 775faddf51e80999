"""Visual prototype selection.

Two filters run in sequence. The first keeps ground-truth boxes that a
detector re-finds confidently and accurately (IoU >= ``tau_det`` and a score
above the class's ``alpha`` quantile). The second keeps candidates whose
patch embedding lies close to the class centroid, where "close" is a
per-class quantile of squared distances.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ._util import write_json
from .detector_io import ClassScoreModel, class_quantile, empirical_quantile
from .errors import ClassNotFitted, EmbeddingMissing, FileNotFound, MalformedFile
from .geometry import Annotation, BBox, Dataset, Detection, ImageRecord, greedy_iou_match
from .raster import area_resample, crop_box, load_image, save_image

logger = logging.getLogger(__name__)

EMBED_GRID = 8


@dataclass(frozen=True)
class Candidate:
    annotation: Annotation
    detection: Detection
    ann_index: int  # position of the annotation among its image's annotations
    iou: float


@dataclass
class CandidateSet:
    class_id: int
    members: List[Candidate] = field(default_factory=list)
    score_threshold: Optional[float] = None
    tau_det: Optional[float] = None


@dataclass(frozen=True, eq=False)
class Prototype:
    class_id: int
    source_image_id: int
    bbox: BBox
    patch: np.ndarray
    embedding: np.ndarray
    ann_index: int = -1

    @property
    def key(self) -> Tuple[int, float, float]:
        return (self.source_image_id, self.bbox.x, self.bbox.y)


LATENT_TIE_EPS = 1e-12  # embeddings are unit vectors, so d2 <= 4


def match_detections(gts: Sequence[Annotation], dets: Sequence[Detection],
                     tau_det: float) -> List[Tuple[int, int, float]]:
    """Greedy one-to-one same-class matching in descending IoU order.

    Returns ``(gt_index, det_index, iou)`` triples with ``iou >= tau_det``.
    """
    return greedy_iou_match([g.bbox for g in gts], [d.bbox for d in dets], tau_det,
                            lambda i, j: gts[i].category_id == dets[j].category_id)


def select_visual_candidates(dataset: Dataset, dets: Sequence[Detection], model: ClassScoreModel,
                             tau_det: float = 0.5, alpha: float = 0.5) -> Dict[int, CandidateSet]:
    by_image: Dict[int, List[Detection]] = {}
    for d in dets:
        by_image.setdefault(d.image_id, []).append(d)

    classes = sorted(set(dataset.categories) | {d.category_id for d in dets})
    out = {c: CandidateSet(c, tau_det=tau_det) for c in classes}
    thresholds: Dict[int, Optional[float]] = {}
    for c in classes:
        try:
            thresholds[c] = class_quantile(model, c, alpha)
        except ClassNotFitted as exc:
            if any(d.category_id == c for d in dets):
                logger.warning("%s; candidate set left empty", exc)
            thresholds[c] = None
        out[c].score_threshold = thresholds[c]

    for img in dataset.images:
        gts = dataset.annotations_for(img.id)
        img_dets = by_image.get(img.id, [])
        for gi, dj, v in match_detections(gts, img_dets, tau_det):
            det = img_dets[dj]
            thr = thresholds.get(det.category_id)
            if thr is not None and det.score >= thr:
                out[det.category_id].members.append(Candidate(gts[gi], det, gi, v))
    return out


def embed_patch(patch: np.ndarray) -> np.ndarray:
    """Builtin embedding: 8x8 area-average colour grid, flattened and L2-normalized."""
    if patch.size == 0:
        raise ValueError("empty patch")
    arr = np.asarray(patch, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    vec = area_resample(arr, EMBED_GRID, EMBED_GRID).reshape(-1)
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        # all-black patch: fall back to the uniform direction
        return np.full(vec.shape, 1.0 / np.sqrt(vec.size))
    return vec / norm


class ExternalEmbeddings:
    """Embeddings supplied by a JSON map ``"imageId:annIndex" -> [floats]``."""

    def __init__(self, vectors: Mapping[str, Sequence[float]]):
        self.vectors = {}
        for k, v in vectors.items():
            arr = np.asarray(v, dtype=np.float64)
            norm = np.linalg.norm(arr)
            if arr.ndim != 1 or norm == 0 or not np.all(np.isfinite(arr)):
                raise MalformedFile(f"embedding {k!r} is not a finite non-zero vector")
            self.vectors[k] = arr / norm

    @classmethod
    def load(cls, path: Path) -> "ExternalEmbeddings":
        path = Path(path)
        if not path.exists():
            raise FileNotFound(f"file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise MalformedFile(f"{path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise MalformedFile(f"{path}: expected an object")
        return cls(doc)

    def __call__(self, image_id: int, ann_index: int, patch: np.ndarray) -> np.ndarray:
        key = f"{image_id}:{ann_index}"
        try:
            return self.vectors[key]
        except KeyError:
            raise EmbeddingMissing(f"no embedding for {key}") from None


def builtin_embedder(image_id: int, ann_index: int, patch: np.ndarray) -> np.ndarray:
    return embed_patch(patch)


Embedder = Callable[[int, int, np.ndarray], np.ndarray]
ImageLoader = Callable[[ImageRecord], np.ndarray]


def _candidate_key(c: Candidate):
    a = c.annotation
    return (a.image_id, a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h, c.ann_index)


def select_prototypes(cands: Mapping[int, CandidateSet], dataset: Dataset, tau_lat_quantile: float = 0.5,
                      embedder: Embedder = builtin_embedder,
                      image_loader: Optional[ImageLoader] = None) -> Dict[int, List[Prototype]]:
    """Keep, per class, candidates whose squared embedding distance to the
    class centroid is within the ``tau_lat_quantile`` quantile."""
    if not 0.0 < tau_lat_quantile <= 1.0:
        raise ValueError(f"tau_lat_quantile {tau_lat_quantile} not in (0, 1]")
    if image_loader is None:
        image_loader = lambda rec: load_image(dataset.image_path(rec))  # noqa: E731
    cache: Dict[int, np.ndarray] = {}

    def pixels(image_id: int) -> np.ndarray:
        if image_id not in cache:
            cache[image_id] = image_loader(dataset.image(image_id))
        return cache[image_id]

    bank: Dict[int, List[Prototype]] = {}
    for c in sorted(cands):
        members = sorted(cands[c].members, key=_candidate_key)
        if not members:
            continue
        protos = []
        for m in members:
            a = m.annotation
            patch = crop_box(pixels(a.image_id), a.bbox)
            emb = np.asarray(embedder(a.image_id, m.ann_index, patch), dtype=np.float64)
            protos.append(Prototype(c, a.image_id, a.bbox, patch, emb, m.ann_index))
        embs = np.stack([p.embedding for p in protos])
        centroid = embs.mean(axis=0)
        d2 = ((embs - centroid) ** 2).sum(axis=1)
        thr = empirical_quantile(sorted(d2.tolist()), tau_lat_quantile)
        # distances equal up to rounding (e.g. both members of a pair) are ties
        keep = [p for p, d in zip(protos, d2) if d <= thr + LATENT_TIE_EPS]
        bank[c] = sorted(keep, key=lambda p: p.key)
    return bank


# --- bank directory ------------------------------------------------------------

def write_bank(directory: Path, bank: Mapping[int, Sequence[Prototype]]) -> dict:
    directory = Path(directory)
    index = []
    for c in sorted(bank):
        for i, p in enumerate(bank[c]):
            rel = f"crops/c{c}_{i:05d}.png"
            save_image(directory / rel, p.patch)
            index.append({
                "class_id": c,
                "source_image_id": p.source_image_id,
                "ann_index": p.ann_index,
                "bbox": p.bbox.to_list(),
                "embedding": [float(v) for v in p.embedding],
                "patch_file": rel,
            })
    doc = {"prototypes": index}
    write_json(directory / "index.json", doc)
    return doc


def read_bank(directory: Path) -> Dict[int, List[Prototype]]:
    directory = Path(directory)
    index_path = directory / "index.json"
    if not index_path.exists():
        raise FileNotFound(f"file not found: {index_path}")
    try:
        doc = json.loads(index_path.read_text())
        bank: Dict[int, List[Prototype]] = {}
        for e in doc["prototypes"]:
            p = Prototype(
                int(e["class_id"]), int(e["source_image_id"]), BBox(*e["bbox"]),
                load_image(directory / e["patch_file"]),
                np.asarray(e["embedding"], dtype=np.float64), int(e.get("ann_index", -1)),
            )
            bank.setdefault(p.class_id, []).append(p)
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise MalformedFile(f"{index_path}: {exc}") from exc
    return bank
