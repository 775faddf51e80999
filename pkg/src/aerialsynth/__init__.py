"""Data-synthesis toolkit for UAV object detection: prototype selection,
layout conditions, focal regions, generator bridge, label refinement and
patch merging."""

from .geometry import AffineScale, Annotation, BBox, Dataset, Detection, ImageRecord, contains, fit_transform, iou

__version__ = "0.1.0"

__all__ = [
    "AffineScale",
    "Annotation",
    "BBox",
    "Dataset",
    "Detection",
    "ImageRecord",
    "contains",
    "fit_transform",
    "iou",
]
