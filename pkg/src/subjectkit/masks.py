"""Detection filtering and optimal-mask selection over backend candidates.

The segmentation backend supplies detections (normalized boxes with
confidence scores) and mask hypotheses; this module owns the deterministic
post-processing: the confidence threshold, the IoU-vs-area selection rule
argmax_i IoU(M_i, B) - lambda * |M_i|, and Euclidean dilation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .image import Mask, distance_transform

__all__ = [
    "DEFAULT_TAU",
    "DegenerateBoxError",
    "Detection",
    "MaskCandidate",
    "box_mask_iou",
    "dilate",
    "filter_detections",
    "rasterize_box",
    "select_mask",
]

# confidence threshold default; the selection rule is threshold-free
DEFAULT_TAU = 0.3


class DegenerateBoxError(ValueError):
    """Box rasterizes to zero pixels."""


@dataclass(frozen=True)
class Detection:
    """One detector proposal: normalized (x0, y0, x1, y1) box, score, label."""

    box: tuple[float, float, float, float]
    score: float
    label: str

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate box {self.box}")
        if not all(0.0 <= v <= 1.0 for v in self.box):
            raise ValueError(f"box coordinates must be normalized to [0,1]: {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0,1], got {self.score}")


@dataclass(frozen=True)
class MaskCandidate:
    """A mask hypothesis, optionally with the backend's own quality estimate."""

    mask: Mask
    predicted_quality: float | None = None


def filter_detections(dets: list[Detection], tau: float) -> list[Detection]:
    """Keep detections with score >= tau, preserving input order."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0,1], got {tau}")
    return [d for d in dets if d.score >= tau]


def rasterize_box(box: tuple[float, float, float, float],
                  height: int, width: int) -> np.ndarray:
    """Half-open pixel rasterization of a normalized box.

    Column j is inside iff round(x0*w) <= j < round(x1*w) (same for rows),
    so two boxes sharing an edge never double-count pixels.
    """
    x0, y0, x1, y1 = box
    jx0 = int(round(x0 * width))
    jx1 = int(round(x1 * width))
    iy0 = int(round(y0 * height))
    iy1 = int(round(y1 * height))
    grid = np.zeros((height, width), dtype=bool)
    grid[iy0:iy1, jx0:jx1] = True
    if not grid.any():
        raise DegenerateBoxError(f"box {box} covers no pixels on a {width}x{height} grid")
    return grid


def box_mask_iou(mask: Mask, box: tuple[float, float, float, float]) -> float:
    """|binarized mask AND box| / |binarized mask OR box|."""
    box_px = rasterize_box(box, mask.height, mask.width)
    mask_px = mask.binary()
    union = np.logical_or(mask_px, box_px).sum()
    if union == 0:
        return 0.0
    inter = np.logical_and(mask_px, box_px).sum()
    return float(inter) / float(union)


def selection_score(candidate: MaskCandidate,
                    box: tuple[float, float, float, float],
                    lambda_sel: float) -> float:
    """IoU(mask, box) - lambda * area(mask) / image area."""
    mask = candidate.mask
    area = float(mask.binary().sum()) / float(mask.height * mask.width)
    return box_mask_iou(mask, box) - lambda_sel * area


def select_mask(candidates: list[MaskCandidate],
                box: tuple[float, float, float, float],
                lambda_sel: float = 0.0) -> MaskCandidate:
    """Argmax of the selection score; ties break to the lowest index."""
    if not candidates:
        raise ValueError("no mask candidates to select from")
    if lambda_sel < 0:
        raise ValueError(f"lambda_sel must be >= 0, got {lambda_sel}")
    best = candidates[0]
    best_score = selection_score(best, box, lambda_sel)
    for cand in candidates[1:]:
        score = selection_score(cand, box, lambda_sel)
        if score > best_score:
            best, best_score = cand, score
    return best


def dilate(mask: Mask, radius: float) -> Mask:
    """Grow the binarized mask by a Euclidean radius (radius 0: identity).

    A pixel is set iff some source pixel lies within `radius`; an empty
    mask stays empty.
    """
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    binary = mask.binary()
    if not binary.any():
        return Mask(np.zeros_like(mask.data), threshold=mask.threshold)
    dist = distance_transform(mask)
    grown = dist <= radius
    return Mask(grown.astype(np.float32), threshold=mask.threshold)
