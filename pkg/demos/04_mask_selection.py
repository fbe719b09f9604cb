"""Filter detections by confidence and pick the best mask hypothesis.

Selection maximizes IoU(mask, box) - lambda * area(mask): the penalty term
rejects masks that trivially inflate IoU by covering everything.
"""

import numpy as np

from subjectkit.image import Mask
from subjectkit.masks import (
    Detection,
    MaskCandidate,
    box_mask_iou,
    dilate,
    filter_detections,
    select_mask,
    selection_score,
)

detections = [
    Detection(box=(0.20, 0.25, 0.60, 0.80), score=0.91, label="person"),
    Detection(box=(0.55, 0.10, 0.95, 0.45), score=0.47, label="person"),
    Detection(box=(0.02, 0.05, 0.30, 0.30), score=0.12, label="person"),
]
kept = filter_detections(detections, tau=0.3)
print(f"{len(kept)} of {len(detections)} detections survive tau=0.3")
best = max(kept, key=lambda d: d.score)
print(f"best detection: box={best.box}, score={best.score}")

# three mask hypotheses on a 64x64 grid: tight, generous, whole-frame
h = w = 64


def rect(y0, y1, x0, x1):
    data = np.zeros((h, w), dtype=np.float32)
    data[y0:y1, x0:x1] = 1.0
    return Mask(data)


candidates = [
    MaskCandidate(rect(16, 51, 13, 38)),   # hugs the box
    MaskCandidate(rect(10, 58, 8, 45)),    # generous margin
    MaskCandidate(rect(0, 64, 0, 64)),     # everything
]

for lam in (0.0, 0.5, 1.5):
    chosen = select_mask(candidates, best.box, lambda_sel=lam)
    idx = candidates.index(chosen)
    scores = [round(selection_score(c, best.box, lam), 3) for c in candidates]
    print(f"lambda={lam}: scores={scores} -> candidate {idx}")

winner = select_mask(candidates, best.box, lambda_sel=0.5)
print(f"winner IoU with box: {box_mask_iou(winner.mask, best.box):.3f}")

grown = dilate(winner.mask, radius=4)
print(f"dilation raised the area from {int(winner.mask.binary().sum())} "
      f"to {int(grown.binary().sum())} pixels")
