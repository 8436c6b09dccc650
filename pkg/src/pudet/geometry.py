"""Box arithmetic, IoU, greedy NMS and patch tiling.

Boxes are stored as corner + size (``x, y, w, h``) in continuous pixel
coordinates.  The array helpers take ``(N, 4)`` arrays in the same layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"box {name} must be finite, got {getattr(self, name)}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box width and height must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> BoundingBox:
        return cls(cx - w / 2.0, cy - h / 2.0, w, h)

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True)
class ScoredBox:
    box: BoundingBox
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


@dataclass(frozen=True)
class PatchWindow:
    origin_x: int
    origin_y: int
    size: int

    def contains(self, px: float, py: float) -> bool:
        """Half-open containment test for a point in image coordinates."""
        return (self.origin_x <= px < self.origin_x + self.size
                and self.origin_y <= py < self.origin_y + self.size)


def boxes_to_array(boxes: Sequence[BoundingBox]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    # corner arithmetic can overshoot the true area by an ulp
    return min(1.0, inter / (a.area + b.area - inter))


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` xywh arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax2 = a[:, 0] + a[:, 2]
    ay2 = a[:, 1] + a[:, 3]
    bx2 = b[:, 0] + b[:, 2]
    by2 = b[:, 1] + b[:, 3]
    iw = np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(a[:, 0][:, None], b[:, 0][None, :])
    ih = np.minimum(ay2[:, None], by2[None, :]) - np.maximum(a[:, 1][:, None], b[:, 1][None, :])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return np.minimum(inter / union, 1.0)


def nms_arrays(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy NMS over arrays; returns kept indices by descending score."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        return []
    if not np.all(np.isfinite(scores)):
        raise ValueError("NMS scores must be finite")
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    # primary key: score descending; secondary: input index ascending
    order = np.lexsort((np.arange(scores.size), -scores))
    overlaps = iou_matrix(boxes, boxes)
    suppressed = np.zeros(scores.size, dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= overlaps[i] > iou_threshold
    return keep


def nms(candidates: Sequence[ScoredBox], iou_threshold: float) -> list[int]:
    if len(candidates) == 0:
        return []
    boxes = boxes_to_array([c.box for c in candidates])
    scores = np.array([c.score for c in candidates], dtype=np.float64)
    return nms_arrays(boxes, scores, iou_threshold)


def _axis_origins(length: int, patch_size: int, stride: int) -> list[int]:
    origins = list(range(0, length - patch_size + 1, stride))
    if origins[-1] + patch_size < length:
        origins.append(length - patch_size)
    return origins


def tile_image(image_w: int, image_h: int, patch_size: int, overlap: int) -> list[PatchWindow]:
    """Square windows at stride ``patch_size - overlap``, row-major.

    The last window on each axis is shifted inward to end on the image edge.
    """
    if not 0 <= overlap < patch_size <= min(image_w, image_h):
        raise ValueError(
            f"need 0 <= overlap < patch_size <= min(image dims); got overlap={overlap}, "
            f"patch_size={patch_size}, image={image_w}x{image_h}")
    stride = patch_size - overlap
    xs = _axis_origins(image_w, patch_size, stride)
    ys = _axis_origins(image_h, patch_size, stride)
    return [PatchWindow(ox, oy, patch_size) for oy in ys for ox in xs]


def remap_to_image(box: BoundingBox, window: PatchWindow) -> BoundingBox:
    return BoundingBox(box.x + window.origin_x, box.y + window.origin_y, box.w, box.h)


def clip_box(box: BoundingBox, image_w: float, image_h: float) -> BoundingBox | None:
    """Intersect with the image rectangle; ``None`` if nothing remains."""
    x1 = min(max(box.x, 0.0), image_w)
    y1 = min(max(box.y, 0.0), image_h)
    x2 = min(max(box.x + box.w, 0.0), image_w)
    y2 = min(max(box.y + box.h, 0.0), image_h)
    if x2 <= x1 or y2 <= y1:
        return None
    return BoundingBox(x1, y1, x2 - x1, y2 - y1)
