"""Box, mask and dot geometry.

Boxes use half-open pixel-edge coordinates: pixel ``(r, c)`` spans
``[c, c + 1) x [r, r + 1)``, so the tight box of a mask has integer corners
and ``area`` equals the pixel count of a filled rectangle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"invalid box {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def clip(self, width: float, height: float) -> "Box":
        x0 = min(max(self.x_min, 0.0), width)
        y0 = min(max(self.y_min, 0.0), height)
        x1 = min(max(self.x_max, x0), width)
        y1 = min(max(self.y_max, y0), height)
        return Box(x0, y0, x1, y1)


@dataclass(frozen=True)
class Dot:
    x: float
    y: float


@dataclass(frozen=True, eq=False)
class InstanceMask:
    """Binary instance bitmap with the same shape as its image."""

    bitmap: np.ndarray = field(repr=False)

    def __post_init__(self):
        bm = np.asarray(self.bitmap, dtype=bool)
        if bm.ndim != 2:
            raise ValueError("mask bitmap must be 2-D")
        bm.setflags(write=False)
        object.__setattr__(self, "bitmap", bm)

    def __eq__(self, other):
        if not isinstance(other, InstanceMask):
            return NotImplemented
        return self.bitmap.shape == other.bitmap.shape and bool(
            np.array_equal(self.bitmap, other.bitmap)
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bitmap.shape  # type: ignore[return-value]

    @property
    def area(self) -> int:
        return int(self.bitmap.sum())

    @classmethod
    def from_polygon(cls, vertices: Sequence[Sequence[float]], shape: tuple[int, int]) -> "InstanceMask":
        return cls(polygon_to_bitmap(vertices, shape))

    @classmethod
    def from_box(cls, box: Box, shape: tuple[int, int]) -> "InstanceMask":
        """Filled rectangle covering every pixel whose centre lies in ``box``."""
        h, w = shape
        rows = (np.arange(h) + 0.5)[:, None]
        cols = (np.arange(w) + 0.5)[None, :]
        bm = (cols >= box.x_min) & (cols < box.x_max) & (rows >= box.y_min) & (rows < box.y_max)
        return cls(bm)


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    label: str = "lesion"

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


def polygon_to_bitmap(vertices: Sequence[Sequence[float]], shape: tuple[int, int]) -> np.ndarray:
    """Even-odd fill of a polygon, sampled at pixel centres."""
    pts = np.asarray(vertices, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise ValueError("polygon needs at least three (x, y) vertices")
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    px = xs.ravel() + 0.5
    py = ys.ravel() + 0.5
    inside = np.zeros(px.shape, dtype=bool)
    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for ax, ay, bx, by in zip(x0, y0, x1, y1):
        straddles = (ay > py) != (by > py)
        if not straddles.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = ax + (py - ay) * (bx - ax) / (by - ay)
        inside ^= straddles & (px < x_cross)
    return inside.reshape(h, w)


def _intersection(a: Box, b: Box) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: Box, b: Box) -> float:
    inter = _intersection(a, b)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def giou(a: Box, b: Box) -> float:
    """Generalized IoU: IoU minus the fraction of the enclosing box not covered by the union."""
    inter = _intersection(a, b)
    union = a.area + b.area - inter
    enclose = (max(a.x_max, b.x_max) - min(a.x_min, b.x_min)) * (
        max(a.y_max, b.y_max) - min(a.y_min, b.y_min)
    )
    if enclose <= 0:
        return 0.0
    base = inter / union if union > 0 else 0.0
    return base - (enclose - union) / enclose


def nms(dets: Iterable[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy non-maximum suppression; ties in score keep input order."""
    order = sorted(enumerate(dets), key=lambda p: -p[1].score)
    kept: list[Detection] = []
    for _, det in order:
        if all(iou(det.box, k.box) <= iou_threshold for k in kept):
            kept.append(det)
    return kept


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Array form of :func:`nms` returning kept indices in descending score order."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).ravel()
    order = np.argsort(-scores, kind="stable")
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    keep = []
    suppressed = np.zeros(len(boxes), dtype=bool)
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        rest = order[pos + 1:]
        rest = rest[~suppressed[rest]]
        if rest.size == 0:
            continue
        iw = np.minimum(boxes[i, 2], boxes[rest, 2]) - np.maximum(boxes[i, 0], boxes[rest, 0])
        ih = np.minimum(boxes[i, 3], boxes[rest, 3]) - np.maximum(boxes[i, 1], boxes[rest, 1])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        union = areas[i] + areas[rest] - inter
        with np.errstate(divide="ignore", invalid="ignore"):
            ov = np.where(union > 0, inter / union, 0.0)
        suppressed[rest[ov > iou_threshold]] = True
    return np.asarray(keep, dtype=np.int64)


def _foreground(m: InstanceMask) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.nonzero(m.bitmap)
    if rows.size == 0:
        raise ValueError("empty mask")
    return rows, cols


def box_from_mask(m: InstanceMask) -> Box:
    rows, cols = _foreground(m)
    return Box(float(cols.min()), float(rows.min()), float(cols.max() + 1), float(rows.max() + 1))


def dot_from_mask(m: InstanceMask) -> Dot:
    """Centroid of the foreground pixel centres."""
    rows, cols = _foreground(m)
    return Dot(float(cols.mean() + 0.5), float(rows.mean() + 0.5))
