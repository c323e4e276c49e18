"""Per-pixel training targets on the FPN grid.

Every grid point of an item is exactly one of: certain positive, certain
negative, or a member of one uncertain region. All arrays in
:class:`TargetMaps` are flattened over the concatenation of pyramid levels
(finest level first, row-major within a level).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import DatasetItem, Granularity
from .geometry import Box, Dot, InstanceMask, box_from_mask


@dataclass(frozen=True)
class GridSpec:
    strides: tuple[int, ...] = (8, 16, 32)
    ranges: tuple[tuple[float, float], ...] = ((0.0, 64.0), (64.0, 128.0), (128.0, math.inf))
    # "all": a dot is a certain positive on every level; "finest": only on the first
    dot_levels: str = "all"

    def __post_init__(self):
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        object.__setattr__(self, "ranges", tuple((float(a), float(b)) for a, b in self.ranges))
        if any(b <= a for a, b in zip(self.strides, self.strides[1:])):
            raise ValueError("strides must be strictly increasing")
        if len(self.ranges) != len(self.strides):
            raise ValueError("need one size range per stride")
        if self.ranges[0][0] != 0.0 or self.ranges[-1][1] != math.inf:
            raise ValueError("size ranges must start at 0 and end at infinity")
        if any(a[1] != b[0] for a, b in zip(self.ranges, self.ranges[1:])):
            raise ValueError("size ranges must be contiguous")
        if self.dot_levels not in ("all", "finest"):
            raise ValueError("dot_levels must be 'all' or 'finest'")

    def level_shapes(self, image_size: tuple[int, int]) -> list[tuple[int, int]]:
        h, w = image_size
        if h % self.strides[-1] or w % self.strides[-1]:
            raise ValueError(f"image size {image_size} not divisible by stride {self.strides[-1]}")
        return [(h // s, w // s) for s in self.strides]


def grid_points(image_size: tuple[int, int], strides: Sequence[int]) -> list[np.ndarray]:
    """Point coordinates per level, each of shape ``(H/s, W/s, 2)`` holding ``(x, y)``."""
    h, w = image_size
    out = []
    for s in strides:
        if h % s or w % s:
            raise ValueError(f"image size {image_size} not divisible by stride {s}")
        xs = s / 2.0 + s * np.arange(w // s)
        ys = s / 2.0 + s * np.arange(h // s)
        gx, gy = np.meshgrid(xs, ys)
        out.append(np.stack([gx, gy], axis=-1))
    return out


def assign_levels(boxes: Sequence[Box], ranges: Sequence[tuple[float, float]]) -> list[int]:
    """Level per box from the largest centre-to-edge distance ``max(w, h) / 2``."""
    levels = []
    for b in boxes:
        extent = max(b.width, b.height) / 2.0
        for lvl, (lo, hi) in enumerate(ranges):
            if lo <= extent < hi:
                levels.append(lvl)
                break
        else:
            levels.append(len(ranges) - 1)
    return levels


@dataclass
class UncertainRegion:
    indices: np.ndarray
    box: Optional[Box] = None
    level: Optional[int] = None

    @property
    def size(self) -> int:
        return int(self.indices.size)


@dataclass
class TargetMaps:
    level_shapes: list[tuple[int, int]]
    certain_pos: np.ndarray
    certain_neg: np.ndarray
    regression: np.ndarray
    reg_valid: np.ndarray
    regions: list[UncertainRegion] = field(default_factory=list)

    @property
    def num_points(self) -> int:
        return int(self.certain_pos.size)

    @property
    def region_sizes(self) -> list[int]:
        return [r.size for r in self.regions]

    def uncertain_mask(self) -> np.ndarray:
        m = np.zeros(self.num_points, dtype=bool)
        for r in self.regions:
            m[r.indices] = True
        return m

    def split_levels(self, flat: np.ndarray) -> list[np.ndarray]:
        """Reshape a flat per-point array into per-level grids."""
        out, start = [], 0
        for h, w in self.level_shapes:
            n = h * w
            out.append(flat[start:start + n].reshape((h, w) + flat.shape[1:]))
            start += n
        return out


def _level_offsets(shapes: Sequence[tuple[int, int]]) -> list[int]:
    offs, acc = [], 0
    for h, w in shapes:
        offs.append(acc)
        acc += h * w
    return offs


def _majority(bitmap: np.ndarray, stride: int) -> np.ndarray:
    h, w = bitmap.shape
    cells = bitmap.reshape(h // stride, stride, w // stride, stride)
    return cells.mean(axis=(1, 3)) >= 0.5


def _instance_candidates(pts: np.ndarray, box: Box, mask: Optional[InstanceMask], stride: int) -> np.ndarray:
    """Flat indices (within a level) a box or mask claims as uncertain samples."""
    x, y = pts[..., 0].ravel(), pts[..., 1].ravel()
    interior = (x > box.x_min) & (x < box.x_max) & (y > box.y_min) & (y < box.y_max)
    cand = interior
    if mask is not None:
        finer = _majority(mask.bitmap, stride).ravel() & interior
        if finer.any():
            cand = finer
    idx = np.flatnonzero(cand)
    if idx.size == 0:
        # box too small to contain a grid point: keep the nearest one uncertain
        cx, cy = box.center
        idx = np.array([int(np.argmin((x - cx) ** 2 + (y - cy) ** 2))])
    return idx


def _dot_index(pts: np.ndarray, dot: Dot, stride: int) -> int:
    h, w = pts.shape[:2]
    c = min(int(dot.x // stride), w - 1)
    r = min(int(dot.y // stride), h - 1)
    return r * w + c


def build_targets(item: DatasetItem, grid: GridSpec = GridSpec()) -> TargetMaps:
    image_size = tuple(item.image_size)
    shapes = grid.level_shapes(image_size)
    levels_pts = grid_points(image_size, grid.strides)
    offs = _level_offsets(shapes)
    total = sum(h * w for h, w in shapes)

    pos = np.zeros(total, dtype=bool)
    neg = np.zeros(total, dtype=bool)
    reg = np.zeros((total, 4), dtype=np.float32)
    valid = np.zeros(total, dtype=bool)
    g = item.granularity

    if g is Granularity.UNLABELED:
        return TargetMaps(shapes, pos, neg, reg, valid, [UncertainRegion(np.arange(total))])

    if g is Granularity.DOT:
        if not item.annotations:
            # an annotated image without dots is a normal image, like an empty box item
            neg[:] = True
            return TargetMaps(shapes, pos, neg, reg, valid, [])
        h_img, w_img = image_size
        for d in item.annotations:
            if not (0 <= d.x < w_img and 0 <= d.y < h_img):
                raise ValueError(f"dot ({d.x}, {d.y}) outside image of size {image_size}")
            n_levels = len(levels_pts) if grid.dot_levels == "all" else 1
            for lvl, pts in enumerate(levels_pts[:n_levels]):
                pos[offs[lvl] + _dot_index(pts, d, grid.strides[lvl])] = True
        rest = np.flatnonzero(~pos)
        return TargetMaps(shapes, pos, neg, reg, valid, [UncertainRegion(rest)])

    if g is Granularity.MASK:
        masks = list(item.annotations)
        boxes = [box_from_mask(m) for m in masks]
    else:
        masks = [None] * len(item.annotations)
        boxes = list(item.annotations)

    levels = assign_levels(boxes, grid.ranges)
    owner = np.full(total, -1, dtype=np.int64)
    owner_area = np.full(total, np.inf)
    for j, (box, mask, lvl) in enumerate(zip(boxes, masks, levels)):
        idx = offs[lvl] + _instance_candidates(levels_pts[lvl], box, mask, grid.strides[lvl])
        take = box.area < owner_area[idx]
        owner[idx[take]] = j
        owner_area[idx[take]] = box.area

    flat_pts = np.concatenate([p.reshape(-1, 2) for p in levels_pts])
    regions = []
    for j, (box, lvl) in enumerate(zip(boxes, levels)):
        idx = np.flatnonzero(owner == j)
        x, y = flat_pts[idx, 0], flat_pts[idx, 1]
        t = np.stack([x - box.x_min, y - box.y_min, box.x_max - x, box.y_max - y], axis=1)
        reg[idx] = t
        valid[idx] = (t > 0).all(axis=1)
        regions.append(UncertainRegion(idx, box, lvl))
    neg[owner < 0] = True
    return TargetMaps(shapes, pos, neg, reg, valid, regions)
