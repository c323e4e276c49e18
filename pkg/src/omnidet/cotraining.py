"""Inter-guided maps and co-training sample weights.

Everything returned here is detached: weights steer the assignment of
uncertain samples and are never a path for gradients into other branches.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import torch
from PIL import Image

from .geometry import Box

ALPHA_MAX_OF_I = "max_of_I"


@dataclass(frozen=True)
class WeightingConfig:
    alpha_mode: Union[str, float] = ALPHA_MAX_OF_I
    beta: float = 1.0

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.alpha_mode != ALPHA_MAX_OF_I:
            if float(self.alpha_mode) <= 0:
                raise ValueError("fixed alpha must be > 0")
            object.__setattr__(self, "alpha_mode", float(self.alpha_mode))


@dataclass
class SampleWeightMap:
    values: torch.Tensor
    source: str  # "weak" (dot/unlabeled) or "strong" (box/mask)


def _as_index(support, n: int) -> torch.Tensor:
    support = torch.as_tensor(support)
    if support.dtype == torch.bool:
        support = torch.nonzero(support.reshape(-1), as_tuple=False).reshape(-1)
    return support.long().reshape(-1)


@torch.no_grad()
def inter_guided_map(probs: Mapping[str, torch.Tensor], target: str) -> torch.Tensor:
    """Geometric mean of every enabled branch's probabilities except ``target``."""
    if len(probs) < 2:
        raise ValueError("co-training requires >=2 branches")
    if target not in probs:
        raise KeyError(f"unknown branch {target!r}")
    others = [p.detach() for name, p in probs.items() if name != target]
    prod = others[0].clone()
    for p in others[1:]:
        prod = prod * p
    return prod.clamp(min=0.0) ** (1.0 / len(others))


@torch.no_grad()
def normalize_map(values: torch.Tensor, support) -> torch.Tensor:
    """Min-max scale ``values`` over ``support``; zero elsewhere and on a flat support."""
    values = torch.as_tensor(values).detach()
    flat = values.reshape(-1)
    idx = _as_index(support, flat.numel())
    if idx.numel() == 0:
        raise ValueError("empty normalization support")
    out = torch.zeros_like(flat)
    sel = flat[idx]
    lo, hi = sel.min(), sel.max()
    if hi > lo:
        out[idx] = (sel - lo) / (hi - lo)
    return out.reshape(values.shape)


@torch.no_grad()
def weights_weak(inter: torch.Tensor, support) -> SampleWeightMap:
    """Weights for dot and unlabeled items: the inter-guided map normalized over the item."""
    return SampleWeightMap(normalize_map(inter, support), "weak")


def decode_distances(points: torch.Tensor, dist: torch.Tensor) -> torch.Tensor:
    """``(x, y)`` points and ``(l, t, r, b)`` distances to ``(x0, y0, x1, y1)`` boxes."""
    return torch.stack(
        [points[..., 0] - dist[..., 0], points[..., 1] - dist[..., 1],
         points[..., 0] + dist[..., 2], points[..., 1] + dist[..., 3]],
        dim=-1,
    )


def box_iou_rows(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Row-wise IoU of ``(N, 4)`` boxes against ``(4,)`` or ``(N, 4)`` boxes."""
    gt = gt.expand_as(pred)
    iw = (torch.minimum(pred[:, 2], gt[:, 2]) - torch.maximum(pred[:, 0], gt[:, 0])).clamp(min=0)
    ih = (torch.minimum(pred[:, 3], gt[:, 3]) - torch.maximum(pred[:, 1], gt[:, 1])).clamp(min=0)
    inter = iw * ih
    area_p = (pred[:, 2] - pred[:, 0]).clamp(min=0) * (pred[:, 3] - pred[:, 1]).clamp(min=0)
    area_g = (gt[:, 2] - gt[:, 0]) * (gt[:, 3] - gt[:, 1])
    union = area_p + area_g - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(union))


@torch.no_grad()
def iou_map(reg_pred: torch.Tensor, points: torch.Tensor, gt: Box, region) -> torch.Tensor:
    """IoU between decoded predictions and ``gt`` on ``region``; zero elsewhere."""
    reg_pred = reg_pred.detach().reshape(-1, 4)
    idx = _as_index(region, reg_pred.shape[0])
    out = torch.zeros(reg_pred.shape[0], dtype=reg_pred.dtype)
    if idx.numel() == 0:
        return out
    boxes = decode_distances(points.reshape(-1, 2)[idx].to(reg_pred.dtype), reg_pred[idx])
    gt_t = torch.tensor(gt.as_tuple(), dtype=reg_pred.dtype)
    out[idx] = box_iou_rows(boxes, gt_t)
    return out


@torch.no_grad()
def weights_strong(inter: Optional[torch.Tensor], ious: torch.Tensor, cfg: WeightingConfig,
                   region, box: Optional[Box] = None) -> SampleWeightMap:
    """Weights for box and mask regions: ``I**alpha * IoU**beta`` normalized over the region.

    ``inter=None`` drops the confidence factor (single-branch models). A region
    holding a single sample gets weight 1 there, since the annotation says an
    object owns it.
    """
    if box is None:
        raise ValueError("strong weighting needs a region with a governing box")
    ious = torch.as_tensor(ious).detach()
    flat_iou = ious.reshape(-1)
    idx = _as_index(region, flat_iou.numel())
    if idx.numel() == 0:
        return SampleWeightMap(torch.zeros_like(ious), "strong")
    score = flat_iou[idx].clamp(min=0.0) ** cfg.beta
    if inter is not None:
        sel_i = torch.as_tensor(inter).detach().reshape(-1)[idx].clamp(min=0.0)
        alpha = sel_i.max() if cfg.alpha_mode == ALPHA_MAX_OF_I else torch.tensor(cfg.alpha_mode)
        score = score * sel_i ** alpha
    full = torch.zeros_like(flat_iou)
    if idx.numel() == 1:
        full[idx] = 1.0
        return SampleWeightMap(full.reshape(ious.shape), "strong")
    full[idx] = score
    return SampleWeightMap(normalize_map(full, idx).reshape(ious.shape), "strong")


def dump_maps(maps: Mapping[str, torch.Tensor], level_shapes: Sequence[tuple[int, int]],
              out_dir: Union[str, Path], prefix: str = "") -> list[Path]:
    """Write each flat per-point map as one grayscale PNG per pyramid level."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, t in maps.items():
        flat = torch.as_tensor(t).detach().reshape(-1).float().numpy()
        start = 0
        for lvl, (h, w) in enumerate(level_shapes):
            grid = np.clip(np.nan_to_num(flat[start:start + h * w].reshape(h, w), nan=0.0), 0.0, 1.0)
            start += h * w
            img = Image.fromarray((grid * 255).round().astype(np.uint8), mode="L")
            img = img.resize((w * 8, h * 8), Image.NEAREST)
            path = out_dir / f"{prefix}{name}_l{lvl}.png"
            img.save(path)
            written.append(path)
    return written
