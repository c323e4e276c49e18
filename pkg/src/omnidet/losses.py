"""Classification and regression objectives.

Probabilities and weights are clamped to ``[eps, 1 - eps]`` before any
logarithm, so every loss below is finite and non-negative.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import torch

STRATEGIES = ("HLA", "SLA", "DLA", "FIXED")


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 2.0
    t: float = 0.5
    eps: float = 1e-6
    strategy: str = "DLA"
    # keep the (1 - W) and W factors inside the logarithms of the soft terms
    weights_in_log: bool = True

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0 < self.t < 1:
            raise ValueError("t must lie in (0, 1)")
        if not 0 < self.eps < 0.5:
            raise ValueError("eps must lie in (0, 0.5)")
        object.__setattr__(self, "strategy", self.strategy.upper())
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")


def _clamp(x: torch.Tensor, eps: float) -> torch.Tensor:
    return x.clamp(eps, 1.0 - eps)


def focal_pos(P: torch.Tensor, gamma: float, eps: float = 1e-6) -> torch.Tensor:
    P = _clamp(P, eps)
    return -((1 - P) ** gamma) * torch.log(P)


def focal_neg(P: torch.Tensor, gamma: float, eps: float = 1e-6) -> torch.Tensor:
    P = _clamp(P, eps)
    return -(P ** gamma) * torch.log(1 - P)


def focal_certain(P, certain_pos, certain_neg, gamma: float = 2.0, eps: float = 1e-6) -> torch.Tensor:
    """Focal loss summed over certain positives and certain negatives."""
    pos = torch.as_tensor(certain_pos, dtype=torch.bool)
    neg = torch.as_tensor(certain_neg, dtype=torch.bool)
    if (pos & neg).any():
        raise ValueError("certain positive and negative masks overlap")
    return focal_pos(P[pos], gamma, eps).sum() + focal_neg(P[neg], gamma, eps).sum()


def hla_loss(P, W, t: float = 0.5, gamma: float = 2.0, eps: float = 1e-6) -> torch.Tensor:
    """Hard assignment: ``W >= t`` is a positive, otherwise a negative."""
    is_pos = W >= t
    return focal_pos(P[is_pos], gamma, eps).sum() + focal_neg(P[~is_pos], gamma, eps).sum()


def _soft_pos(P, W, gamma, eps, in_log=True):
    P, W = _clamp(P, eps), _clamp(W, eps)
    inner = (1 - W) * P if in_log else P
    return -(W ** gamma) * (1 - P) ** gamma * torch.log(inner)


def _soft_neg(P, W, gamma, eps, in_log=True):
    P, W = _clamp(P, eps), _clamp(W, eps)
    inner = W * (1 - P) if in_log else 1 - P
    return -((1 - W) ** gamma) * P ** gamma * torch.log(inner)


def sla_loss(P, W, t: float = 0.5, gamma: float = 2.0, eps: float = 1e-6, in_log: bool = True) -> torch.Tensor:
    """Soft assignment: the thresholded split with weight-modulated focal terms.

    ``in_log=False`` drops the weight factors inside the logarithms, leaving
    the weights as pure multipliers of the focal terms.
    """
    W = W.detach()
    is_pos = W >= t
    return (_soft_pos(P[is_pos], W[is_pos], gamma, eps, in_log).sum()
            + _soft_neg(P[~is_pos], W[~is_pos], gamma, eps, in_log).sum())


def dla_loss(P, W, gamma: float = 2.0, eps: float = 1e-6, in_log: bool = True) -> torch.Tensor:
    """Dynamic assignment: every sample carries both terms, balanced by ``W``."""
    W = W.detach()
    return (_soft_pos(P, W, gamma, eps, in_log) + _soft_neg(P, W, gamma, eps, in_log)).sum()


def uncertain_loss(P, W, cfg: LossConfig) -> torch.Tensor:
    if cfg.strategy == "HLA":
        return hla_loss(P, W, cfg.t, cfg.gamma, cfg.eps)
    if cfg.strategy == "SLA":
        return sla_loss(P, W, cfg.t, cfg.gamma, cfg.eps, cfg.weights_in_log)
    if cfg.strategy == "DLA":
        return dla_loss(P, W, cfg.gamma, cfg.eps, cfg.weights_in_log)
    raise ValueError(f"strategy {cfg.strategy} has no uncertain-sample loss")


def giou_rows(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Row-wise GIoU between ``(N, 4)`` boxes, differentiable in ``pred``."""
    iw = (torch.minimum(pred[:, 2], gt[:, 2]) - torch.maximum(pred[:, 0], gt[:, 0])).clamp(min=0)
    ih = (torch.minimum(pred[:, 3], gt[:, 3]) - torch.maximum(pred[:, 1], gt[:, 1])).clamp(min=0)
    inter = iw * ih
    area_p = (pred[:, 2] - pred[:, 0]) * (pred[:, 3] - pred[:, 1])
    area_g = (gt[:, 2] - gt[:, 0]) * (gt[:, 3] - gt[:, 1])
    union = (area_p + area_g - inter).clamp(min=1e-9)
    ew = torch.maximum(pred[:, 2], gt[:, 2]) - torch.minimum(pred[:, 0], gt[:, 0])
    eh = torch.maximum(pred[:, 3], gt[:, 3]) - torch.minimum(pred[:, 1], gt[:, 1])
    enclose = (ew * eh).clamp(min=1e-9)
    return inter / union - (enclose - union) / enclose


def giou_loss(dist: torch.Tensor, points: torch.Tensor, gt_boxes: torch.Tensor) -> torch.Tensor:
    """Sum of ``1 - GIoU`` over valid samples.

    ``dist`` holds predicted ``(l, t, r, b)`` distances at ``points``;
    ``gt_boxes`` is the governing ground-truth box of each sample.
    """
    if dist.numel() == 0:
        return dist.sum() * 0.0
    p = points.to(dist.dtype)
    pred = torch.stack([p[:, 0] - dist[:, 0], p[:, 1] - dist[:, 1],
                        p[:, 0] + dist[:, 2], p[:, 1] + dist[:, 3]], dim=1)
    return (1.0 - giou_rows(pred, gt_boxes.to(dist.dtype))).sum()


@dataclass
class BranchLoss:
    certain: torch.Tensor
    uncertain: torch.Tensor
    regression: Optional[torch.Tensor] = None


@dataclass
class LossReport:
    components: dict[str, dict[str, float]] = field(default_factory=dict)
    total: torch.Tensor = None  # type: ignore[assignment]
    delta: float = 0.0

    @property
    def total_value(self) -> float:
        return float(self.total.detach())

    def as_record(self) -> dict:
        return {"total": self.total_value, "delta": self.delta, "branches": self.components}


def total_loss(parts: Mapping[str, BranchLoss], delta: float = 1.0) -> LossReport:
    """Branch-routed sum: full terms for box and mask, no regression for dot, ``delta``-scaled unlabeled."""
    total = None
    comps: dict[str, dict[str, float]] = {}
    for branch, p in parts.items():
        if branch in ("box", "mask"):
            reg = p.regression if p.regression is not None else torch.zeros(())
            term = p.uncertain + p.certain + reg
        elif branch == "dot":
            reg = None
            term = p.uncertain + p.certain
        elif branch == "unlabeled":
            reg = None
            term = delta * p.uncertain
        else:
            raise ValueError(f"unknown branch {branch!r}")
        comps[branch] = {
            "certain": float(p.certain.detach()),
            "uncertain": float(p.uncertain.detach()),
            "regression": float(reg.detach()) if reg is not None else 0.0,
        }
        total = term if total is None else total + term
    if total is None:
        total = torch.zeros((), requires_grad=False)
    return LossReport(comps, total, float(delta))
