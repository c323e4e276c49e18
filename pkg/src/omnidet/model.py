"""Small from-scratch detector: 4-stage backbone, FPN and a multi-branch head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .assignment import GridSpec, grid_points
from .geometry import Box, Detection, nms_indices

BRANCHES = ("box", "mask", "dot", "unlabeled")
CHECKPOINT_FORMAT = "omnidet-checkpoint/1"


@dataclass(frozen=True)
class ModelConfig:
    enabled_branches: tuple[str, ...] = BRANCHES
    fpn_channels: int = 64
    head_depth: int = 5
    strides: tuple[int, ...] = (8, 16, 32)
    image_size: int = 128
    score_threshold: float = 0.05
    nms_iou: float = 0.6
    max_detections: int = 50
    fuse_unlabeled: bool = True
    backbone_widths: tuple[int, ...] = (16, 32, 64, 64)
    dot_levels: str = "all"

    def __post_init__(self):
        object.__setattr__(self, "enabled_branches", tuple(self.enabled_branches))
        object.__setattr__(self, "strides", tuple(self.strides))
        object.__setattr__(self, "backbone_widths", tuple(self.backbone_widths))
        if not self.enabled_branches:
            raise ValueError("enabled_branches must be nonempty")
        bad = set(self.enabled_branches) - set(BRANCHES)
        if bad:
            raise ValueError(f"unknown branches {sorted(bad)}")
        if self.head_depth != 5:
            raise ValueError("head_depth must be 5 (four hidden layers plus the prediction layer)")
        if tuple(self.strides) != (8, 16, 32):
            raise ValueError("the backbone produces strides (8, 16, 32) only")
        if len(self.backbone_widths) != 4:
            raise ValueError("backbone_widths needs four stages")
        if self.dot_levels not in ("all", "finest"):
            raise ValueError("dot_levels must be 'all' or 'finest'")
        if self.image_size % self.strides[-1]:
            raise ValueError("image_size must be divisible by the largest stride")

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.strides, dot_levels=self.dot_levels)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _conv(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


class Backbone(nn.Module):
    def __init__(self, widths: Sequence[int]):
        super().__init__()
        stages, cin = [], 3
        for w in widths:
            stages.append(nn.Sequential(
                _conv(cin, w, 2), nn.GroupNorm(min(8, w), w), nn.ReLU(inplace=True),
                _conv(w, w), nn.GroupNorm(min(8, w), w), nn.ReLU(inplace=True),
            ))
            cin = w
        self.stages = nn.ModuleList(stages)
        self.out_channels = list(widths)

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats  # strides 2, 4, 8, 16


class FPN(nn.Module):
    def __init__(self, c3: int, c4: int, channels: int):
        super().__init__()
        self.lat3 = nn.Conv2d(c3, channels, 1)
        self.lat4 = nn.Conv2d(c4, channels, 1)
        self.out3 = _conv(channels, channels)
        self.out4 = _conv(channels, channels)
        self.p5 = _conv(channels, channels, 2)

    def forward(self, c3, c4):
        l4 = self.lat4(c4)
        l3 = self.lat3(c3) + F.interpolate(l4, size=c3.shape[-2:], mode="nearest")
        p4 = self.out4(l4)
        return [self.out3(l3), p4, self.p5(F.relu(p4))]


def _tower(channels: int, out: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    for _ in range(4):
        layers += [_conv(channels, channels), nn.GroupNorm(8, channels), nn.ReLU(inplace=True)]
    layers.append(_conv(channels, out))
    return nn.Sequential(*layers)


@dataclass
class BranchPredictions:
    """Flat per-point outputs over the concatenated pyramid levels.

    ``probs[b]`` has shape ``(N, P)``; ``dist`` has shape ``(N, P, 4)`` in pixels.
    """

    probs: dict[str, torch.Tensor]
    dist: torch.Tensor
    level_shapes: list[tuple[int, int]]
    strides: tuple[int, ...]

    def level(self, t: torch.Tensor, lvl: int) -> torch.Tensor:
        start = sum(h * w for h, w in self.level_shapes[:lvl])
        h, w = self.level_shapes[lvl]
        return t[:, start:start + h * w].reshape(t.shape[0], h, w, *t.shape[2:])

    def detach(self) -> "BranchPredictions":
        return BranchPredictions({k: v.detach() for k, v in self.probs.items()},
                                 self.dist.detach(), self.level_shapes, self.strides)


class OmniDetector(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg.backbone_widths)
        w = cfg.backbone_widths
        self.fpn = FPN(w[2], w[3], cfg.fpn_channels)
        self.cls_heads = nn.ModuleDict({b: _tower(cfg.fpn_channels, 1) for b in cfg.enabled_branches})
        self.reg_head = _tower(cfg.fpn_channels, 4)
        self.scales = nn.Parameter(torch.ones(len(cfg.strides)))
        self._init_weights()
        pts = grid_points((cfg.image_size, cfg.image_size), cfg.strides)
        self.register_buffer(
            "points", torch.from_numpy(np.concatenate([p.reshape(-1, 2) for p in pts])).float(),
            persistent=False,
        )

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, std=0.01) if m.out_channels in (1, 4) else \
                    nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        prior = -math.log((1 - 0.01) / 0.01)
        for head in self.cls_heads.values():
            nn.init.constant_(head[-1].bias, prior)

    @property
    def level_shapes(self) -> list[tuple[int, int]]:
        n = self.cfg.image_size
        return [(n // s, n // s) for s in self.cfg.strides]

    def forward(self, images: torch.Tensor) -> BranchPredictions:
        n = self.cfg.image_size
        if images.dim() != 4 or images.shape[1] != 3 or tuple(images.shape[-2:]) != (n, n):
            raise ValueError(f"expected images of shape (N, 3, {n}, {n}), got {tuple(images.shape)}")
        x = (images.float() / 255.0 - 0.5) / 0.25
        feats = self.backbone(x)
        pyramid = self.fpn(feats[2], feats[3])
        logits = {b: [] for b in self.cls_heads}
        dists = []
        for lvl, (f, s) in enumerate(zip(pyramid, self.cfg.strides)):
            for b, head in self.cls_heads.items():
                logits[b].append(head(f).flatten(1))
            d = self.reg_head(f) * self.scales[lvl]
            dists.append((F.softplus(d) * s).permute(0, 2, 3, 1).reshape(f.shape[0], -1, 4))
        probs = {b: torch.sigmoid(torch.cat(v, dim=1)) for b, v in logits.items()}
        return BranchPredictions(probs, torch.cat(dists, dim=1), self.level_shapes, self.cfg.strides)


def decode(scores, dist, points, score_threshold: float, image_size: tuple[int, int]) -> list[Detection]:
    """Boxes ``(x - l, y - t, x + r, y + b)`` clipped to the image, for scores >= threshold."""
    scores = np.asarray(torch.as_tensor(scores).detach(), dtype=np.float64).ravel()
    dist = np.asarray(torch.as_tensor(dist).detach(), dtype=np.float64).reshape(-1, 4)
    points = np.asarray(torch.as_tensor(points).detach(), dtype=np.float64).reshape(-1, 2)
    keep = np.flatnonzero(scores >= score_threshold)
    h, w = image_size
    out = []
    for i in keep:
        x, y = points[i]
        l, t, r, b = dist[i]
        box = Box(x - l, y - t, x + r, y + b).clip(w, h)
        out.append(Detection(box, float(min(max(scores[i], 0.0), 1.0))))
    return out


def decode_level(preds: BranchPredictions, branch: str, lvl: int, score_threshold: float,
                 image_index: int = 0) -> list[Detection]:
    pts = grid_points(_image_hw(preds), preds.strides)[lvl].reshape(-1, 2)
    scores = preds.level(preds.probs[branch], lvl)[image_index].reshape(-1)
    dist = preds.level(preds.dist, lvl)[image_index].reshape(-1, 4)
    return decode(scores, dist, pts, score_threshold, _image_hw(preds))


def _image_hw(preds: BranchPredictions) -> tuple[int, int]:
    h, w = preds.level_shapes[0]
    s = preds.strides[0]
    return h * s, w * s


def fused_scores(preds: BranchPredictions, branches: Optional[Sequence[str]] = None) -> torch.Tensor:
    """Arithmetic mean of the chosen branches' probability maps, ``(N, P)``."""
    names = list(branches) if branches is not None else list(preds.probs)
    if not names:
        raise ValueError("need at least one branch to fuse")
    return torch.stack([preds.probs[b] for b in names]).mean(0)


def fuse_and_detect(preds: BranchPredictions, cfg: ModelConfig,
                    branches: Optional[Sequence[str]] = None) -> list[list[Detection]]:
    """Fused detections per image: mean branch map, decode all levels, NMS, truncate."""
    if branches is None:
        branches = [b for b in preds.probs if cfg.fuse_unlabeled or b != "unlabeled"]
        if not branches:
            branches = list(preds.probs)
    hw = _image_hw(preds)
    pts = np.concatenate([p.reshape(-1, 2) for p in grid_points(hw, preds.strides)])
    scores = fused_scores(preds, branches).detach().double().numpy()
    dist = preds.dist.detach().double().numpy()
    results = []
    for i in range(scores.shape[0]):
        keep = np.flatnonzero(scores[i] >= cfg.score_threshold)
        if keep.size == 0:
            results.append([])
            continue
        p = pts[keep]
        d = dist[i, keep]
        boxes = np.stack([p[:, 0] - d[:, 0], p[:, 1] - d[:, 1], p[:, 0] + d[:, 2], p[:, 1] + d[:, 3]], 1)
        boxes[:, [0, 2]] = boxes[:, [0, 2]].clip(0, hw[1])
        boxes[:, [1, 3]] = boxes[:, [1, 3]].clip(0, hw[0])
        s = scores[i, keep]
        kept = nms_indices(boxes, s, cfg.nms_iou)[: cfg.max_detections]
        results.append([Detection(Box(*boxes[k]), float(min(max(s[k], 0.0), 1.0))) for k in kept])
    return results


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: OmniDetector, path: Union[str, Path], iteration: int = 0,
                    val_map: Optional[float] = None, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "config": model.cfg.to_dict(),
            "state_dict": model.state_dict(),
            "iteration": int(iteration),
            "val_map": val_map,
            "extra": extra or {},
        },
        path,
    )
    return path


def load_checkpoint(path: Union[str, Path]) -> tuple[OmniDetector, dict]:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an omnidet checkpoint")
    model = OmniDetector(ModelConfig.from_dict(blob["config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    meta = {k: blob[k] for k in ("iteration", "val_map", "extra")}
    return model, meta
