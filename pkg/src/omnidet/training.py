"""Training loop, validation-based checkpoint selection and unlabeled-pool screening."""

from __future__ import annotations

import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import torch

from .assignment import TargetMaps, build_targets
from .cotraining import WeightingConfig, dump_maps, inter_guided_map, iou_map, weights_strong, weights_weak
from .data import DatasetItem, Granularity, Manifest, RoundSampler, load_image
from .evaluation import EvalResult, map_metric
from .geometry import Box, Dot, InstanceMask
from .losses import BranchLoss, LossConfig, focal_certain, focal_pos, giou_loss, total_loss, uncertain_loss
from .model import ModelConfig, OmniDetector, fuse_and_detect, fused_scores, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    iterations: int = 7000
    base_lr: float = 1e-3
    lr_step: int = 3000
    lr_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    val_every: int = 250
    batch_size: int = 4
    warmup_iterations: int = 1000
    rampup_iterations: int = 0
    hflip: bool = True
    seed: int = 0
    num_threads: int = 1

    def __post_init__(self):
        for name in ("iterations", "lr_step", "val_every", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.warmup_iterations < 0 or self.rampup_iterations < 0:
            raise ValueError("warmup_iterations and rampup_iterations must be >= 0")

    def weak_scale(self, iteration: int) -> float:
        """Weight of dot and unlabeled terms: 0 in warmup, then a linear ramp to 1."""
        past = iteration - self.warmup_iterations
        if past < 0:
            return 0.0
        if self.rampup_iterations == 0:
            return 1.0
        return min(1.0, (past + 1) / self.rampup_iterations)

    def lr_at(self, iteration: int) -> float:
        """Learning rate for the 0-based ``iteration``."""
        return self.base_lr * self.lr_factor ** (iteration // self.lr_step)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    model: OmniDetector
    run_dir: Optional[Path]
    history: list[dict] = field(default_factory=list)
    validations: list[tuple[int, float]] = field(default_factory=list)
    best_iteration: int = 0
    best_map: float = float("nan")


def flip_item(item: DatasetItem) -> DatasetItem:
    """Horizontal mirror of an item's annotations (image flipped separately)."""
    w = item.image_size[1]
    anns = []
    for a in item.annotations:
        if isinstance(a, Box):
            anns.append(Box(w - a.x_max, a.y_min, w - a.x_min, a.y_max))
        elif isinstance(a, Dot):
            anns.append(Dot(w - a.x, a.y))
        else:
            anns.append(InstanceMask(a.bitmap[:, ::-1].copy()))
    return DatasetItem(item.item_id, item.image_ref, item.granularity, anns, (), item.image_size)


class ItemStore:
    """In-memory images and cached targets for a pool of items."""

    def __init__(self, manifest: Manifest, items: Optional[Sequence[DatasetItem]] = None, grid=None):
        self.manifest = manifest
        self.grid = grid
        self._images: dict[str, torch.Tensor] = {}
        self._targets: dict[tuple[str, bool], TargetMaps] = {}
        for it in (items if items is not None else manifest.items):
            self._images[it.item_id] = torch.from_numpy(load_image(manifest.image_path(it)))

    def image(self, item: DatasetItem, flip: bool = False) -> torch.Tensor:
        img = self._images[item.item_id]
        return img.flip(-1) if flip else img

    def targets(self, item: DatasetItem, flip: bool = False) -> TargetMaps:
        key = (item.item_id, flip)
        if key not in self._targets:
            src = flip_item(item) if flip else item
            self._targets[key] = build_targets(src, self.grid) if self.grid else build_targets(src)
        return self._targets[key]


def _region_gt(tm: TargetMaps) -> torch.Tensor:
    gt = torch.zeros(tm.num_points, 4)
    for r in tm.regions:
        if r.box is not None and r.size:
            gt[torch.from_numpy(r.indices)] = torch.tensor(r.box.as_tuple(), dtype=torch.float32)
    return gt


def item_losses(preds, k: int, g: Granularity, tm: TargetMaps, points: torch.Tensor,
                loss_cfg: LossConfig, w_cfg: WeightingConfig, warmup: bool = False):
    """Supervised terms of image ``k`` for the branch matching its granularity.

    Returns ``(BranchLoss, delta, weight_map)``; terms are scaled by
    ``1 / max(1, |certain_pos|)``. During ``warmup`` box and mask regions are
    all positive and dot/unlabeled items contribute nothing.
    """
    branch = g.value
    P = preds.probs[branch][k]
    pos = torch.from_numpy(tm.certain_pos)
    neg = torch.from_numpy(tm.certain_neg)
    norm = max(1, int(tm.certain_pos.sum()))
    certain = focal_certain(P, pos, neg, loss_cfg.gamma, loss_cfg.eps)
    strong = g in (Granularity.BOX, Granularity.MASK)
    W = torch.zeros_like(P.detach())
    delta = 1.0

    if loss_cfg.strategy == "FIXED" and not strong:
        raise ValueError("fixed assignment only supports box and mask data")
    if warmup and not strong:
        certain = P.sum() * 0.0
        uncertain = P.sum() * 0.0
        delta = 0.0 if g is Granularity.UNLABELED else 1.0
    elif loss_cfg.strategy == "FIXED" or warmup:
        unc_idx = torch.from_numpy(tm.uncertain_mask())
        uncertain = focal_pos(P[unc_idx], loss_cfg.gamma, loss_cfg.eps).sum()
        W[unc_idx] = 1.0
    else:
        probs_k = {b: p[k] for b, p in preds.probs.items()}
        inter = inter_guided_map(probs_k, branch) if len(probs_k) >= 2 else None
        if inter is None and not strong:
            raise ValueError(f"{branch} data needs at least two branches for co-training weights")
        if strong:
            for r in tm.regions:
                if r.size == 0:
                    continue
                ious = iou_map(preds.dist[k], points, r.box, r.indices)
                W[r.indices] = weights_strong(inter, ious, w_cfg, r.indices, r.box).values[r.indices]
        elif tm.regions:
            region = tm.regions[0]
            if region.size:
                W[region.indices] = weights_weak(inter, region.indices).values[region.indices]
        uncertain = P.sum() * 0.0
        for r in tm.regions:
            if r.size:
                idx = torch.from_numpy(r.indices)
                uncertain = uncertain + uncertain_loss(P[idx], W[idx], loss_cfg)
        if g is Granularity.UNLABELED:
            delta = float(inter.max())

    reg = None
    if strong:
        valid = torch.from_numpy(tm.reg_valid)
        gt = _region_gt(tm)
        reg = giou_loss(preds.dist[k][valid], points[valid], gt[valid]) / norm
    return BranchLoss(certain / norm, uncertain / norm, reg), delta, W


def _set_lr(opt, lr):
    for grp in opt.param_groups:
        grp["lr"] = lr


@torch.no_grad()
def predict_items(model: OmniDetector, store: ItemStore, items: Sequence[DatasetItem],
                  branches: Optional[Sequence[str]] = None, batch: int = 32):
    model.eval()
    out = []
    for start in range(0, len(items), batch):
        chunk = items[start:start + batch]
        imgs = torch.stack([store.image(it) for it in chunk])
        out += fuse_and_detect(model(imgs), model.cfg, branches)
    return out


def evaluate_items(model: OmniDetector, store: ItemStore, items: Sequence[DatasetItem],
                   branches: Optional[Sequence[str]] = None) -> EvalResult:
    dets = predict_items(model, store, items, branches)
    return map_metric(dets, [list(it.hidden_gt) for it in items])


def train(train_cfg: TrainConfig, model_cfg: ModelConfig, train_manifest: Manifest,
          val_manifest: Optional[Manifest] = None, loss_cfg: LossConfig = LossConfig(),
          w_cfg: WeightingConfig = WeightingConfig(), run_dir: Union[str, Path, None] = None,
          train_items: Optional[Sequence[DatasetItem]] = None) -> TrainResult:
    """Train one detector with one batch per enabled granularity per iteration.

    Writes ``log.jsonl``, ``checkpoints/iter_*.pt``, ``best.pt`` and
    ``best.json`` under ``run_dir`` when given.
    """
    torch.set_num_threads(train_cfg.num_threads)
    torch.manual_seed(train_cfg.seed)
    torch.use_deterministic_algorithms(True)
    rng = np.random.default_rng(train_cfg.seed)

    items = list(train_items) if train_items is not None else list(train_manifest.items)
    grans = [Granularity(b) for b in model_cfg.enabled_branches]
    missing = [g.value for g in grans if not any(it.granularity is g for it in items)]
    if missing:
        raise ValueError(f"training data lacks enabled granularities: {missing}")
    items = [it for it in items if it.granularity in grans]
    store = ItemStore(train_manifest, items, model_cfg.grid)
    sampler = RoundSampler(items, train_cfg.batch_size, rng, grans)
    val_items = list(val_manifest.items) if val_manifest is not None else []
    val_store = ItemStore(val_manifest, val_items) if val_items else None

    model = OmniDetector(model_cfg)
    opt = torch.optim.SGD(model.parameters(), lr=train_cfg.base_lr, momentum=train_cfg.momentum,
                          weight_decay=train_cfg.weight_decay)
    points = model.points

    run_path = Path(run_dir) if run_dir is not None else None
    log_fh = None
    if run_path is not None:
        (run_path / "checkpoints").mkdir(parents=True, exist_ok=True)
        (run_path / "config.json").write_text(json.dumps(
            {"train": asdict(train_cfg), "model": model_cfg.to_dict(), "loss": asdict(loss_cfg),
             "weighting": asdict(w_cfg)}, indent=2, sort_keys=True))
        log_fh = open(run_path / "log.jsonl", "w")

    result = TrainResult(model, run_path)
    best_state, best_map = None, -math.inf
    try:
        for it in range(train_cfg.iterations):
            model.train()
            lr = train_cfg.lr_at(it)
            _set_lr(opt, lr)
            batch = sampler.sample_round()
            weak_scale = train_cfg.weak_scale(it)
            flat = [(g, item) for g in grans for item in batch[g]]
            flips = rng.random(len(flat)) < 0.5 if train_cfg.hflip else np.zeros(len(flat), bool)
            imgs = torch.stack([store.image(item, bool(f)) for (g, item), f in zip(flat, flips)])
            preds = model(imgs)

            total = None
            sums: dict[str, dict[str, float]] = {}
            counts: dict[str, int] = {}
            diag = {}
            for k, ((g, item), f) in enumerate(zip(flat, flips)):
                tm = store.targets(item, bool(f))
                parts, delta, W = item_losses(preds, k, g, tm, points, loss_cfg, w_cfg,
                                              warmup=it < train_cfg.warmup_iterations)
                rep = total_loss({g.value: parts}, delta)
                term = rep.total / len(batch[g])
                if g in (Granularity.DOT, Granularity.UNLABELED):
                    term = term * weak_scale
                total = term if total is None else total + term
                acc = sums.setdefault(g.value, {"certain": 0.0, "uncertain": 0.0, "regression": 0.0,
                                                "delta": 0.0})
                for key, v in rep.components[g.value].items():
                    acc[key] += v
                acc["delta"] += delta
                counts[g.value] = counts.get(g.value, 0) + 1
                diag[f"{g.value}{k}_P"] = preds.probs[g.value][k]
                diag[f"{g.value}{k}_W"] = W

            if not torch.isfinite(total):
                if run_path is not None:
                    dump_maps(diag, preds.level_shapes, run_path / "diagnostics", f"iter{it + 1}_")
                raise FloatingPointError(f"non-finite loss at iteration {it + 1}")
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()

            record = {
                "iteration": it + 1,
                "lr": lr,
                "loss": float(total.detach()),
                "branches": {g: {k: v / counts[g] for k, v in acc.items()} for g, acc in sums.items()},
            }
            if val_store is not None and ((it + 1) % train_cfg.val_every == 0 or it + 1 == train_cfg.iterations):
                val_map = evaluate_items(model, val_store, val_items).mAP
                record["val_map"] = val_map
                result.validations.append((it + 1, val_map))
                if run_path is not None:
                    save_checkpoint(model, run_path / "checkpoints" / f"iter_{it + 1:06d}.pt", it + 1, val_map)
                if val_map > best_map:
                    best_map = val_map
                    result.best_iteration = it + 1
                    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                log.info("iter %d lr %.2e loss %.4f val mAP %.4f", it + 1, lr, record["loss"], val_map)
            result.history.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
    finally:
        if log_fh is not None:
            log_fh.close()

    if best_state is not None:
        model.load_state_dict(best_state)
        result.best_map = best_map
    else:
        result.best_iteration = train_cfg.iterations
    model.eval()
    if run_path is not None:
        if best_state is not None:
            src = run_path / "checkpoints" / f"iter_{result.best_iteration:06d}.pt"
            shutil.copyfile(src, run_path / "best.pt")
        else:
            final = save_checkpoint(model, run_path / "checkpoints" / f"iter_{train_cfg.iterations:06d}.pt",
                                    train_cfg.iterations)
            shutil.copyfile(final, run_path / "best.pt")
        (run_path / "best.json").write_text(json.dumps(
            {"iteration": result.best_iteration,
             "val_map": None if best_state is None else best_map}, indent=2))
    return result


@torch.no_grad()
def max_scores(model: OmniDetector, store: ItemStore, items: Sequence[DatasetItem], batch: int = 32) -> np.ndarray:
    model.eval()
    out = []
    for start in range(0, len(items), batch):
        imgs = torch.stack([store.image(it) for it in items[start:start + batch]])
        out.append(fused_scores(model(imgs)).max(dim=1).values.numpy())
    return np.concatenate(out) if out else np.zeros(0)


def screen_unlabeled(model: OmniDetector, manifest: Manifest, items: Optional[Sequence[DatasetItem]] = None,
                     threshold: float = 0.3, store: Optional[ItemStore] = None) -> list[DatasetItem]:
    """Keep unlabeled items whose highest fused classification score reaches ``threshold``."""
    pool = [it for it in (items if items is not None else manifest.items)
            if it.granularity is Granularity.UNLABELED]
    if not pool:
        return []
    store = store or ItemStore(manifest, pool)
    scores = max_scores(model, store, pool)
    return [it for it, s in zip(pool, scores) if s >= threshold]
