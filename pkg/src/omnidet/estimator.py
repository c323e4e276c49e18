"""scikit-learn style wrapper around training, prediction and scoring."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .cotraining import WeightingConfig
from .data import Manifest, load_manifest
from .evaluation import map_metric
from .geometry import Detection
from .losses import LossConfig
from .model import BRANCHES, ModelConfig, OmniDetector, fuse_and_detect, fused_scores, load_checkpoint
from .training import ItemStore, TrainConfig, train

ManifestLike = Union[Manifest, str, os.PathLike]


def check_manifest(X: ManifestLike, check_images: bool = True) -> Manifest:
    """Accept a :class:`Manifest`, a manifest file or a split directory."""
    if isinstance(X, Manifest):
        return X
    if isinstance(X, (str, os.PathLike)):
        return load_manifest(X, check_images=check_images)
    raise TypeError(f"expected a Manifest or a path, got {type(X).__name__}")


def check_images(X, image_size: Optional[int] = None) -> torch.Tensor:
    """Validate an image batch and return it as a ``(N, 3, H, W)`` uint8 tensor.

    Grayscale ``(N, H, W)`` batches are replicated to three channels.
    """
    arr = np.asarray(X.numpy() if isinstance(X, torch.Tensor) else X)
    if arr.ndim == 3:
        arr = np.repeat(arr[:, None], 3, axis=1)
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ValueError(f"expected images of shape (N, 3, H, W) or (N, H, W), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("empty image batch")
    if arr.dtype != np.uint8:
        if not np.issubdtype(arr.dtype, np.number) or not np.isfinite(arr).all():
            raise ValueError("images must hold finite numbers")
        if arr.min() < 0 or arr.max() > 255:
            raise ValueError("image values must lie in [0, 255]")
        arr = arr.round().astype(np.uint8)
    if image_size is not None and arr.shape[2:] != (image_size, image_size):
        raise ValueError(f"images must be {image_size}x{image_size}, got {arr.shape[2:]}")
    return torch.from_numpy(np.ascontiguousarray(arr))


class OmniSupervisedDetector(BaseEstimator):
    """Multi-branch lesion detector trained from mixed box, mask, dot and unlabeled data.

    ``fit`` takes a training manifest (and optionally a validation manifest for
    checkpoint selection); ``predict`` returns per-image detections for a
    manifest or an image batch; ``score`` is the mAP over IoU 0.40-0.75.
    """

    def __init__(self, branches: Sequence[str] = BRANCHES, strategy: str = "DLA",
                 iterations: int = 7000, base_lr: float = 1e-3, lr_step: int = 3000,
                 batch_size: int = 4, warmup_iterations: int = 1000, rampup_iterations: int = 0,
                 val_every: int = 250,
                 fpn_channels: int = 64, image_size: int = 128, backbone_widths=(16, 32, 64, 64),
                 score_threshold: float = 0.05, nms_iou: float = 0.6,
                 alpha_mode="max_of_I", beta: float = 1.0, t: float = 0.5, gamma: float = 2.0,
                 hflip: bool = True, seed: int = 0, run_dir=None):
        self.branches = branches
        self.strategy = strategy
        self.iterations = iterations
        self.base_lr = base_lr
        self.lr_step = lr_step
        self.batch_size = batch_size
        self.warmup_iterations = warmup_iterations
        self.rampup_iterations = rampup_iterations
        self.val_every = val_every
        self.fpn_channels = fpn_channels
        self.image_size = image_size
        self.backbone_widths = backbone_widths
        self.score_threshold = score_threshold
        self.nms_iou = nms_iou
        self.alpha_mode = alpha_mode
        self.beta = beta
        self.t = t
        self.gamma = gamma
        self.hflip = hflip
        self.seed = seed
        self.run_dir = run_dir

    def _configs(self):
        model_cfg = ModelConfig(enabled_branches=tuple(self.branches), fpn_channels=self.fpn_channels,
                                image_size=self.image_size, backbone_widths=tuple(self.backbone_widths),
                                score_threshold=self.score_threshold, nms_iou=self.nms_iou)
        train_cfg = TrainConfig(iterations=self.iterations, base_lr=self.base_lr, lr_step=self.lr_step,
                                batch_size=self.batch_size, warmup_iterations=self.warmup_iterations,
                                rampup_iterations=self.rampup_iterations,
                                val_every=self.val_every, hflip=self.hflip, seed=self.seed)
        loss_cfg = LossConfig(gamma=self.gamma, t=self.t, strategy=self.strategy)
        w_cfg = WeightingConfig(alpha_mode=self.alpha_mode, beta=self.beta)
        return model_cfg, train_cfg, loss_cfg, w_cfg

    def fit(self, X: ManifestLike, y=None, val: Optional[ManifestLike] = None):
        """Train on manifest ``X``; ``y`` is unused (labels live in the manifest)."""
        model_cfg, train_cfg, loss_cfg, w_cfg = self._configs()
        train_man = check_manifest(X)
        val_man = check_manifest(val) if val is not None else None
        res = train(train_cfg, model_cfg, train_man, val_man, loss_cfg, w_cfg, self.run_dir)
        self.model_ = res.model
        self.history_ = res.history
        self.validations_ = res.validations
        self.best_iteration_ = res.best_iteration
        return self

    @classmethod
    def from_checkpoint(cls, path) -> "OmniSupervisedDetector":
        model, meta = load_checkpoint(path)
        cfg = model.cfg
        est = cls(branches=cfg.enabled_branches, fpn_channels=cfg.fpn_channels, image_size=cfg.image_size,
                  backbone_widths=cfg.backbone_widths, score_threshold=cfg.score_threshold, nms_iou=cfg.nms_iou)
        est.model_ = model
        est.best_iteration_ = meta["iteration"]
        return est

    def _forward_batches(self, X, batch: int = 32):
        check_is_fitted(self, "model_")
        model: OmniDetector = self.model_
        model.eval()
        if isinstance(X, (Manifest, str, os.PathLike)):
            man = check_manifest(X)
            store = ItemStore(man)
            imgs = [store.image(it) for it in man.items]
            images = torch.stack(imgs) if imgs else torch.zeros(0, 3, model.cfg.image_size, model.cfg.image_size,
                                                                dtype=torch.uint8)
        else:
            images = check_images(X, model.cfg.image_size)
        with torch.no_grad():
            for start in range(0, images.shape[0], batch):
                yield model(images[start:start + batch])

    def predict(self, X, branches: Optional[Sequence[str]] = None) -> list[list[Detection]]:
        """Detections per image after branch fusion and NMS."""
        out: list[list[Detection]] = []
        for preds in self._forward_batches(X):
            out += fuse_and_detect(preds, self.model_.cfg, branches)
        return out

    def decision_function(self, X) -> np.ndarray:
        """Highest fused classification score per image."""
        parts = [fused_scores(p).max(dim=1).values.numpy() for p in self._forward_batches(X)]
        return np.concatenate(parts) if parts else np.zeros(0)

    def score(self, X: ManifestLike, y=None) -> float:
        """mAP (IoU 0.40-0.75) against the manifest's ground-truth boxes."""
        man = check_manifest(X)
        return map_metric(self.predict(man), [list(it.hidden_gt) for it in man.items]).mAP
