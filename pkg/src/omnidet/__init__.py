"""Omni-supervised lesion detection from mixed mask, box, dot and unlabeled data."""

from .assignment import GridSpec, TargetMaps, UncertainRegion, build_targets, grid_points
from .budget import BudgetPlan, BudgetPolicy, budget_plan
from .cotraining import WeightingConfig, inter_guided_map, normalize_map, weights_strong, weights_weak
from .data import (
    DatasetItem, GenConfig, Granularity, Manifest, ManifestError, RoundSampler, generate_dataset,
    load_manifest, sample_round, save_manifest,
)
from .estimator import OmniSupervisedDetector, check_images, check_manifest
from .evaluation import EvalResult, bootstrap_compare, map_metric
from .geometry import Box, Detection, Dot, InstanceMask, box_from_mask, dot_from_mask, giou, iou, nms
from .losses import LossConfig, dla_loss, focal_certain, giou_loss, hla_loss, sla_loss, total_loss
from .model import ModelConfig, OmniDetector, fuse_and_detect, load_checkpoint, save_checkpoint
from .training import TrainConfig, screen_unlabeled, train

__version__ = "0.1.0"
