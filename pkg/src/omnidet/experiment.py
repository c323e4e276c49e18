"""Run configuration bundles and the strategy ablation (baseline, screening, strategies x seeds)."""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

from .cotraining import WeightingConfig
from .data import GenConfig, Granularity, Manifest, load_manifest
from .evaluation import bootstrap_compare, map_metric
from .losses import LossConfig
from .model import BRANCHES, ModelConfig
from .training import ItemStore, TrainConfig, evaluate_items, predict_items, screen_unlabeled, train

SECTIONS = ("data", "model", "loss", "weighting", "train", "screen")


class ConfigError(ValueError):
    """Unreadable or invalid run configuration."""


@dataclass(frozen=True)
class ScreenConfig:
    enabled: bool = True
    threshold: float = 0.3

    def __post_init__(self):
        if self.threshold < 0:
            raise ValueError("screen threshold must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    data: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    weighting: WeightingConfig = field(default_factory=WeightingConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    screen: ScreenConfig = field(default_factory=ScreenConfig)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "RunConfig":
        if not isinstance(doc, Mapping):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            data = GenConfig.from_dict(doc.get("data", {}))
            data.validate()
            return cls(
                data=data,
                model=ModelConfig.from_dict(doc.get("model", {})),
                loss=_strict(LossConfig, doc.get("loss", {}), "loss"),
                weighting=_strict(WeightingConfig, doc.get("weighting", {}), "weighting"),
                train=TrainConfig.from_dict(doc.get("train", {})),
                screen=_strict(ScreenConfig, doc.get("screen", {}), "screen"),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path: Union[str, Path, None]) -> "RunConfig":
        if path is None:
            return cls()
        p = Path(path)
        try:
            doc = json.loads(p.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {p}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {p} is not valid JSON: {e}") from None
        return cls.from_dict(doc)

    def with_seed(self, seed: Optional[int]) -> "RunConfig":
        if seed is None:
            return self
        data = GenConfig.from_dict({**self.data.to_dict(), "seed": seed})
        return replace(self, data=data, train=replace(self.train, seed=seed))

    def to_dict(self) -> dict:
        return {"data": self.data.to_dict(), "model": self.model.to_dict(), "loss": asdict(self.loss),
                "weighting": asdict(self.weighting), "train": asdict(self.train), "screen": asdict(self.screen)}


def _strict(cls, d: Mapping, name: str):
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown {name} config keys: {sorted(unknown)}")
    return cls(**d)


def load_splits(data_root: Union[str, Path]) -> dict[str, Manifest]:
    root = Path(data_root)
    return {s: load_manifest(root / s / "manifest.json") for s in ("train", "val", "test")}


def baseline_configs(cfg: RunConfig, strict: bool = True) -> tuple[ModelConfig, LossConfig]:
    """Box-only single-branch setup; ``strict`` uses fixed in-box positives."""
    model = replace(cfg.model, enabled_branches=("box",))
    loss = replace(cfg.loss, strategy="FIXED" if strict else "DLA")
    return model, loss


@dataclass
class RunSummary:
    name: str
    seed: int
    test_map: float
    test_ap50: float
    best_iteration: int
    per_branch: dict[str, float] = field(default_factory=dict)
    run_dir: Optional[str] = None
    seconds: float = 0.0
    records: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("records")
        return d


def _summarize(name, seed, res, test: Manifest, store: ItemStore, branches: Sequence[str],
               seconds: float = 0.0) -> RunSummary:
    dets = predict_items(res.model, store, test.items)
    gts = [list(it.hidden_gt) for it in test.items]
    r = map_metric(dets, gts)
    per = {}
    if len(branches) > 1:
        per = {b: evaluate_items(res.model, store, test.items, [b]).mAP for b in branches}
    return RunSummary(name, seed, r.mAP, r.ap50, res.best_iteration, per,
                      str(res.run_dir) if res.run_dir else None, seconds, list(zip(dets, gts)))


@dataclass
class AblationResult:
    runs: list[RunSummary]
    screened: dict[int, int] = field(default_factory=dict)

    def by_name(self, name: str) -> list[RunSummary]:
        return [r for r in self.runs if r.name == name]

    def median(self, name: str, key: str = "test_map") -> float:
        return statistics.median(getattr(r, key) for r in self.by_name(name))

    def names(self) -> list[str]:
        seen = []
        for r in self.runs:
            if r.name not in seen:
                seen.append(r.name)
        return seen

    def table(self, reference: Optional[str] = None, n_boot: int = 1000) -> str:
        lines = [f"{'method':<10}{'mAP':>7}{'AP50':>7}  per-seed mAP" + ("   p vs " + reference if reference else "")]
        for name in self.names():
            runs = self.by_name(name)
            seeds = " ".join(f"{100 * r.test_map:5.1f}" for r in runs)
            line = f"{name:<10}{100 * self.median(name):7.1f}{100 * self.median(name, 'test_ap50'):7.1f}  {seeds}"
            if reference and name != reference and self.by_name(reference):
                ref = self.by_name(reference)[0]
                mine = runs[0]
                p = bootstrap_compare(mine.records, ref.records, n=n_boot, seed=0).p_value
                line += f"   {p:.3g}"
            lines.append(line)
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"runs": [r.to_dict() for r in self.runs],
                "median_map": {n: self.median(n) for n in self.names()},
                "screened_unlabeled": self.screened}


def run_ablation(data_root: Union[str, Path], out_dir: Union[str, Path, None], cfg: RunConfig,
                 strategies: Sequence[str] = ("HLA", "SLA", "DLA"), seeds: Sequence[int] = (0, 1, 2),
                 baseline: bool = True) -> AblationResult:
    """Per seed: train the strict box-only baseline, screen the unlabeled pool with it,
    then train the full model once per strategy on the screened data (shared seed)."""
    splits = load_splits(data_root)
    train_man, val_man, test_man = splits["train"], splits["val"], splits["test"]
    test_store = ItemStore(test_man)
    out = Path(out_dir) if out_dir is not None else None
    runs, screened = [], {}
    for seed in seeds:
        tcfg = replace(cfg.train, seed=seed)
        items = list(train_man.items)
        need_baseline = baseline or (cfg.screen.enabled and "unlabeled" in cfg.model.enabled_branches)
        if need_baseline:
            bm, bl = baseline_configs(cfg)
            t0 = time.perf_counter()
            res = train(tcfg, bm, train_man, val_man, bl, cfg.weighting,
                        out / f"FCOS_seed{seed}" if out else None)
            if baseline:
                runs.append(_summarize("FCOS", seed, res, test_man, test_store, ["box"],
                                       time.perf_counter() - t0))
            if cfg.screen.enabled and "unlabeled" in cfg.model.enabled_branches:
                kept = screen_unlabeled(res.model, train_man, threshold=cfg.screen.threshold)
                keep_ids = {it.item_id for it in kept}
                items = [it for it in items if it.granularity is not Granularity.UNLABELED
                         or it.item_id in keep_ids]
                screened[seed] = len(kept)
        for strategy in strategies:
            loss = replace(cfg.loss, strategy=strategy)
            t0 = time.perf_counter()
            res = train(tcfg, cfg.model, train_man, val_man, loss, cfg.weighting,
                        out / f"{strategy}_seed{seed}" if out else None, train_items=items)
            runs.append(_summarize(strategy, seed, res, test_man, test_store, cfg.model.enabled_branches,
                                   time.perf_counter() - t0))
    result = AblationResult(runs, screened)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    return result


__all__ = ["AblationResult", "ConfigError", "RunConfig", "RunSummary", "ScreenConfig", "baseline_configs",
           "load_splits", "run_ablation", "BRANCHES"]
