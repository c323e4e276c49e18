"""Synthetic multi-granularity dataset, manifest persistence and round sampling."""

from __future__ import annotations

import enum
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np
from PIL import Image
from scipy import ndimage

from .geometry import Box, Dot, InstanceMask, box_from_mask, dot_from_mask, polygon_to_bitmap

MANIFEST_VERSION = "1.0"
SPLITS = ("train", "val", "test")


class Granularity(str, enum.Enum):
    BOX = "box"
    MASK = "mask"
    DOT = "dot"
    UNLABELED = "unlabeled"


GRANULARITIES = tuple(Granularity)

Annotation = Union[Box, InstanceMask, Dot]


class ManifestError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DatasetItem:
    item_id: str
    image_ref: str
    granularity: Granularity
    annotations: tuple = ()
    hidden_gt: tuple = ()
    image_size: tuple[int, int] = (128, 128)

    def __post_init__(self):
        object.__setattr__(self, "granularity", Granularity(self.granularity))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        object.__setattr__(self, "hidden_gt", tuple(self.hidden_gt))
        validate_annotations(self.annotations, self.granularity)

    def __eq__(self, other):
        if not isinstance(other, DatasetItem):
            return NotImplemented
        return (
            self.item_id == other.item_id
            and self.image_ref == other.image_ref
            and self.granularity == other.granularity
            and tuple(self.image_size) == tuple(other.image_size)
            and list(self.annotations) == list(other.annotations)
            and list(self.hidden_gt) == list(other.hidden_gt)
        )

    __hash__ = None  # type: ignore[assignment]


_ALLOWED = {
    Granularity.BOX: (Box,),
    Granularity.MASK: (InstanceMask,),
    Granularity.DOT: (Dot,),
    Granularity.UNLABELED: (),
}


def validate_annotations(annotations: Sequence[Annotation], g: Granularity) -> None:
    allowed = _ALLOWED[Granularity(g)]
    for ann in annotations:
        if not isinstance(ann, allowed):
            raise ManifestError(
                f"{type(ann).__name__} annotation not allowed for granularity {Granularity(g).value}"
            )


@dataclass(eq=False)
class Manifest:
    split: str
    items: list[DatasetItem]
    version: str = MANIFEST_VERSION
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r}")
        if self.split in ("val", "test"):
            for it in self.items:
                if it.granularity is not Granularity.BOX:
                    raise ManifestError(f"{self.split} items must be box-labeled, got {it.item_id}")

    def __eq__(self, other):
        if not isinstance(other, Manifest):
            return NotImplemented
        return self.split == other.split and self.version == other.version and self.items == other.items

    def __len__(self):
        return len(self.items)

    def by_granularity(self, g: Granularity) -> list[DatasetItem]:
        return [it for it in self.items if it.granularity is Granularity(g)]

    def counts(self) -> dict[str, int]:
        return {g.value: len(self.by_granularity(g)) for g in GRANULARITIES}

    def image_path(self, item: DatasetItem) -> Path:
        return self.root / item.image_ref

    def subset(self, items: Sequence[DatasetItem]) -> "Manifest":
        return Manifest(self.split, list(items), self.version, self.root)


@dataclass
class GenConfig:
    image_size: int = 128
    lesion_mean: float = 1.5
    lesion_max: int = 6
    axis_min: float = 3.0
    axis_max: float = 12.0
    intensity_min: int = 40
    intensity_max: int = 90
    background_mean: float = 90.0
    background_std: float = 18.0
    background_sigma: float = 6.0
    stripe_amplitude: float = 14.0
    stripe_period: tuple[float, float] = (14.0, 22.0)
    noise_std: float = 6.0
    train_counts: dict = field(
        default_factory=lambda: {"box": 500, "mask": 500, "dot": 500, "unlabeled": 500}
    )
    val_count: int = 200
    test_count: int = 400
    seed: int = 0

    def validate(self) -> None:
        if self.image_size < 64:
            raise ValueError("image_size must be >= 64")
        unknown = set(self.train_counts) - {g.value for g in GRANULARITIES}
        if unknown:
            raise ValueError(f"unknown granularities in train_counts: {sorted(unknown)}")
        counts = list(self.train_counts.values()) + [self.val_count, self.test_count]
        if any(int(c) < 0 for c in counts):
            raise ValueError("counts must be >= 0")
        if self.lesion_mean < 0 or self.lesion_max < 0:
            raise ValueError("lesion count parameters must be >= 0")
        if not 0 < self.axis_min <= self.axis_max:
            raise ValueError("need 0 < axis_min <= axis_max")
        if not 0 <= self.intensity_min <= self.intensity_max <= 255:
            raise ValueError("need 0 <= intensity_min <= intensity_max <= 255")

    @classmethod
    def from_dict(cls, d: Mapping) -> "GenConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown data config keys: {sorted(unknown)}")
        d = dict(d)
        if "stripe_period" in d:
            d["stripe_period"] = tuple(d["stripe_period"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def degrade_annotations(masks: Sequence[InstanceMask], g: Granularity) -> list[Annotation]:
    g = Granularity(g)
    if g is Granularity.MASK:
        return list(masks)
    if g is Granularity.BOX:
        return [box_from_mask(m) for m in masks]
    if g is Granularity.DOT:
        return [dot_from_mask(m) for m in masks]
    return []


def _ellipse_mask(shape, cx, cy, a, b, theta) -> np.ndarray:
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    dx = xs + 0.5 - cx
    dy = ys + 0.5 - cy
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return u * u + v * v <= 1.0


def render_image(cfg: GenConfig, rng: np.random.Generator) -> tuple[np.ndarray, list[InstanceMask]]:
    """One grayscale image and the instance masks of its ellipse lesions."""
    n = cfg.image_size
    shape = (n, n)
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), cfg.background_sigma)
    field_ *= cfg.background_std / max(field_.std(), 1e-8)
    period = rng.uniform(*cfg.stripe_period)
    tilt = rng.uniform(-0.35, 0.35)
    phase = rng.uniform(0, 2 * np.pi)
    ys, xs = np.mgrid[0:n, 0:n].astype(float)
    stripes = cfg.stripe_amplitude * np.sin(2 * np.pi * (ys + tilt * xs) / period + phase)
    img = cfg.background_mean + field_ + stripes

    count = min(int(rng.poisson(cfg.lesion_mean)) if cfg.lesion_mean > 0 else 0, cfg.lesion_max)
    masks: list[InstanceMask] = []
    for _ in range(count):
        a = rng.uniform(cfg.axis_min, cfg.axis_max)
        b = rng.uniform(cfg.axis_min, cfg.axis_max)
        theta = rng.uniform(0, np.pi)
        margin = max(a, b) + 1.0
        cx = rng.uniform(margin, n - margin)
        cy = rng.uniform(margin, n - margin)
        m = _ellipse_mask(shape, cx, cy, a, b, theta)
        if not m.any():
            continue
        offset = rng.uniform(cfg.intensity_min, cfg.intensity_max)
        img = img + offset * ndimage.gaussian_filter(m.astype(float), 0.7)
        masks.append(InstanceMask(m))
    img = img + cfg.noise_std * rng.standard_normal(shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8), masks


def _split_plan(cfg: GenConfig) -> list[tuple[str, list[Granularity]]]:
    train = []
    for g in GRANULARITIES:
        train += [g] * int(cfg.train_counts.get(g.value, 0))
    return [
        ("train", train),
        ("val", [Granularity.BOX] * int(cfg.val_count)),
        ("test", [Granularity.BOX] * int(cfg.test_count)),
    ]


def generate_dataset(cfg: GenConfig, out_dir: Union[str, os.PathLike]) -> dict[str, Manifest]:
    """Render every split to ``out_dir/<split>/images`` and write ``out_dir/<split>/manifest.json``.

    Each image draws from its own seed stream derived from ``(seed, split, index)``,
    so output is a pure function of the config.
    """
    cfg.validate()
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {root}: {exc}") from exc
    if not os.access(root, os.W_OK):
        raise OSError(f"output directory {root} is not writable")

    manifests = {}
    for split_idx, (split, grans) in enumerate(_split_plan(cfg)):
        split_dir = root / split
        (split_dir / "images").mkdir(parents=True, exist_ok=True)
        items = []
        for i, g in enumerate(grans):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, split_idx, i]))
            img, masks = render_image(cfg, rng)
            item_id = f"{split}_{i:05d}"
            ref = f"images/{item_id}.png"
            Image.fromarray(img, mode="L").save(split_dir / ref, optimize=False)
            items.append(
                DatasetItem(
                    item_id=item_id,
                    image_ref=ref,
                    granularity=g,
                    annotations=degrade_annotations(masks, g),
                    hidden_gt=[box_from_mask(m) for m in masks],
                    image_size=(cfg.image_size, cfg.image_size),
                )
            )
        man = Manifest(split, items, root=split_dir)
        save_manifest(man, split_dir / "manifest.json")
        manifests[split] = man
    return manifests


# ---------------------------------------------------------------- persistence

def mask_to_rle(m: InstanceMask) -> dict:
    flat = m.bitmap.ravel().astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        runs = [0] + runs
    return {"size": list(m.shape), "counts": runs}


def rle_to_mask(rle: Mapping) -> InstanceMask:
    h, w = rle["size"]
    flat = np.zeros(h * w, dtype=bool)
    pos, val = 0, False
    for run in rle["counts"]:
        if val:
            flat[pos:pos + run] = True
        pos += run
        val = not val
    if pos != h * w:
        raise ManifestError("mask RLE does not match its size")
    return InstanceMask(flat.reshape(h, w))


def _ann_to_json(ann: Annotation) -> dict:
    if isinstance(ann, Box):
        return {"type": "box", "box": list(ann.as_tuple())}
    if isinstance(ann, Dot):
        return {"type": "dot", "point": [ann.x, ann.y]}
    return {"type": "mask", "rle": mask_to_rle(ann)}


def _ann_from_json(d: Mapping, shape: tuple[int, int]) -> Annotation:
    kind = d.get("type")
    if kind == "box":
        return Box(*map(float, d["box"]))
    if kind == "dot":
        return Dot(*map(float, d["point"]))
    if kind == "mask":
        if "rle" in d:
            m = rle_to_mask(d["rle"])
        elif "polygon" in d:
            m = InstanceMask(polygon_to_bitmap(d["polygon"], shape))
        else:
            raise ManifestError("mask annotation needs 'rle' or 'polygon'")
        if m.shape != tuple(shape):
            raise ManifestError("mask dimensions differ from image dimensions")
        if m.area == 0:
            raise ManifestError("mask annotation has no foreground pixels")
        return m
    raise ManifestError(f"unknown annotation type {kind!r}")


def item_to_json(item: DatasetItem) -> dict:
    return {
        "id": item.item_id,
        "image": item.image_ref,
        "image_size": list(item.image_size),
        "granularity": item.granularity.value,
        "annotations": [_ann_to_json(a) for a in item.annotations],
        "hidden_gt": [list(b.as_tuple()) for b in item.hidden_gt],
    }


def item_from_json(d: Mapping) -> DatasetItem:
    try:
        shape = tuple(d["image_size"])
        g = Granularity(d["granularity"])
        anns = [_ann_from_json(a, shape) for a in d.get("annotations", [])]
        gt = [Box(*map(float, b)) for b in d.get("hidden_gt", [])]
        return DatasetItem(d["id"], d["image"], g, anns, gt, shape)
    except ManifestError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"malformed item record: {exc}") from exc


def save_manifest(man: Manifest, path: Union[str, os.PathLike]) -> None:
    doc = {
        "version": man.version,
        "split": man.split,
        "items": [item_to_json(it) for it in man.items],
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_manifest(path: Union[str, os.PathLike], check_images: bool = True) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not {"version", "split", "items"} <= set(doc):
        raise ManifestError("manifest must contain version, split and items")
    if doc["version"] != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {doc['version']!r}")
    items = [item_from_json(d) for d in doc["items"]]
    man = Manifest(doc["split"], items, doc["version"], root=path.parent)
    if check_images:
        for it in items:
            if not man.image_path(it).exists():
                raise ManifestError(f"dangling image path {it.image_ref} in {path}")
    return man


def load_image(path: Union[str, os.PathLike]) -> np.ndarray:
    """8-bit grayscale PNG as an ``(3, H, W)`` uint8 array."""
    with Image.open(path) as im:
        gray = np.asarray(im.convert("L"), dtype=np.uint8)
    return np.repeat(gray[None], 3, axis=0)


# ---------------------------------------------------------------- sampling

class RoundSampler:
    """Yields one batch per enabled granularity per training round.

    Within a granularity, items are drawn without replacement; the pool is
    reshuffled once exhausted.
    """

    def __init__(self, items: Sequence[DatasetItem], batch_size: int, rng: np.random.Generator,
                 granularities: Sequence[Granularity] | None = None):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.batch_size = batch_size
        self.rng = rng
        if granularities is None:
            granularities = [g for g in GRANULARITIES if any(it.granularity is g for it in items)]
        self.granularities = [Granularity(g) for g in granularities]
        self._pools: dict[Granularity, list[DatasetItem]] = {}
        for g in self.granularities:
            pool = [it for it in items if it.granularity is g]
            if not pool:
                raise ValueError(f"empty pool for granularity {g.value!r}")
            self._pools[g] = pool
        self._order = {g: self.rng.permutation(len(p)) for g, p in self._pools.items()}
        self._cursor = {g: 0 for g in self._pools}

    def _draw(self, g: Granularity) -> list[DatasetItem]:
        pool = self._pools[g]
        out = []
        while len(out) < self.batch_size:
            if self._cursor[g] >= len(pool):
                self._order[g] = self.rng.permutation(len(pool))
                self._cursor[g] = 0
            out.append(pool[self._order[g][self._cursor[g]]])
            self._cursor[g] += 1
        return out

    def sample_round(self) -> dict[Granularity, list[DatasetItem]]:
        return {g: self._draw(g) for g in self.granularities}


def sample_round(sampler: RoundSampler) -> dict[Granularity, list[DatasetItem]]:
    return sampler.sample_round()
