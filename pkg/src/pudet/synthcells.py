"""Synthetic cell images with complete annotations and the annotation-deletion
protocol used to simulate incomplete labeling.

Every random draw comes from ``numpy.random.Generator(PCG64)`` seeded with
``(seed, index, stream)``, so an image depends only on the config seed and
its index.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import persist
from .detector import DetectorConfig, anchor_boxes, anchors_to_array, make_anchor_grid
from .geometry import BoundingBox, PatchWindow, boxes_to_array, clip_box, iou_matrix, tile_image

RNG_ALGORITHM = "numpy.random.PCG64/SeedSequence"
BACKGROUND = 0.15
MANIFEST_NAME = "manifest.jsonl"
DATASET_META_NAME = "dataset.json"
MANIFEST_FIELDS = ("id", "file", "splits", "full", "incomplete")

# stream ids mixed into the per-image seed sequence
_STREAM_RENDER = 0
_STREAM_DELETE = 1


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 128
    positive_count_mean: float = 18.0
    distractor_count_mean: float = 10.0
    positive_radius_range: tuple[float, float] = (2.5, 3.5)
    distractor_radius_range: tuple[float, float] = (4.5, 6.5)
    positive_intensity: float = 0.85
    distractor_intensity: float = 0.55
    noise_sigma: float = 0.05
    seed: int = 0
    box_size: float = 12.0
    min_separation: float = 9.0
    patch_size: int = 64
    patch_overlap: int = 16
    keep_per_patch: int = 1

    def __post_init__(self):
        object.__setattr__(self, "positive_radius_range", tuple(map(float, self.positive_radius_range)))
        object.__setattr__(self, "distractor_radius_range", tuple(map(float, self.distractor_radius_range)))
        for name in ("positive_radius_range", "distractor_radius_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < lo <= hi, got {(lo, hi)}")
        for name in ("positive_intensity", "distractor_intensity"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.positive_count_mean < 0 or self.distractor_count_mean < 0:
            raise ValueError("count means must be >= 0")
        if self.keep_per_patch < 1:
            raise ValueError("keep_per_patch must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass(frozen=True)
class Annotation:
    box: BoundingBox
    instance_id: int


def _rng(seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, index, stream])


def _place_centers(rng, count: int, size: int, taken: list, min_sep: float) -> list:
    placed = []
    for _ in range(count):
        for _attempt in range(100):
            c = rng.uniform(0.0, size, size=2)
            if all((c[0] - t[0]) ** 2 + (c[1] - t[1]) ** 2 >= min_sep ** 2 for t in taken):
                taken.append(c)
                placed.append(c)
                break
    return placed


def generate_image(config: SynthConfig, index: int) -> tuple[np.ndarray, list[Annotation]]:
    """Render one image in ``[0, 1]`` and its complete annotation list."""
    rng = _rng(config.seed, index, _STREAM_RENDER)
    size = config.image_size
    n_pos = int(rng.poisson(config.positive_count_mean))
    n_dis = int(rng.poisson(config.distractor_count_mean))

    taken: list = []
    positives = _place_centers(rng, n_pos, size, taken, config.min_separation)
    distractors = _place_centers(rng, n_dis, size, taken, config.min_separation)
    pos_r = rng.uniform(*config.positive_radius_range, size=len(positives))
    dis_r = rng.uniform(*config.distractor_radius_range, size=len(distractors))

    coords = np.arange(size) + 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    excess = np.zeros((size, size))
    blobs = [(c, r, config.positive_intensity) for c, r in zip(positives, pos_r)]
    blobs += [(c, r, config.distractor_intensity) for c, r in zip(distractors, dis_r)]
    for (cx, cy), radius, peak in blobs:
        sigma = radius / 2.0
        blob = (peak - BACKGROUND) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma ** 2))
        excess = np.maximum(excess, blob)
    image = BACKGROUND + excess
    if config.noise_sigma > 0:
        image = image + rng.normal(0.0, config.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0)

    annotations = []
    for k, (cx, cy) in enumerate(positives):
        box = clip_box(BoundingBox.from_center(cx, cy, config.box_size, config.box_size), size, size)
        annotations.append(Annotation(box, k))
    return image, annotations


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def group_by_patch(annotations: Sequence[Annotation], windows: Sequence[PatchWindow]) -> list[list[Annotation]]:
    """Assign each annotation to the first window (tiling order) holding its center."""
    groups: list[list[Annotation]] = [[] for _ in windows]
    for ann in annotations:
        cx, cy = ann.box.center
        for k, win in enumerate(windows):
            if win.contains(cx, cy):
                groups[k].append(ann)
                break
    return groups


def delete_annotations(groups: Sequence[Sequence[Annotation]], keep_per_patch: int,
                       rng: np.random.Generator | int) -> list[Annotation]:
    """Keep ``min(keep_per_patch, len(group))`` uniformly chosen annotations per group."""
    if keep_per_patch < 1:
        raise ValueError("keep_per_patch must be >= 1")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    kept = []
    for group in groups:
        if len(group) <= keep_per_patch:
            kept.extend(group)
            continue
        picks = rng.choice(len(group), size=keep_per_patch, replace=False)
        kept.extend(group[i] for i in sorted(picks))
    return sorted(kept, key=lambda a: a.instance_id)


def incomplete_annotations(config: SynthConfig, index: int, annotations: Sequence[Annotation]) -> list[Annotation]:
    windows = tile_image(config.image_size, config.image_size, config.patch_size, config.patch_overlap)
    return delete_annotations(group_by_patch(annotations, windows), config.keep_per_patch,
                              _rng(config.seed, index, _STREAM_DELETE))


@dataclass(frozen=True)
class FoldSplit:
    train: tuple[int, ...]
    validation: tuple[int, ...]
    test: tuple[int, ...]


@dataclass
class FoldData:
    """Images (floats in [0, 1]) and the annotations each split is allowed to see."""

    index: int
    train_images: list[np.ndarray]
    train_boxes: list[list[BoundingBox]]  # incomplete
    val_images: list[np.ndarray]
    val_boxes: list[list[BoundingBox]]  # incomplete
    test_images: list[np.ndarray]
    test_boxes: list[list[BoundingBox]]  # complete
    oracle_prior: float | None = None


@dataclass
class SyntheticDataset:
    config: SynthConfig
    images: list[np.ndarray]  # uint8
    full_annotations: list[list[Annotation]]
    incomplete_annotations: list[list[Annotation]]
    splits: list[FoldSplit]
    oracle_priors: list[float] = field(default_factory=list)

    @property
    def n_folds(self) -> int:
        return len(self.splits)

    def image(self, i: int) -> np.ndarray:
        return self.images[i].astype(np.float64) / 255.0

    def fold(self, k: int) -> FoldData:
        split = self.splits[k]

        def boxes(source, ids):
            return [[a.box for a in source[i]] for i in ids]

        return FoldData(
            index=k,
            train_images=[self.image(i) for i in split.train],
            train_boxes=boxes(self.incomplete_annotations, split.train),
            val_images=[self.image(i) for i in split.validation],
            val_boxes=boxes(self.incomplete_annotations, split.validation),
            test_images=[self.image(i) for i in split.test],
            test_boxes=boxes(self.full_annotations, split.test),
            oracle_prior=self.oracle_priors[k] if self.oracle_priors else None,
        )

    def split_labels(self, i: int) -> list[str]:
        labels = []
        for split in self.splits:
            if i in split.validation:
                labels.append("validation")
            elif i in split.test:
                labels.append("test")
            else:
                labels.append("train")
        return labels


def make_splits(n_images: int, n_folds: int) -> list[FoldSplit]:
    """Fixed validation block (first sixth), then rotating train/test blocks."""
    if n_folds < 2:
        raise ValueError("need at least 2 folds")
    if n_images <= 0 or n_images % 6 != 0:
        raise ValueError(f"n_images must be a positive multiple of 6 for a 4:1:1 split, got {n_images}")
    n_val = n_images // 6
    rest = list(range(n_val, n_images))
    if len(rest) % n_folds != 0:
        raise ValueError(f"{len(rest)} non-validation images do not divide into {n_folds} folds")
    block = len(rest) // n_folds
    validation = tuple(range(n_val))
    splits = []
    for k in range(n_folds):
        test = tuple(rest[k * block:(k + 1) * block])
        train = tuple(i for i in rest if i not in test)
        splits.append(FoldSplit(train, validation, test))
    return splits


def anchor_positive_fraction(image_size: int, boxes_per_image: Sequence[Sequence[BoundingBox]],
                             detector: DetectorConfig, tau_pos: float) -> float:
    """Fraction of grid anchors whose best IoU with a true box reaches ``tau_pos``."""
    anchors = anchor_boxes(anchors_to_array(
        make_anchor_grid(image_size, image_size, detector.stride, detector.anchor_size)))
    positives = total = 0
    for boxes in boxes_per_image:
        total += len(anchors)
        if boxes:
            positives += int(np.sum(iou_matrix(anchors, boxes_to_array(boxes)).max(axis=1) >= tau_pos))
    return positives / total if total else 0.0


def build_dataset(config: SynthConfig, n_images: int, n_folds: int = 5,
                  detector: DetectorConfig | None = None, tau_pos: float = 0.5) -> SyntheticDataset:
    splits = make_splits(n_images, n_folds)
    images, full, incomplete = [], [], []
    for i in range(n_images):
        img, anns = generate_image(config, i)
        images.append(quantize(img))
        full.append(anns)
    # each image is train in some fold (or validation), so each gets one fixed deleted
    # version; fold views hand out the full list whenever the image is a test image
    for i, anns in enumerate(full):
        incomplete.append(incomplete_annotations(config, i, anns))
    ds = SyntheticDataset(config, images, full, incomplete, splits)
    ds.oracle_priors = _oracle_priors(ds, detector or DetectorConfig(), tau_pos)
    return ds


def _oracle_priors(ds: SyntheticDataset, detector: DetectorConfig, tau_pos: float) -> list[float]:
    return [anchor_positive_fraction(ds.config.image_size,
                                     [[a.box for a in ds.full_annotations[i]] for i in split.train],
                                     detector, tau_pos)
            for split in ds.splits]


def _box_list(anns: Sequence[Annotation]) -> list[list[float]]:
    return [list(a.box.as_tuple()) for a in anns]


def save_dataset(ds: SyntheticDataset, out_dir: str | Path) -> None:
    """Write ``images/*.pgm``, ``manifest.jsonl`` and ``dataset.json``.

    Manifest lines are JSON objects with keys in the fixed order
    ``id, file, splits, full, incomplete``; ``splits[k]`` is the image's role
    in fold ``k`` and the box lists hold ``[x, y, w, h]`` quadruples.
    """
    out_dir = Path(out_dir)
    lines = []
    for i, img in enumerate(ds.images):
        rel = f"images/img_{i:04d}.pgm"
        persist.write_pgm(out_dir / rel, img)
        record = {"id": i, "file": rel, "splits": ds.split_labels(i),
                  "full": _box_list(ds.full_annotations[i]),
                  "incomplete": _box_list(ds.incomplete_annotations[i])}
        lines.append(json.dumps(record))
    persist.atomic_write_text(out_dir / MANIFEST_NAME, "\n".join(lines) + "\n")
    meta = {"rng": RNG_ALGORITHM, "n_images": len(ds.images), "n_folds": ds.n_folds,
            "oracle_priors": ds.oracle_priors, "synth": asdict(ds.config)}
    persist.atomic_write_text(out_dir / DATASET_META_NAME, json.dumps(meta, indent=2) + "\n")


def load_dataset(in_dir: str | Path) -> SyntheticDataset:
    in_dir = Path(in_dir)
    meta = json.loads((in_dir / DATASET_META_NAME).read_text())
    config = SynthConfig(**meta["synth"])
    records = [json.loads(line) for line in (in_dir / MANIFEST_NAME).read_text().splitlines() if line.strip()]
    images, full, incomplete = [], [], []
    for i, rec in enumerate(records):
        if rec["id"] != i:
            raise ValueError(f"manifest record {i} has id {rec['id']}")
        images.append(persist.read_pgm(in_dir / rec["file"]))
        anns = [Annotation(BoundingBox(*b), k) for k, b in enumerate(rec["full"])]
        by_box = {a.box.as_tuple(): a for a in anns}
        try:
            kept = [by_box[tuple(b)] for b in rec["incomplete"]]
        except KeyError as exc:
            raise ValueError(f"image {i}: incomplete annotation not in full list") from exc
        full.append(anns)
        incomplete.append(kept)
    n_folds = meta["n_folds"]
    splits = []
    for k in range(n_folds):
        role = {name: tuple(r["id"] for r in records if r["splits"][k] == name)
                for name in ("train", "validation", "test")}
        splits.append(FoldSplit(role["train"], role["validation"], role["test"]))
    return SyntheticDataset(config, images, full, incomplete, splits, list(meta["oracle_priors"]))
