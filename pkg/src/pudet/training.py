"""Anchor assignment, Adam, the three training regimes and class-prior search."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import evaluation
from .detector import (
    Anchor, DetectorConfig, ModelParameters, anchor_boxes, anchors_to_array, backward,
    encode_boxes, extract_features_batch, forward, init_params, make_anchor_grid,
)
from .geometry import BoundingBox, boxes_to_array, iou_matrix, tile_image
from .lossmath import (
    ClassPrior, LossBreakdown, PriorProvenance, biased_pu_cls_loss, loc_loss, pn_cls_loss,
    pu_cls_loss, total_loss,
)

log = logging.getLogger(__name__)

DEFAULT_PRIOR_GRID = (0.02, 0.03, 0.04, 0.05, 0.06)

POSITIVE, NEGATIVE, UNLABELED = 1, 0, -1


class Regime(str, enum.Enum):
    PN_BASELINE = "pn_baseline"
    BIASED_PU = "biased_pu"
    PROPOSED_PU = "proposed_pu"

    @property
    def is_pu(self) -> bool:
        return self is not Regime.PN_BASELINE


@dataclass(frozen=True)
class AnchorSample:
    anchor: Anchor
    features: np.ndarray
    assignment: int  # POSITIVE, NEGATIVE or UNLABELED
    matched_truth: BoundingBox | None


@dataclass
class AnchorAssignment:
    """Per-anchor labels (POSITIVE / NEGATIVE / UNLABELED) and matched box index (-1 if none)."""

    labels: np.ndarray
    matched: np.ndarray

    @property
    def positive(self) -> np.ndarray:
        return self.labels == POSITIVE

    def samples(self, anchors: Sequence[Anchor], features: np.ndarray,
                boxes: Sequence[BoundingBox]) -> list[AnchorSample]:
        return [AnchorSample(a, features[i], int(self.labels[i]),
                             boxes[self.matched[i]] if self.matched[i] >= 0 else None)
                for i, a in enumerate(anchors)]


def _anchor_array(anchors) -> np.ndarray:
    if isinstance(anchors, np.ndarray):
        return anchors
    return anchors_to_array(anchors)


def assign_anchors(anchors, labeled_boxes, tau_pos: float, regime: Regime | str) -> AnchorAssignment:
    """Label anchors against the (possibly incomplete) annotations.

    Positive iff the best IoU reaches ``tau_pos`` (argmax box, ties to the lower
    index); each box that no anchor reaches ``tau_pos`` on forces its best
    anchor positive.  All
    other anchors are negative for the PN regime and unlabeled otherwise.
    """
    regime = Regime(regime)
    arr = _anchor_array(anchors)
    if len(arr) == 0:
        raise ValueError("no anchors to assign")
    boxes = [b.box if hasattr(b, "box") else b for b in labeled_boxes]
    background = NEGATIVE if regime is Regime.PN_BASELINE else UNLABELED
    labels = np.full(len(arr), background, dtype=np.int8)
    matched = np.full(len(arr), -1, dtype=np.int64)
    if not boxes:
        return AnchorAssignment(labels, matched)

    overlaps = iou_matrix(anchor_boxes(arr), boxes_to_array(boxes))
    best_box = np.argmax(overlaps, axis=1)  # first max -> lower box index
    best_iou = overlaps[np.arange(len(arr)), best_box]
    pos = best_iou >= tau_pos
    labels[pos] = POSITIVE
    matched[pos] = best_box[pos]
    for j in range(len(boxes)):
        if overlaps[:, j].max() < tau_pos:
            a = int(np.argmax(overlaps[:, j]))
            # an anchor that is already positive keeps its match so no box loses coverage
            if labels[a] != POSITIVE:
                labels[a] = POSITIVE
                matched[a] = j
    return AnchorAssignment(labels, matched)


@dataclass(frozen=True)
class TrainConfig:
    regime: Regime = Regime.PROPOSED_PU
    prior: ClassPrior = ClassPrior(0.04)
    learning_rate: float = 1e-3
    epochs: int = 20
    batch_images: int = 4
    tau_pos: float = 0.5
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    detector: DetectorConfig = DetectorConfig()
    patch_size: int = 64  # 0 trains on whole images
    patch_overlap: int = 16
    track_validation: bool = True

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime(self.regime))
        if not isinstance(self.prior, ClassPrior):
            object.__setattr__(self, "prior", ClassPrior(float(self.prior)))
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_images < 1:
            raise ValueError("batch_images must be >= 1")
        if not 0.0 < self.tau_pos <= 1.0:
            raise ValueError("tau_pos must lie in (0, 1]")
        if self.patch_size < 0 or (self.patch_size and not 0 <= self.patch_overlap < self.patch_size):
            raise ValueError("need patch_size >= 0 and 0 <= patch_overlap < patch_size")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: ModelParameters, grads: ModelParameters, state: AdamState,
              learning_rate: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              epsilon: float = 1e-8) -> tuple[ModelParameters, AdamState]:
    """One bias-corrected Adam update; returns fresh parameter and state objects."""
    g = grads.as_dict()
    for name, arr in g.items():
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite gradient in {name}")
    t = state.step + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.as_dict().items():
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = beta1 * m + (1.0 - beta1) * g[name]
        v = beta2 * v + (1.0 - beta2) * g[name] * g[name]
        new_params[name] = p - learning_rate * (m / bc1) / (np.sqrt(v / bc2) + epsilon)
        new_m[name], new_v[name] = m, v
    return ModelParameters(**new_params), AdamState(new_m, new_v, t)


@dataclass
class EpochRecord:
    loss: LossBreakdown
    clamp_rate: float
    validation_recall: float | None
    skipped_batches: int = 0


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.epochs)


@dataclass
class _ImageBatchData:
    features: np.ndarray
    labels: np.ndarray
    targets: np.ndarray  # encoded offsets, rows valid where labels == POSITIVE


def crop_patches(images: Sequence[np.ndarray], boxes: Sequence[Sequence[BoundingBox]],
                 patch_size: int, overlap: int) -> tuple[list[np.ndarray], list[list[BoundingBox]]]:
    """Tile images into training patches.

    A box goes to every patch that contains its center, translated into patch
    coordinates and left unclipped.
    """
    out_images, out_boxes = [], []
    for img, img_boxes in zip(images, boxes):
        h, w = img.shape
        size = min(patch_size, w, h)
        for win in tile_image(w, h, size, min(overlap, size - 1)):
            out_images.append(img[win.origin_y:win.origin_y + size, win.origin_x:win.origin_x + size])
            local = []
            for b in img_boxes:
                if win.contains(*b.center):
                    local.append(BoundingBox(b.x - win.origin_x, b.y - win.origin_y, b.w, b.h))
            out_boxes.append(local)
    return out_images, out_boxes


def prepare_training_images(images: Sequence[np.ndarray], boxes: Sequence[Sequence[BoundingBox]],
                            config: TrainConfig) -> list[_ImageBatchData]:
    det = config.detector
    out = []
    grids: dict[tuple[int, int], np.ndarray] = {}
    for img, img_boxes in zip(images, boxes):
        h, w = img.shape
        if (w, h) not in grids:
            grids[(w, h)] = anchors_to_array(make_anchor_grid(w, h, det.stride, det.anchor_size))
        anchors = grids[(w, h)]
        assignment = assign_anchors(anchors, img_boxes, config.tau_pos, config.regime)
        targets = np.zeros((len(anchors), 4))
        pos = assignment.positive
        if np.any(pos):
            matched = boxes_to_array(img_boxes)[assignment.matched[pos]]
            targets[pos] = encode_boxes(anchors[pos], matched)
        out.append(_ImageBatchData(extract_features_batch(img, anchors, det.window),
                                   assignment.labels, targets))
    return out


def classification_loss(regime: Regime, c_pos: np.ndarray, c_other: np.ndarray, prior: ClassPrior):
    """Classification term for a pooled batch under the given regime."""
    if regime is Regime.PN_BASELINE:
        return pn_cls_loss(c_pos, c_other)
    if regime is Regime.PROPOSED_PU:
        return pu_cls_loss(c_pos, c_other, prior)
    return biased_pu_cls_loss(c_pos, c_other, prior)


def batch_step(params: ModelParameters, batch: _ImageBatchData, regime: Regime, prior: ClassPrior):
    """Loss breakdown and parameter gradients for one pooled batch."""
    cache = forward(params, batch.features)
    pos = batch.labels == POSITIVE
    other = ~pos
    if regime.is_pu and (not np.any(pos) or not np.any(other)):
        # PU terms undefined; what remains is the plain cross-entropy of the present side
        cls = pn_cls_loss(cache.probability[pos], cache.probability[other])
    else:
        cls = classification_loss(regime, cache.probability[pos], cache.probability[other], prior)
    loc = loc_loss(cache.offsets[pos], batch.targets[pos])
    breakdown, (loc_grad, grad_pos, grad_other) = total_loss(loc, cls)
    d_prob = np.zeros(len(pos))
    d_prob[pos] = grad_pos
    d_prob[other] = grad_other
    d_off = np.zeros((len(pos), 4))
    d_off[pos] = loc_grad
    return breakdown, backward(params, cache, d_prob, d_off)


def _pool(items: Sequence[_ImageBatchData]) -> _ImageBatchData:
    return _ImageBatchData(np.concatenate([b.features for b in items]),
                           np.concatenate([b.labels for b in items]),
                           np.concatenate([b.targets for b in items]))


def train(fold, config: TrainConfig, eval_config=None,
          init: ModelParameters | None = None) -> tuple[ModelParameters, TrainHistory]:
    """Train one detector on the fold's (incomplete) training annotations.

    Images are tiled into ``patch_size`` patches first (the unit the detector
    sees at prediction time); ``batch_images`` patches form one batch.

    ``fold`` needs ``train_images`` / ``train_boxes`` and, for per-epoch
    validation recall, ``val_images`` / ``val_boxes``.
    """
    if len(fold.train_images) == 0:
        raise ValueError("fold has no training images")
    rng = np.random.default_rng([config.seed, 0])
    params = init.copy() if init is not None else init_params(config.detector, np.random.default_rng([config.seed, 1]))
    state = AdamState()
    images, boxes = fold.train_images, fold.train_boxes
    if config.patch_size:
        images, boxes = crop_patches(images, boxes, config.patch_size, config.patch_overlap)
    data = prepare_training_images(images, boxes, config)

    val_cache = None
    eval_config = eval_config or evaluation.EvalConfig()
    if config.track_validation and getattr(fold, "val_images", None):
        val_cache = [evaluation.prepare_image(img, config.detector, eval_config) for img in fold.val_images]

    history = TrainHistory()
    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        sums = np.zeros(3)
        clamps = batches = skipped = 0
        for start in range(0, len(order), config.batch_images):
            batch = _pool([data[i] for i in order[start:start + config.batch_images]])
            if config.regime.is_pu and not np.any(batch.labels == POSITIVE):
                skipped += 1
                log.info("epoch %d: batch at %d has no positive anchors; positive terms skipped", epoch, start)
            breakdown, grads = batch_step(params, batch, config.regime, config.prior)
            params, state = adam_step(params, grads, state, config.learning_rate,
                                      config.adam_beta1, config.adam_beta2, config.adam_epsilon)
            sums += (breakdown.loc, breakdown.cls, breakdown.total)
            clamps += breakdown.clamp_active
            batches += 1
        mean = sums / batches
        recall = None
        if val_cache is not None:
            recall = evaluation.recall_on(params, val_cache, fold.val_boxes, eval_config)
        history.epochs.append(EpochRecord(
            LossBreakdown(float(mean[0]), float(mean[1]), clamps > 0, float(mean[2])),
            clamps / batches, recall, skipped))
        log.debug("epoch %d loss %.5f clamp %.2f val recall %s", epoch, mean[2], clamps / batches, recall)
    return params, history


@dataclass
class PriorCandidateResult:
    prior: float
    validation_recall: float
    params: ModelParameters
    history: TrainHistory


def grid_search(candidate_priors: Sequence[float], fold, config: TrainConfig,
                eval_config=None) -> list[PriorCandidateResult]:
    """Train one model per candidate prior and score it by validation recall."""
    if not candidate_priors:
        raise ValueError("need at least one candidate prior")
    eval_config = eval_config or evaluation.EvalConfig()
    val_cache = [evaluation.prepare_image(img, config.detector, eval_config) for img in fold.val_images]
    results = []
    for pi in candidate_priors:
        cfg = replace(config, prior=ClassPrior(float(pi), PriorProvenance.USER_SET), track_validation=False)
        params, history = train(fold, cfg, eval_config)
        recall = evaluation.recall_on(params, val_cache, fold.val_boxes, eval_config)
        results.append(PriorCandidateResult(float(pi), recall, params, history))
    return results


def best_candidate(results: Sequence[PriorCandidateResult]) -> PriorCandidateResult:
    """Highest validation recall; ties go to the smaller prior."""
    return min(results, key=lambda r: (-r.validation_recall, r.prior))


def select_prior(candidate_priors: Sequence[float], fold, config: TrainConfig,
                 eval_config=None) -> ClassPrior:
    if any(not 0.0 < p < 1.0 for p in candidate_priors):
        raise ValueError("candidate priors must lie in (0, 1)")
    best = best_candidate(grid_search(candidate_priors, fold, config, eval_config))
    return ClassPrior(best.prior, PriorProvenance.GRID_SELECTED)
