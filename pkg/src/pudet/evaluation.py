"""Patch-wise prediction, detection matching, fold metrics, paired t-tests and
the three-regime comparison harness."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, NamedTuple, Sequence

import numpy as np
from scipy import integrate

from .detector import (
    DetectorConfig, ModelParameters, anchors_to_array, decode_boxes, extract_features_batch,
    forward, make_anchor_grid,
)
from .geometry import (
    BoundingBox, PatchWindow, ScoredBox, boxes_to_array, clip_box, iou_matrix, nms_arrays,
    tile_image,
)

MATCH_IOU = "iou"
MATCH_CENTER = "center"


@dataclass(frozen=True)
class EvalConfig:
    confidence_threshold: float = 0.5
    top_k: int = 25
    nms_threshold: float = 0.3
    iou_match: float = 0.5
    match_mode: str = MATCH_IOU
    patch_size: int = 64
    patch_overlap: int = 16
    macro_average: bool = False

    def __post_init__(self):
        if self.match_mode not in (MATCH_IOU, MATCH_CENTER):
            raise ValueError(f"match_mode must be '{MATCH_IOU}' or '{MATCH_CENTER}'")
        if not 0.0 < self.iou_match <= 1.0:
            raise ValueError("iou_match must lie in (0, 1]")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


class _PatchInput(NamedTuple):
    window: PatchWindow
    anchors: np.ndarray  # patch-local (N, 3)
    features: np.ndarray


@dataclass
class PreparedImage:
    """Per-patch anchor features, computed once and reused across models."""

    width: int
    height: int
    patches: list[_PatchInput]


def prepare_image(image: np.ndarray, detector: DetectorConfig, config: EvalConfig) -> PreparedImage:
    h, w = image.shape
    patch = min(config.patch_size, w, h)
    overlap = min(config.patch_overlap, patch - 1)
    anchors = anchors_to_array(make_anchor_grid(patch, patch, detector.stride, detector.anchor_size))
    patches = []
    for win in tile_image(w, h, patch, overlap):
        crop = image[win.origin_y:win.origin_y + patch, win.origin_x:win.origin_x + patch]
        patches.append(_PatchInput(win, anchors, extract_features_batch(crop, anchors, detector.window)))
    return PreparedImage(w, h, patches)


def predict_prepared(params: ModelParameters, prepared: PreparedImage, config: EvalConfig) -> list[ScoredBox]:
    boxes, scores = [], []
    for patch in prepared.patches:
        out = forward(params, patch.features)
        keep = np.flatnonzero(out.probability > config.confidence_threshold)
        if keep.size == 0:
            continue
        # descending score, lower anchor index first on ties
        keep = keep[np.lexsort((keep, -out.probability[keep]))][:config.top_k]
        decoded = decode_boxes(patch.anchors[keep], out.offsets[keep])
        for row, score in zip(decoded, out.probability[keep]):
            box = clip_box(BoundingBox(row[0] + patch.window.origin_x, row[1] + patch.window.origin_y,
                                       row[2], row[3]), prepared.width, prepared.height)
            if box is not None:
                boxes.append(box.as_tuple())
                scores.append(float(score))
    if not boxes:
        return []
    kept = nms_arrays(np.array(boxes), np.array(scores), config.nms_threshold)
    return [ScoredBox(BoundingBox(*boxes[i]), scores[i]) for i in kept]


def predict_image(params: ModelParameters, image: np.ndarray, config: EvalConfig | None = None,
                  detector: DetectorConfig | None = None) -> list[ScoredBox]:
    """Thresholded, top-K, patch-merged and NMS-filtered detections for one image."""
    config = config or EvalConfig()
    detector = detector or DetectorConfig(window=int(round(math.sqrt(params.feature_dim))))
    return predict_prepared(params, prepare_image(image, detector, config), config)


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    matched_pairs: list[tuple[int, int]] = field(default_factory=list)


def match_detections(preds: Sequence[ScoredBox], truths: Sequence[BoundingBox], iou_match: float = 0.5,
                     mode: str = MATCH_IOU) -> MatchResult:
    """Greedy matching in descending score order (index breaks ties).

    Each prediction takes the unmatched truth with the highest IoU, provided it
    clears ``iou_match`` (``iou`` mode) or contains the prediction center
    (``center`` mode).
    """
    if not 0.0 < iou_match <= 1.0:
        raise ValueError("iou_match must lie in (0, 1]")
    n_pred, n_true = len(preds), len(truths)
    if n_pred == 0 or n_true == 0:
        return MatchResult(0, n_pred, n_true, [])
    pred_arr = boxes_to_array([p.box for p in preds])
    true_arr = boxes_to_array(truths)
    overlaps = iou_matrix(pred_arr, true_arr)
    if mode == MATCH_CENTER:
        cx = pred_arr[:, 0] + pred_arr[:, 2] / 2
        cy = pred_arr[:, 1] + pred_arr[:, 3] / 2
        eligible = ((cx[:, None] >= true_arr[None, :, 0]) & (cx[:, None] <= true_arr[None, :, 0] + true_arr[None, :, 2])
                    & (cy[:, None] >= true_arr[None, :, 1]) & (cy[:, None] <= true_arr[None, :, 1] + true_arr[None, :, 3]))
    elif mode == MATCH_IOU:
        eligible = overlaps >= iou_match
    else:
        raise ValueError(f"unknown match mode {mode!r}")
    scores = np.array([p.score for p in preds])
    order = np.lexsort((np.arange(n_pred), -scores))
    taken = np.zeros(n_true, dtype=bool)
    pairs = []
    for i in order:
        cand = np.flatnonzero(eligible[i] & ~taken)
        if cand.size == 0:
            continue
        j = int(cand[np.argmax(overlaps[i, cand])])
        taken[j] = True
        pairs.append((int(i), j))
    tp = len(pairs)
    return MatchResult(tp, n_pred - tp, n_true - tp, pairs)


def ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


@dataclass
class FoldEvaluation:
    tp: int
    fp: int
    fn: int
    recall: float
    precision: float
    per_image: list[MatchResult]


def _evaluate_prepared(params, prepared: Sequence[PreparedImage], truths, config: EvalConfig) -> FoldEvaluation:
    results = [match_detections(predict_prepared(params, p, config), t, config.iou_match, config.match_mode)
               for p, t in zip(prepared, truths)]
    tp = sum(r.tp for r in results)
    fp = sum(r.fp for r in results)
    fn = sum(r.fn for r in results)
    if config.macro_average:
        recall = float(np.mean([ratio(r.tp, r.tp + r.fn) for r in results])) if results else 0.0
        precision = float(np.mean([ratio(r.tp, r.tp + r.fp) for r in results])) if results else 0.0
    else:
        recall, precision = ratio(tp, tp + fn), ratio(tp, tp + fp)
    return FoldEvaluation(tp, fp, fn, recall, precision, results)


def evaluate_fold(params: ModelParameters, images: Sequence[np.ndarray], truths: Sequence[Sequence[BoundingBox]],
                  config: EvalConfig | None = None, detector: DetectorConfig | None = None) -> FoldEvaluation:
    """Pooled TP/FP/FN over the test images, then recall and precision."""
    config = config or EvalConfig()
    detector = detector or DetectorConfig(window=int(round(math.sqrt(params.feature_dim))))
    prepared = [prepare_image(img, detector, config) for img in images]
    return _evaluate_prepared(params, prepared, truths, config)


def recall_on(params: ModelParameters, prepared: Sequence[PreparedImage], truths, config: EvalConfig) -> float:
    return _evaluate_prepared(params, prepared, truths, config).recall


def _t_pdf(x: float, df: int) -> float:
    log_norm = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
    return math.exp(log_norm - (df + 1) / 2 * math.log1p(x * x / df))


def t_two_sided_p(t: float, df: int) -> float:
    """Two-sided tail probability of Student's t by quadrature of the density."""
    tail, _ = integrate.quad(_t_pdf, abs(t), math.inf, args=(df,), epsabs=1e-10, epsrel=1e-12, limit=200)
    return min(1.0, 2.0 * tail)


class PairedTTest(NamedTuple):
    statistic: float
    p_value: float
    degenerate: bool


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> PairedTTest:
    """Two-sided paired Student's t-test.

    Zero variance of the differences makes the statistic undefined; that case
    is reported as ``p = 1.0`` with ``degenerate=True``.
    """
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if d.size < 2:
        raise ValueError("paired t-test needs at least two pairs")
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        return PairedTTest(math.nan, 1.0, True)
    t = float(np.mean(d)) / (sd / math.sqrt(d.size))
    return PairedTTest(t, t_two_sided_p(t, d.size - 1), False)


def significance_marker(p: float) -> str:
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


@dataclass
class MetricsReport:
    per_fold: dict[str, list[tuple[float, float]]]  # regime -> [(recall, precision)] per fold
    mean_recall: dict[str, float]
    mean_precision: dict[str, float]
    std_recall: dict[str, float]
    std_precision: dict[str, float]
    paired_t_p_values: dict[tuple[str, str, str], PairedTTest]  # (reference, competitor, metric)


def summarize(per_fold: Mapping[str, Sequence[tuple[float, float]]], reference: str) -> MetricsReport:
    """Fold mean / sample std per regime and paired t-tests against ``reference``."""
    per_fold = {k: [tuple(map(float, v)) for v in vals] for k, vals in per_fold.items()}
    mean_r, mean_p, std_r, std_p = {}, {}, {}, {}
    for name, rows in per_fold.items():
        arr = np.array(rows).reshape(-1, 2)
        mean_r[name], mean_p[name] = float(arr[:, 0].mean()), float(arr[:, 1].mean())
        ddof = 1 if len(arr) > 1 else 0
        std_r[name], std_p[name] = float(arr[:, 0].std(ddof=ddof)), float(arr[:, 1].std(ddof=ddof))
    tests = {}
    ref = np.array(per_fold[reference]).reshape(-1, 2)
    for name, rows in per_fold.items():
        if name == reference or len(rows) < 2:
            continue
        other = np.array(rows).reshape(-1, 2)
        tests[(reference, name, "recall")] = paired_t_test(ref[:, 0], other[:, 0])
        tests[(reference, name, "precision")] = paired_t_test(ref[:, 1], other[:, 1])
    return MetricsReport(per_fold, mean_r, mean_p, std_r, std_p, tests)


@dataclass
class RegimeFoldResult:
    regime: str
    fold: int
    prior: float | None
    evaluation: FoldEvaluation
    params: ModelParameters
    history: object
    grid_recalls: dict[float, float] = field(default_factory=dict)


@dataclass
class Comparison:
    report: MetricsReport
    runs: list[RegimeFoldResult]


def run_regime_fold(dataset, fold_index: int, config, eval_config: EvalConfig,
                    prior_grid: Sequence[float]) -> RegimeFoldResult:
    """Train (with prior search for PU regimes) and test one regime on one fold."""
    from . import training

    fold = dataset.fold(fold_index)
    grid_recalls = {}
    if config.regime.is_pu and prior_grid:
        results = training.grid_search(prior_grid, fold, config, eval_config)
        grid_recalls = {r.prior: r.validation_recall for r in results}
        best = training.best_candidate(results)
        params, history, prior = best.params, best.history, best.prior
    else:
        params, history = training.train(fold, config, eval_config)
        prior = float(config.prior.value) if config.regime.is_pu else None
    ev = evaluate_fold(params, fold.test_images, fold.test_boxes, eval_config, config.detector)
    return RegimeFoldResult(config.regime.value, fold_index, prior, ev, params, history, grid_recalls)


def _run_job(args):
    return run_regime_fold(*args)


def compare_methods(dataset, configs: Mapping, eval_config: EvalConfig | None = None,
                    prior_grid: Sequence[float] = (0.02, 0.03, 0.04, 0.05, 0.06),
                    jobs: int = 1, reference: str = "proposed_pu") -> Comparison:
    """Run every regime on every fold and aggregate into a :class:`MetricsReport`.

    ``configs`` maps regime name to its ``TrainConfig``.  Jobs are independent,
    so ``jobs > 1`` runs them in worker processes; results are gathered in a
    fixed (regime, fold) order either way.
    """
    eval_config = eval_config or EvalConfig()
    tasks = [(dataset, k, cfg, eval_config, tuple(prior_grid))
             for _, cfg in configs.items() for k in range(dataset.n_folds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_run_job, tasks))
    else:
        runs = [_run_job(t) for t in tasks]
    per_fold: dict[str, list[tuple[float, float]]] = {}
    for run in runs:
        per_fold.setdefault(run.regime, []).append((run.evaluation.recall, run.evaluation.precision))
    return Comparison(summarize(per_fold, reference), runs)
