import math
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pudet.detector import Anchor, ModelParameters, anchor_boxes, anchors_to_array
from pudet.evaluation import EvalConfig, evaluate_fold
from pudet.geometry import BoundingBox, boxes_to_array, iou_matrix
from pudet.lossmath import ClassPrior, PriorProvenance, pn_cls_loss
from pudet.training import (
    NEGATIVE, POSITIVE, UNLABELED, AdamState, PriorCandidateResult, Regime, TrainConfig,
    adam_step, assign_anchors, best_candidate, classification_loss, crop_patches, grid_search,
    select_prior, train,
)


def blob_images(n=16, size=32, seed=0):
    """One bright blob per image, kept away from the border."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    images, boxes = [], []
    for _ in range(n):
        cx, cy = rng.uniform(10, size - 10, 2)
        images.append(0.15 + 0.7 * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * 1.5 ** 2)))
        boxes.append([BoundingBox.from_center(cx, cy, 12, 12)])
    return images, boxes


def toy_fold(n_train=12, n_val=4, seed=0, keep_every=1):
    images, boxes = blob_images(n_train + n_val, seed=seed)
    labeled = [b if i % keep_every == 0 else [] for i, b in enumerate(boxes)]
    return SimpleNamespace(train_images=images[:n_train], train_boxes=labeled[:n_train],
                           val_images=images[n_train:], val_boxes=boxes[n_train:])


FAST = dict(patch_size=0, track_validation=False)
EVAL32 = EvalConfig(patch_size=32)


class TestAssignAnchors:
    def test_identical_anchor_positive(self):
        anchors = [Anchor(10, 10, 12), Anchor(40, 40, 12)]
        a = assign_anchors(anchors, [BoundingBox(4, 4, 12, 12)], 0.5, Regime.PROPOSED_PU)
        assert a.labels.tolist() == [POSITIVE, UNLABELED]
        assert a.matched.tolist() == [0, -1]

    def test_disjoint_unlabeled_or_negative(self):
        anchors = [Anchor(100, 100, 12)]
        box = [BoundingBox(0, 0, 12, 12)]
        # the only anchor is forced positive for the unmatched box, so add a closer one
        anchors = [Anchor(6, 6, 12)] + anchors
        assert assign_anchors(anchors, box, 0.5, Regime.PROPOSED_PU).labels[1] == UNLABELED
        assert assign_anchors(anchors, box, 0.5, Regime.PN_BASELINE).labels[1] == NEGATIVE

    def test_low_iou_not_positive(self):
        # anchor box (1,1,2,2) vs truth (0,0,2,2): IoU 1/7
        anchors = [Anchor(1, 1, 2), Anchor(2, 2, 2)]
        a = assign_anchors(anchors, [BoundingBox(0, 0, 2, 2)], 0.5, Regime.BIASED_PU)
        assert a.labels.tolist() == [POSITIVE, UNLABELED]

    def test_forced_positive(self):
        # no anchor reaches 0.5; the best one is forced positive
        anchors = [Anchor(4, 4, 4), Anchor(9, 9, 4)]
        a = assign_anchors(anchors, [BoundingBox(6, 6, 4, 4)], 0.5, Regime.PN_BASELINE)
        assert a.labels.tolist() == [NEGATIVE, POSITIVE]
        assert a.matched.tolist() == [-1, 0]

    def test_tie_lower_box_index(self):
        box = BoundingBox(0, 0, 4, 4)
        a = assign_anchors([Anchor(2, 2, 4)], [box, box], 0.5, Regime.PROPOSED_PU)
        assert a.matched.tolist() == [0]

    def test_no_boxes(self):
        a = assign_anchors([Anchor(2, 2, 4)] * 3, [], 0.5, Regime.PN_BASELINE)
        assert a.labels.tolist() == [NEGATIVE] * 3

    def test_empty_anchors(self):
        with pytest.raises(ValueError):
            assign_anchors([], [BoundingBox(0, 0, 1, 1)], 0.5, Regime.PN_BASELINE)

    def test_samples(self):
        anchors = [Anchor(10, 10, 12), Anchor(40, 40, 12)]
        box = BoundingBox(4, 4, 12, 12)
        a = assign_anchors(anchors, [box], 0.5, Regime.PROPOSED_PU)
        samples = a.samples(anchors, np.zeros((2, 3)), [box])
        assert samples[0].matched_truth == box and samples[0].assignment == POSITIVE
        assert samples[1].matched_truth is None

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(list(Regime)))
    def test_regime_consistency(self, seed, regime):
        rng = np.random.default_rng(seed)
        anchors = anchors_to_array([Anchor(x, y, 12) for y in range(2, 64, 4) for x in range(2, 64, 4)])
        boxes = [BoundingBox(*rng.uniform(0, 50, 2), *rng.uniform(4, 16, 2)) for _ in range(rng.integers(0, 6))]
        a = assign_anchors(anchors, boxes, 0.5, regime)
        forbidden = NEGATIVE if regime.is_pu else UNLABELED
        assert not np.any(a.labels == forbidden)
        assert np.array_equal(a.labels == POSITIVE, a.matched >= 0)
        # every box is covered by at least one positive anchor
        overlaps = iou_matrix(anchor_boxes(anchors), boxes_to_array(boxes))
        for j in range(len(boxes)):
            assert np.any(a.labels[overlaps[:, j] >= 0.5] == POSITIVE) or a.labels[np.argmax(overlaps[:, j])] == POSITIVE


def params_of(x: np.ndarray) -> ModelParameters:
    """Wrap a flat vector as the hidden weights of a 1 x n model."""
    p = ModelParameters.zeros(1, x.size)
    p.hidden_weights = x.reshape(1, -1).copy()
    return p


def reference_adam(x0, grad_fn, steps, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Element-by-element scalar Adam in plain Python floats."""
    x = [float(v) for v in x0]
    m = [0.0] * len(x)
    v = [0.0] * len(x)
    for t in range(1, steps + 1):
        g = grad_fn(x)
        for i in range(len(x)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mhat = m[i] / (1 - b1 ** t)
            vhat = v[i] / (1 - b2 ** t)
            x[i] = x[i] - lr * mhat / (math.sqrt(vhat) + eps)
    return x


class TestAdam:
    def test_zero_gradient(self):
        p = params_of(np.array([1.0, -2.0]))
        new, state = adam_step(p, ModelParameters.zeros(1, 2), AdamState())
        np.testing.assert_array_equal(new.flatten(), p.flatten())
        assert state.step == 1

    def test_first_step_magnitude(self):
        p = params_of(np.array([0.5]))
        g = params_of(np.array([1.0]))
        new, _ = adam_step(p, g, AdamState(), learning_rate=1e-3)
        assert new.hidden_weights[0, 0] == pytest.approx(0.5 - 1e-3, abs=1e-10)

    def test_inputs_not_mutated(self):
        p = params_of(np.array([0.5, 1.0]))
        before = p.flatten().copy()
        adam_step(p, params_of(np.array([1.0, 2.0])), AdamState())
        np.testing.assert_array_equal(p.flatten(), before)

    def test_non_finite_gradient(self):
        with pytest.raises(FloatingPointError):
            adam_step(params_of(np.array([0.0])), params_of(np.array([np.nan])), AdamState())

    def test_quadratic_trajectory(self):
        target = np.array([3.0, -1.0, 0.25, 10.0])
        scale = np.array([1.0, 4.0, 0.1, 2.0])

        def grad(x):
            return [float(s * (xi - ti)) for xi, ti, s in zip(x, target, scale)]

        x0 = np.array([0.0, 2.0, -5.0, 1.0])
        p, state = params_of(x0), AdamState()
        for _ in range(100):
            x = p.hidden_weights[0]
            g = ModelParameters.zeros(1, 4)
            g.hidden_weights = (scale * (x - target)).reshape(1, -1)
            p, state = adam_step(p, g, state, learning_rate=0.05)
        ref = reference_adam(x0, grad, 100, lr=0.05)
        np.testing.assert_allclose(p.hidden_weights[0], ref, rtol=0, atol=1e-10)
        assert state.step == 100


class TestTrainConfig:
    @pytest.mark.parametrize("kw", [dict(epochs=0), dict(learning_rate=0.0), dict(tau_pos=0.0),
                                    dict(batch_images=0), dict(patch_size=16, patch_overlap=16)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_float_prior_wrapped(self):
        assert TrainConfig(prior=0.05).prior == ClassPrior(0.05)


class TestCropPatches:
    def test_box_goes_to_patches_holding_center(self):
        img = np.zeros((128, 128))
        box = BoundingBox(50, 10, 12, 12)  # center (56, 16): windows at x=0 and x=48
        images, boxes = crop_patches([img], [[box]], 64, 16)
        assert len(images) == 9 and all(im.shape == (64, 64) for im in images)
        assert boxes[0] == [box]
        assert boxes[1] == [BoundingBox(2, 10, 12, 12)]
        assert sum(map(len, boxes)) == 2


class TestTrain:
    def test_one_epoch_history(self):
        _, hist = train(toy_fold(4, 2), TrainConfig(epochs=1, **FAST))
        assert len(hist) == 1

    def test_validation_tracked(self):
        _, hist = train(toy_fold(4, 2), TrainConfig(epochs=2, patch_size=0), EVAL32)
        assert all(0.0 <= r.validation_recall <= 1.0 for r in hist.epochs)

    def test_deterministic(self):
        fold = toy_fold(6, 2)
        cfg = TrainConfig(epochs=2, regime=Regime.PROPOSED_PU, seed=5, **FAST)
        a, ha = train(fold, cfg)
        b, hb = train(fold, cfg)
        assert a.flatten().tobytes() == b.flatten().tobytes()
        assert [r.loss for r in ha.epochs] == [r.loss for r in hb.epochs]

    def test_seed_changes_result(self):
        fold = toy_fold(6, 2)
        a, _ = train(fold, TrainConfig(epochs=1, seed=1, **FAST))
        b, _ = train(fold, TrainConfig(epochs=1, seed=2, **FAST))
        assert not np.array_equal(a.flatten(), b.flatten())

    def test_separable_pn_recall(self):
        fold = toy_fold(16, 0)
        params, _ = train(fold, TrainConfig(regime=Regime.PN_BASELINE, epochs=20, **FAST))
        ev = evaluate_fold(params, fold.train_images, fold.train_boxes, EVAL32)
        assert ev.recall == 1.0

    def test_clamp_only_in_pu(self):
        fold = toy_fold(8, 0, keep_every=2)
        _, pn = train(fold, TrainConfig(regime=Regime.PN_BASELINE, epochs=3, **FAST))
        assert all(r.clamp_rate == 0.0 for r in pn.epochs)
        # a prior far above the true positive fraction drives the negative risk below zero
        _, pu = train(fold, TrainConfig(regime=Regime.PROPOSED_PU, prior=0.5, epochs=3, **FAST))
        assert any(r.clamp_rate > 0.0 for r in pu.epochs)

    def test_batches_without_positives(self):
        # no labels at all: PU falls back to the unlabeled term, PN to negatives only
        fold = toy_fold(4, 0, keep_every=100)
        fold.train_boxes = [[] for _ in fold.train_boxes]
        for regime in Regime:
            _, hist = train(fold, TrainConfig(regime=regime, epochs=1, **FAST))
            assert np.isfinite(hist.epochs[0].loss.total)
            if regime.is_pu:
                assert hist.epochs[0].skipped_batches == 1

    def test_empty_fold(self):
        with pytest.raises(ValueError):
            train(SimpleNamespace(train_images=[], train_boxes=[]), TrainConfig())


def test_equivalence_bridge():
    """pi = N_p / (N_p + N_u) with the clamp inactive turns the PU loss into PN."""
    rng = np.random.default_rng(17)
    for _ in range(200):
        n_p, n_u = rng.integers(1, 30), rng.integers(5, 300)
        c_pos = rng.uniform(0.3, 0.99, n_p)
        c_unl = rng.uniform(0.01, 0.5, n_u)
        prior = ClassPrior(n_p / (n_p + n_u))
        pu = classification_loss(Regime.PROPOSED_PU, c_pos, c_unl, prior)
        pn = classification_loss(Regime.PN_BASELINE, c_pos, c_unl, prior)
        assert not pu.clamp_active
        assert abs(pu.value - pn.value) / pn.value < 1e-12
        assert pn.value == pn_cls_loss(c_pos, c_unl).value


class TestPriorSelection:
    def test_best_candidate_ties_to_smaller(self):
        res = [PriorCandidateResult(p, r, None, None) for p, r in [(0.04, 0.8), (0.02, 0.8), (0.06, 0.7)]]
        assert best_candidate(res).prior == 0.02

    def test_best_candidate_argmax(self):
        res = [PriorCandidateResult(p, r, None, None) for p, r in [(0.02, 0.5), (0.03, 0.9), (0.05, 0.7)]]
        assert best_candidate(res).prior == 0.03

    def test_single_candidate(self):
        fold = toy_fold(4, 2)
        got = select_prior([0.03], fold, TrainConfig(epochs=1, **FAST), EVAL32)
        assert got == ClassPrior(0.03, PriorProvenance.GRID_SELECTED)

    def test_invalid_candidates(self):
        with pytest.raises(ValueError):
            select_prior([0.0, 0.5], toy_fold(2, 1), TrainConfig(epochs=1, **FAST))

    def test_matches_exhaustive_reevaluation(self):
        fold = toy_fold(8, 4, seed=3, keep_every=2)
        cfg = TrainConfig(regime=Regime.PROPOSED_PU, epochs=3, **FAST)
        grid = (0.02, 0.03, 0.04, 0.05, 0.06)
        results = grid_search(grid, fold, cfg, EVAL32)
        recalls = {}
        for pi in grid:
            params, _ = train(fold, replace(cfg, prior=ClassPrior(pi)), EVAL32)
            recalls[pi] = evaluate_fold(params, fold.val_images, fold.val_boxes, EVAL32).recall
        assert {r.prior: r.validation_recall for r in results} == recalls
        best = max(recalls.values())
        expected = min(p for p, r in recalls.items() if r == best)
        assert select_prior(grid, fold, cfg, EVAL32).value == expected
