import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pudet.geometry import BoundingBox
from pudet.lossmath import (
    ClassPrior, PriorProvenance, biased_pu_cls_loss, cross_entropy, loc_loss, pn_cls_loss,
    pu_cls_loss, smooth_l1, total_loss,
)

# frozen from a 30-digit mpmath evaluation of the formulas
PU_05 = 0.105360515657826291975642442296407
PU_09 = 0.0948244640920436512397637976462057
BIASED_05 = 0.0526802578289131382779391056956935


def ref_h(c, z):
    return -math.log(c) if z == 1 else -math.log(1.0 - c)


def ref_pu(c_pos, c_unl, pi, pooled=True):
    """Plain-loop re-evaluation of the PU risk; returns (value, pre-clamp negative risk)."""
    sp0 = sum(ref_h(c, 0) for c in c_pos)
    sp1 = sum(ref_h(c, 1) for c in c_pos)
    su0 = sum(ref_h(c, 0) for c in c_unl)
    if pooled:
        marginal = (su0 + sp0) / (len(c_unl) + len(c_pos))
    else:
        marginal = su0 / len(c_unl)
    neg = marginal - pi / len(c_pos) * sp0
    return max(0.0, neg) + pi / len(c_pos) * sp1, neg


def central_diff(f, x, h):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-8):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    err = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), atol / rtol)
    assert np.all(err < rtol), f"max relative error {err.max():.3g}"


class TestCrossEntropy:
    def test_perfect_positive(self):
        v, _ = cross_entropy(1.0 - 1e-12, 1)
        assert v == pytest.approx(0.0, abs=1e-6)

    def test_half(self):
        v, _ = cross_entropy(0.5, 0)
        assert v == pytest.approx(math.log(2), abs=1e-15)

    def test_derivative_fd(self):
        _, g = cross_entropy(0.9, 1)
        h = 1e-6
        fd = (cross_entropy(0.9 + h, 1)[0] - cross_entropy(0.9 - h, 1)[0]) / (2 * h)
        assert g == pytest.approx(fd, rel=1e-6)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            cross_entropy(float("nan"), 1)

    def test_clipped_endpoints_finite(self):
        v, g = cross_entropy(np.array([0.0, 1.0]), np.array([1, 0]))
        assert np.all(np.isfinite(v)) and np.all(np.isfinite(g))


class TestSmoothL1:
    def test_minimum(self):
        assert smooth_l1(0.0) == (0.0, 0.0)

    def test_joint_continuity(self):
        assert smooth_l1(1.0)[0] == 0.5
        assert smooth_l1(1.0 + 1e-12)[0] == pytest.approx(0.5, abs=1e-11)
        assert smooth_l1(1.0)[1] == pytest.approx(smooth_l1(1.0 + 1e-12)[1])
        assert smooth_l1(-1.0)[1] == pytest.approx(smooth_l1(-1.0 - 1e-12)[1])

    def test_outer_branch(self):
        assert smooth_l1(-3.0) == (2.5, -1.0)


class TestLocLoss:
    def test_zero_residual(self):
        boxes = [BoundingBox(1, 2, 3, 4), BoundingBox(5, 5, 2, 2)]
        assert loc_loss(boxes, boxes)[0] == 0.0

    def test_single_term(self):
        v, g = loc_loss([BoundingBox(2, 0, 1, 1)], [BoundingBox(1, 0, 1, 1)])
        assert v == 0.5
        np.testing.assert_array_equal(g, [[1.0, 0, 0, 0]])

    def test_random_matches_summation(self):
        rng = np.random.default_rng(11)
        pred = rng.normal(0, 2, size=(5, 4))
        truth = rng.normal(0, 2, size=(5, 4))
        expected = 0.0
        for p, t in zip(pred.tolist(), truth.tolist()):
            for a, b in zip(p, t):
                r = a - b
                expected += 0.5 * r * r if abs(r) <= 1 else abs(r) - 0.5
        assert loc_loss(pred, truth)[0] == pytest.approx(expected, rel=1e-14)

    def test_empty(self):
        assert loc_loss([], [])[0] == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            loc_loss([BoundingBox(0, 0, 1, 1)], [])


class TestPNLoss:
    def test_perfect(self):
        assert pn_cls_loss([1 - 1e-12], [1e-12]).value == pytest.approx(0.0, abs=1e-6)

    def test_half(self):
        assert pn_cls_loss([0.5], [0.5]).value == pytest.approx(math.log(2), abs=1e-15)

    def test_random_matches_reevaluation(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            cp = rng.uniform(0.01, 0.99, size=rng.integers(1, 30))
            cn = rng.uniform(0.01, 0.99, size=rng.integers(1, 30))
            ref = (sum(ref_h(c, 0) for c in cn) + sum(ref_h(c, 1) for c in cp)) / (cp.size + cn.size)
            assert pn_cls_loss(cp, cn).value == pytest.approx(ref, rel=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            pn_cls_loss([], [])

    def test_monotone(self):
        rng = np.random.default_rng(8)
        cp = rng.uniform(0.1, 0.9, 6)
        cn = rng.uniform(0.1, 0.9, 6)
        base = pn_cls_loss(cp, cn).value
        for i in range(6):
            up = cp.copy()
            up[i] += 0.05
            assert pn_cls_loss(up, cn).value < base
            up = cn.copy()
            up[i] += 0.05
            assert pn_cls_loss(cp, up).value > base


class TestPULoss:
    def test_inactive_clamp_example(self):
        r = pu_cls_loss([0.9], [0.1], ClassPrior(0.5))
        assert r.value == pytest.approx(PU_05, rel=1e-12)
        assert not r.clamp_active

    def test_active_clamp_example(self):
        r = pu_cls_loss([0.9], [0.1], ClassPrior(0.9))
        assert r.value == pytest.approx(PU_09, rel=1e-12)
        assert r.clamp_active
        np.testing.assert_array_equal(r.grad_other, [0.0])

    def test_pn_identity(self):
        rng = np.random.default_rng(2)
        cp = rng.uniform(0.3, 0.9, 7)
        cu = rng.uniform(0.05, 0.4, 13)
        r = pu_cls_loss(cp, cu, 7 / 20)
        assert not r.clamp_active
        assert r.value == pytest.approx(pn_cls_loss(cp, cu).value, rel=1e-12)

    def test_needs_both_sets(self):
        with pytest.raises(ValueError):
            pu_cls_loss([], [0.2], 0.1)
        with pytest.raises(ValueError):
            pu_cls_loss([0.2], [], 0.1)

    def test_unclamped_can_go_negative(self):
        r = pu_cls_loss([0.9], [0.1], 0.9, nonnegative=False)
        assert r.negative_risk < 0 and r.value < PU_09

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(1e-6, 1 - 1e-6), min_size=1, max_size=20),
           st.lists(st.floats(1e-6, 1 - 1e-6), min_size=1, max_size=20),
           st.floats(1e-3, 1 - 1e-3))
    def test_nonnegative_and_flag(self, cp, cu, pi):
        for fn, pooled in ((pu_cls_loss, True), (biased_pu_cls_loss, False)):
            r = fn(cp, cu, pi)
            value, neg = ref_pu(cp, cu, pi, pooled)
            assert r.value >= 0
            assert r.value == pytest.approx(value, rel=1e-9, abs=1e-12)
            if abs(neg) > 1e-9:
                assert r.clamp_active == (neg < 0)


class TestBiasedPU:
    def test_example(self):
        r = biased_pu_cls_loss([0.9], [0.1], 0.5)
        assert r.clamp_active
        assert r.value == pytest.approx(BIASED_05, rel=1e-12)

    def test_equal_statistics_coincide(self):
        c = np.array([0.2, 0.4, 0.7])
        a = pu_cls_loss(c, c, 0.3)
        b = biased_pu_cls_loss(c, c, 0.3)
        assert a.value == pytest.approx(b.value, rel=1e-14)

    def test_random_matches_reevaluation(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            cp = rng.uniform(0.01, 0.99, size=rng.integers(1, 30))
            cu = rng.uniform(0.01, 0.99, size=rng.integers(1, 30))
            pi = float(rng.uniform(0.01, 0.5))
            assert biased_pu_cls_loss(cp, cu, pi).value == pytest.approx(
                ref_pu(cp, cu, pi, pooled=False)[0], rel=1e-12)


class TestGradients:
    """Analytic derivatives against central differences at 100 random points."""

    H_PROB = 1e-6

    def test_cross_entropy(self):
        rng = np.random.default_rng(0)
        for c in rng.uniform(0.01, 0.99, 100):
            for z in (0, 1):
                fd = central_diff(lambda x: cross_entropy(x[0], z)[0], np.array([c]), self.H_PROB)
                assert_grad_close(cross_entropy(c, z)[1], fd[0])

    def test_smooth_l1(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(-4, 4, 300)
        a = a[np.abs(np.abs(a) - 1) > 1e-3][:100]
        for x in a:
            fd = central_diff(lambda v: smooth_l1(v[0])[0], np.array([x]), 1e-5)
            assert_grad_close(smooth_l1(x)[1], fd[0])

    def test_loc_loss(self):
        rng = np.random.default_rng(2)
        done = 0
        while done < 100:
            pred, truth = rng.normal(0, 1.5, (3, 4)), rng.normal(0, 1.5, (3, 4))
            if np.any(np.abs(np.abs(pred - truth) - 1) < 1e-3):
                continue
            fd = central_diff(lambda p: loc_loss(p.reshape(3, 4), truth)[0], pred.ravel(), 1e-5)
            assert_grad_close(loc_loss(pred, truth)[1].ravel(), fd)
            done += 1

    @pytest.mark.parametrize("which", ["pn", "pu", "biased"])
    def test_cls_losses(self, which):
        rng = np.random.default_rng({"pn": 3, "pu": 4, "biased": 5}[which])
        fn = {"pn": lambda a, b, pi: pn_cls_loss(a, b),
              "pu": pu_cls_loss, "biased": biased_pu_cls_loss}[which]
        done = 0
        while done < 100:
            n_p, n_o = int(rng.integers(1, 6)), int(rng.integers(1, 8))
            cp, co = rng.uniform(0.02, 0.98, n_p), rng.uniform(0.02, 0.98, n_o)
            pi = float(rng.uniform(0.02, 0.6))
            r = fn(cp, co, pi)
            if which != "pn" and (r.clamp_active or abs(r.negative_risk) < 1e-3):
                continue
            x = np.concatenate([cp, co])
            fd = central_diff(lambda v: fn(v[:n_p], v[n_p:], pi).value, x, self.H_PROB)
            assert_grad_close(np.concatenate([r.grad_pos, r.grad_other]), fd)
            done += 1


class TestTotalLoss:
    def test_zero(self):
        b, _ = total_loss((0.0, np.zeros((0, 4))), pn_cls_loss([1 - 1e-12], [1e-12]))
        assert b.total == pytest.approx(0.0, abs=1e-6)

    def test_sum(self):
        b, grads = total_loss(loc_loss([BoundingBox(2, 0, 1, 1)], [BoundingBox(1, 0, 1, 1)]),
                              pu_cls_loss([0.9], [0.1], 0.5))
        assert b.total == pytest.approx(0.605360515657826291975642442296, rel=1e-12)
        assert b.total == b.loc + b.cls
        assert not b.clamp_active
        assert len(grads) == 3

    def test_non_finite(self):
        with pytest.raises(FloatingPointError):
            total_loss((float("inf"), np.zeros((0, 4))), pn_cls_loss([0.5], [0.5]))


class TestClassPrior:
    def test_range(self):
        with pytest.raises(ValueError):
            ClassPrior(0.0)
        with pytest.raises(ValueError):
            ClassPrior(1.0)

    def test_provenance(self):
        assert ClassPrior(0.04, "grid_selected").provenance is PriorProvenance.GRID_SELECTED
