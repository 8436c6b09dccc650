"""Detection losses and PU risk estimators with analytic gradients.

Every function works on probabilities ``c`` (not logits) and returns the
loss value together with its derivative with respect to each input, so the
detector can chain the gradients through its own backward pass.

Probabilities are clipped to ``[EPS, 1 - EPS]`` before logarithms.  The
derivative is evaluated at the clipped point rather than zeroed, which
keeps saturated predictions trainable.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .geometry import BoundingBox, boxes_to_array

EPS = 1e-7


class PriorProvenance(str, enum.Enum):
    ORACLE = "oracle"
    GRID_SELECTED = "grid_selected"
    USER_SET = "user_set"


@dataclass(frozen=True)
class ClassPrior:
    """Anchor-level positive class prior ``Pr(z = 1)``."""

    value: float
    provenance: PriorProvenance = PriorProvenance.USER_SET

    def __post_init__(self):
        if not 0.0 < self.value < 1.0:
            raise ValueError(f"class prior must lie in (0, 1), got {self.value}")
        object.__setattr__(self, "provenance", PriorProvenance(self.provenance))

    def __float__(self):
        return float(self.value)


class ClsLoss(NamedTuple):
    value: float
    grad_pos: np.ndarray
    grad_other: np.ndarray  # w.r.t. negatives (PN) or unlabeled samples (PU)
    clamp_active: bool
    negative_risk: float  # pre-clamp estimate of (1 - prior) E[H(c, 0) | z = 0]


@dataclass(frozen=True)
class LossBreakdown:
    loc: float
    cls: float
    clamp_active: bool
    total: float


def _as_prob(c) -> np.ndarray:
    arr = np.asarray(c, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("probabilities must be finite")
    return np.clip(arr, EPS, 1.0 - EPS)


def _prior_value(prior) -> float:
    value = float(prior.value if isinstance(prior, ClassPrior) else prior)
    if not 0.0 < value < 1.0:
        raise ValueError(f"class prior must lie in (0, 1), got {value}")
    return value


def cross_entropy(c, z):
    """``H(c, z)``: ``-ln c`` for ``z = 1`` and ``-ln(1 - c)`` for ``z = 0``.

    Broadcasts over arrays.  Returns ``(value, d_value / d_c)``.
    """
    cc = _as_prob(c)
    z = np.asarray(z)
    if not np.all((z == 0) | (z == 1)):
        raise ValueError("labels must be 0 or 1")
    value = np.where(z == 1, -np.log(cc), -np.log1p(-cc))
    grad = np.where(z == 1, -1.0 / cc, 1.0 / (1.0 - cc))
    if value.ndim == 0:
        return float(value), float(grad)
    return value, grad


def _h0(cc):
    """``H(c, 0)`` and its derivative on already clipped probabilities."""
    return -np.log1p(-cc), 1.0 / (1.0 - cc)


def _h1(cc):
    """``H(c, 1)`` and its derivative on already clipped probabilities."""
    return -np.log(cc), -1.0 / cc


def smooth_l1(a):
    """Quadratic for ``|a| <= 1``, linear beyond; returns ``(value, derivative)``."""
    a = np.asarray(a, dtype=np.float64)
    inner = np.abs(a) <= 1.0
    value = np.where(inner, 0.5 * a * a, np.abs(a) - 0.5)
    grad = np.where(inner, a, np.sign(a))
    if value.ndim == 0:
        return float(value), float(grad)
    return value, grad


def _coords(boxes) -> np.ndarray:
    if len(boxes) and isinstance(boxes[0], BoundingBox):
        return boxes_to_array(boxes)
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def loc_loss(pred: Sequence[BoundingBox] | np.ndarray,
             truth: Sequence[BoundingBox] | np.ndarray) -> tuple[float, np.ndarray]:
    """Sum of smooth-L1 over the four coordinate residuals of every pair.

    Accepts box sequences or ``(N, 4)`` arrays (the detector passes encoded
    offsets).  The gradient has the shape ``(N, 4)``.
    """
    if len(pred) != len(truth):
        raise ValueError(f"pred and truth lengths differ: {len(pred)} != {len(truth)}")
    p = _coords(pred)
    t = _coords(truth)
    value, grad = smooth_l1(p - t)
    return float(np.sum(value)), np.asarray(grad).reshape(-1, 4)


def pn_cls_loss(c_pos, c_neg) -> ClsLoss:
    """Positive/negative cross-entropy averaged over all samples."""
    c_pos = np.atleast_1d(_as_prob(c_pos))
    c_neg = np.atleast_1d(_as_prob(c_neg))
    n = c_pos.size + c_neg.size
    if n == 0:
        raise ValueError("pn_cls_loss needs at least one sample")
    h1, g1 = _h1(c_pos)
    h0, g0 = _h0(c_neg)
    value = (np.sum(h0) + np.sum(h1)) / n
    return ClsLoss(float(value), g1 / n, g0 / n, False, float(np.sum(h0) / n))


def _pu_loss(c_pos, c_unl, prior, pooled: bool, nonnegative: bool) -> ClsLoss:
    pi = _prior_value(prior)
    c_pos = np.atleast_1d(_as_prob(c_pos))
    c_unl = np.atleast_1d(_as_prob(c_unl))
    n_p, n_u = c_pos.size, c_unl.size
    if n_p == 0 or n_u == 0:
        raise ValueError("PU risk needs at least one positive and one unlabeled sample")

    h0_p, g0_p = _h0(c_pos)
    h1_p, g1_p = _h1(c_pos)
    h0_u, g0_u = _h0(c_unl)

    # marginal E_x[H(c, 0)]: pooled positives + unlabeled, or unlabeled only
    marginal_n = n_u + n_p if pooled else n_u
    marginal = (np.sum(h0_u) + (np.sum(h0_p) if pooled else 0.0)) / marginal_n
    negative_risk = marginal - pi / n_p * np.sum(h0_p)
    positive_risk = pi / n_p * np.sum(h1_p)

    grad_pos = pi / n_p * g1_p
    clamp_active = bool(nonnegative and negative_risk < 0.0)
    if clamp_active:
        grad_unl = np.zeros(n_u)
        value = positive_risk
    else:
        own = 1.0 / marginal_n if pooled else 0.0
        grad_pos = grad_pos + (own - pi / n_p) * g0_p
        grad_unl = g0_u / marginal_n
        value = negative_risk + positive_risk
    return ClsLoss(float(value), grad_pos, grad_unl, clamp_active, float(negative_risk))


def pu_cls_loss(c_pos, c_unl, prior, nonnegative: bool = True) -> ClsLoss:
    """Non-negative PU risk with the marginal term estimated from the pooled
    positive and unlabeled samples of the same images.

    ``nonnegative=False`` drops the clamp and gives the unbiased estimator.
    The gradient through an active clamp is zero on the negative-risk part.
    """
    return _pu_loss(c_pos, c_unl, prior, pooled=True, nonnegative=nonnegative)


def biased_pu_cls_loss(c_pos, c_unl, prior, nonnegative: bool = True) -> ClsLoss:
    """Classification-style PU risk: the marginal term uses unlabeled samples only."""
    return _pu_loss(c_pos, c_unl, prior, pooled=False, nonnegative=nonnegative)


def total_loss(loc: tuple[float, np.ndarray], cls: ClsLoss) -> tuple[LossBreakdown, tuple]:
    """Unit-weight sum of localization and classification loss.

    Returns the breakdown and the gradient tuple
    ``(d/d loc inputs, d/d positive probs, d/d other probs)``.
    """
    loc_value, loc_grad = loc
    if not (math.isfinite(loc_value) and math.isfinite(cls.value)):
        raise FloatingPointError(f"non-finite loss component: loc={loc_value}, cls={cls.value}")
    breakdown = LossBreakdown(float(loc_value), float(cls.value), cls.clamp_active,
                              float(loc_value) + float(cls.value))
    return breakdown, (loc_grad, cls.grad_pos, cls.grad_other)
