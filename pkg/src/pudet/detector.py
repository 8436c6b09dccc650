"""Anchor-grid detector: a two-layer perceptron over local pixel windows.

Each anchor gets a normalized ``window x window`` pixel patch as input and
produces a positive probability plus four box offsets.  Forward and backward
passes are written out explicitly in numpy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .geometry import BoundingBox

VARIANCE_FLOOR = 1e-6
OFFSET_CLAMP = 4.0


@dataclass(frozen=True)
class Anchor:
    center_x: float
    center_y: float
    size: float


@dataclass(frozen=True)
class DetectorConfig:
    window: int = 16
    stride: int = 4
    anchor_size: int = 12
    hidden_dim: int = 32

    @property
    def feature_dim(self) -> int:
        return self.window * self.window


@dataclass
class ModelParameters:
    hidden_weights: np.ndarray  # (hidden_dim, feature_dim)
    hidden_bias: np.ndarray  # (hidden_dim,)
    cls_weights: np.ndarray  # (hidden_dim,)
    cls_bias: np.ndarray  # shape () scalar array, so it can be updated in place
    reg_weights: np.ndarray  # (4, hidden_dim)
    reg_bias: np.ndarray  # (4,)

    def __post_init__(self):
        hidden, feat = np.shape(self.hidden_weights)
        expected = {
            "hidden_bias": (hidden,),
            "cls_weights": (hidden,),
            "cls_bias": (),
            "reg_weights": (4, hidden),
            "reg_bias": (4,),
        }
        for name, shape in expected.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            setattr(self, name, arr)
        self.hidden_weights = np.asarray(self.hidden_weights, dtype=np.float64)

    @property
    def hidden_dim(self) -> int:
        return self.hidden_weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.hidden_weights.shape[1]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> ModelParameters:
        return ModelParameters(**{k: v.copy() for k, v in self.as_dict().items()})

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.as_dict().values()])

    @classmethod
    def unflatten(cls, flat: np.ndarray, hidden_dim: int, feature_dim: int) -> ModelParameters:
        shapes = param_shapes(hidden_dim, feature_dim)
        out, pos = {}, 0
        for name, shape in shapes.items():
            n = int(np.prod(shape))
            out[name] = np.array(flat[pos:pos + n], dtype=np.float64).reshape(shape)
            pos += n
        if pos != flat.size:
            raise ValueError(f"flat vector has {flat.size} entries, expected {pos}")
        return cls(**out)

    @classmethod
    def zeros(cls, hidden_dim: int, feature_dim: int) -> ModelParameters:
        return cls(**{k: np.zeros(s) for k, s in param_shapes(hidden_dim, feature_dim).items()})


def param_shapes(hidden_dim: int, feature_dim: int) -> dict[str, tuple[int, ...]]:
    return {
        "hidden_weights": (hidden_dim, feature_dim),
        "hidden_bias": (hidden_dim,),
        "cls_weights": (hidden_dim,),
        "cls_bias": (),
        "reg_weights": (4, hidden_dim),
        "reg_bias": (4,),
    }


def init_params(config: DetectorConfig, rng: np.random.Generator) -> ModelParameters:
    """He-normal hidden layer, small normal heads, zero biases."""
    h, d = config.hidden_dim, config.feature_dim
    return ModelParameters(
        hidden_weights=rng.normal(0.0, math.sqrt(2.0 / d), size=(h, d)),
        hidden_bias=np.zeros(h),
        cls_weights=rng.normal(0.0, math.sqrt(1.0 / h), size=h),
        cls_bias=np.zeros(()),
        reg_weights=rng.normal(0.0, 0.1 * math.sqrt(1.0 / h), size=(4, h)),
        reg_bias=np.zeros(4),
    )


def make_anchor_grid(image_w: int, image_h: int, stride: int, anchor_size: int) -> list[Anchor]:
    if stride < 1 or anchor_size < 2:
        raise ValueError(f"need stride >= 1 and anchor_size >= 2, got {stride}, {anchor_size}")
    if image_w < 1 or image_h < 1:
        raise ValueError("image dimensions must be positive")
    half = stride / 2.0
    xs = [half + i * stride for i in range(int(math.ceil((image_w - half) / stride)))]
    ys = [half + j * stride for j in range(int(math.ceil((image_h - half) / stride)))]
    return [Anchor(cx, cy, float(anchor_size)) for cy in ys for cx in xs]


def anchors_to_array(anchors: Sequence[Anchor]) -> np.ndarray:
    """``(N, 3)`` array of ``(center_x, center_y, size)``."""
    return np.array([(a.center_x, a.center_y, a.size) for a in anchors], dtype=np.float64).reshape(-1, 3)


def anchor_boxes(anchors: np.ndarray) -> np.ndarray:
    """Square xywh boxes for an ``(N, 3)`` anchor array."""
    s = anchors[:, 2]
    return np.stack([anchors[:, 0] - s / 2, anchors[:, 1] - s / 2, s, s], axis=1)


def _normalize(patches: np.ndarray) -> np.ndarray:
    centered = patches - patches.mean(axis=1, keepdims=True)
    # the float mean of a constant row is not always exact
    centered[np.ptp(patches, axis=1) == 0.0] = 0.0
    var = np.mean(centered * centered, axis=1, keepdims=True)
    return centered / np.sqrt(np.maximum(var, VARIANCE_FLOOR))


def extract_features_batch(image: np.ndarray, anchors: np.ndarray, window: int) -> np.ndarray:
    """Normalized, zero-padded pixel windows for every anchor: ``(N, window**2)``."""
    image = np.asarray(image, dtype=np.float64)
    padded = np.pad(image, window)
    views = sliding_window_view(padded, (window, window))
    top = np.floor(anchors[:, 1]).astype(int) - window // 2 + window
    left = np.floor(anchors[:, 0]).astype(int) - window // 2 + window
    patches = views[top, left].reshape(len(anchors), window * window)
    return _normalize(patches)


def extract_features(image: np.ndarray, anchor: Anchor, window: int) -> np.ndarray:
    if window < anchor.size:
        raise ValueError(f"window {window} smaller than anchor size {anchor.size}")
    return extract_features_batch(image, anchors_to_array([anchor]), window)[0]


@dataclass(frozen=True)
class AnchorPrediction:
    probability: float
    offsets: tuple[float, float, float, float]


class ForwardPass(NamedTuple):
    features: np.ndarray  # (N, D)
    pre_activation: np.ndarray  # (N, H)
    hidden: np.ndarray  # (N, H)
    logit: np.ndarray  # (N,)
    probability: np.ndarray  # (N,)
    offsets: np.ndarray  # (N, 4)

    def prediction(self, i: int = 0) -> AnchorPrediction:
        return AnchorPrediction(float(self.probability[i]), tuple(float(v) for v in self.offsets[i]))


def forward(params: ModelParameters, features: np.ndarray) -> ForwardPass:
    """Batched forward pass; a 1-D feature vector is treated as a batch of one."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[1] != params.feature_dim:
        raise ValueError(f"feature length {x.shape[1]} != model feature_dim {params.feature_dim}")
    pre = x @ params.hidden_weights.T + params.hidden_bias
    hidden = np.maximum(pre, 0.0)
    logit = hidden @ params.cls_weights + params.cls_bias
    offsets = hidden @ params.reg_weights.T + params.reg_bias
    return ForwardPass(x, pre, hidden, logit, expit(logit), offsets)


def backward(params: ModelParameters, cache: ForwardPass,
             d_probability: np.ndarray, d_offsets: np.ndarray) -> ModelParameters:
    """Parameter gradients given upstream gradients on probability and offsets."""
    n = cache.features.shape[0]
    d_probability = np.asarray(d_probability, dtype=np.float64).reshape(-1)
    d_offsets = np.asarray(d_offsets, dtype=np.float64).reshape(-1, 4)
    if d_probability.shape[0] != n or d_offsets.shape[0] != n:
        raise ValueError(f"upstream gradients do not match batch size {n}")
    p = cache.probability
    d_logit = d_probability * p * (1.0 - p)
    d_hidden = np.outer(d_logit, params.cls_weights) + d_offsets @ params.reg_weights
    # relu subgradient at exactly 0 is 0
    d_pre = d_hidden * (cache.pre_activation > 0.0)
    return ModelParameters(
        hidden_weights=d_pre.T @ cache.features,
        hidden_bias=d_pre.sum(axis=0),
        cls_weights=cache.hidden.T @ d_logit,
        cls_bias=np.array(d_logit.sum()),
        reg_weights=d_offsets.T @ cache.hidden,
        reg_bias=d_offsets.sum(axis=0),
    )


def encode_boxes(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Center-offset / log-size encoding of xywh boxes relative to anchors."""
    s = anchors[:, 2]
    cx = boxes[:, 0] + boxes[:, 2] / 2
    cy = boxes[:, 1] + boxes[:, 3] / 2
    return np.stack([(cx - anchors[:, 0]) / s, (cy - anchors[:, 1]) / s,
                     np.log(boxes[:, 2] / s), np.log(boxes[:, 3] / s)], axis=1)


def decode_boxes(anchors: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    s = anchors[:, 2]
    cx = anchors[:, 0] + offsets[:, 0] * s
    cy = anchors[:, 1] + offsets[:, 1] * s
    w = s * np.exp(np.clip(offsets[:, 2], -OFFSET_CLAMP, OFFSET_CLAMP))
    h = s * np.exp(np.clip(offsets[:, 3], -OFFSET_CLAMP, OFFSET_CLAMP))
    return np.stack([cx - w / 2, cy - h / 2, w, h], axis=1)


def encode_box(anchor: Anchor, box: BoundingBox) -> tuple[float, float, float, float]:
    enc = encode_boxes(anchors_to_array([anchor]), np.array([box.as_tuple()]))[0]
    return tuple(float(v) for v in enc)


def decode_box(anchor: Anchor, offsets: Sequence[float]) -> BoundingBox:
    off = np.asarray(offsets, dtype=np.float64).reshape(1, 4)
    if not np.all(np.isfinite(off)):
        raise ValueError("offsets must be finite")
    return BoundingBox(*(float(v) for v in decode_boxes(anchors_to_array([anchor]), off)[0]))
