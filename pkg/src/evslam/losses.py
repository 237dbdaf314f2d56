"""Tracking losses: Gaussian-smoothed event L2 plus L1 photometric and depth terms.

Every loss returns ``(value, gradient)`` with the gradient taken w.r.t. the
rendered / predicted argument.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .core import DepthImage, EventImage, RgbImage
from .event_predictor import predict_arrays, predict_events_gradient
from .renderer import contract_pose_gradient


class EmptyOverlapWarning(UserWarning):
    """Depth loss had no pixel valid in both images."""


@dataclass(frozen=True)
class LossWeights:
    lambda_event: float = 0.025
    lambda_photo: float = 1.0
    lambda_depth: float = 1.0

    def __post_init__(self):
        if min(self.lambda_event, self.lambda_photo, self.lambda_depth) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class GaussianKernel:
    size: int = 9
    sigma: float = 1.7
    weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.size < 1 or self.size % 2 == 0:
            raise ValueError("kernel size must be a positive odd integer")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        w = np.outer(self.taps, self.taps)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def radius(self) -> int:
        return self.size // 2

    @property
    def taps(self) -> np.ndarray:
        """Normalized 1-D taps; the 2-D weights are their outer product."""
        x = np.arange(self.size) - self.radius
        g = np.exp(-x * x / (2.0 * self.sigma ** 2))
        return g / g.sum()


@lru_cache(maxsize=64)
def _replicate_matrix(n: int, size: int, sigma: float) -> np.ndarray:
    """Dense (n, n) matrix of 1-D correlation with edge-clamped indices."""
    taps = GaussianKernel(size, sigma).taps
    r = size // 2
    m = np.zeros((n, n))
    rows = np.arange(n)
    for k in range(size):
        np.add.at(m, (rows, np.clip(rows + k - r, 0, n - 1)), taps[k])
    m.setflags(write=False)
    return m


def _filter(data: np.ndarray, kernel: GaussianKernel, transpose: bool = False) -> np.ndarray:
    h, w = data.shape
    my = _replicate_matrix(h, kernel.size, kernel.sigma)
    mx = _replicate_matrix(w, kernel.size, kernel.sigma)
    if transpose:
        return my.T @ data @ mx
    return my @ data @ mx.T


def gaussian_filter(img, kernel: GaussianKernel = GaussianKernel()):
    """2-D Gaussian filter with replicate padding.

    Accepts a 2-D array or any object with a 2-D ``data`` plane (returned as
    the same type).
    """
    if hasattr(img, "data") and not isinstance(img, np.ndarray):
        return type(img)(_filter(np.asarray(img.data, dtype=np.float64), kernel))
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("gaussian_filter expects a 2-D plane")
    return _filter(arr, kernel)


def gaussian_filter_adjoint(arr: np.ndarray, kernel: GaussianKernel = GaussianKernel()) -> np.ndarray:
    """Transpose of :func:`gaussian_filter`; replicate padding folds border mass back in."""
    return _filter(np.asarray(arr, dtype=np.float64), kernel, transpose=True)


def _planes(ev):
    if isinstance(ev, EventImage):
        return np.asarray(ev.pos, np.float64), np.asarray(ev.neg, np.float64)
    pos, neg = ev
    return np.asarray(pos, np.float64), np.asarray(neg, np.float64)


def event_loss(gt_accum, predicted, kernel: GaussianKernel = GaussianKernel(), lambda_event: float = 0.025,
               mask=None):
    """``lambda * sum (G*gt - G*pred)^2`` over both polarities.

    ``mask`` (H, W), if given, multiplies the difference before filtering so
    masked-out pixels contribute nothing. Returns ``(value, grad)`` with
    ``grad`` of shape (2, H, W) for (pos, neg).
    """
    gp, gn = _planes(gt_accum)
    pp, pn = _planes(predicted)
    if gp.shape != pp.shape:
        raise ValueError(f"event image dimensions differ: {gp.shape} vs {pp.shape}")
    m = 1.0 if mask is None else np.asarray(mask, np.float64)
    value = 0.0
    grad = np.empty((2,) + gp.shape)
    for c, (g, p) in enumerate(((gp, pp), (gn, pn))):
        r = _filter(m * (g - p), kernel)
        value += float(np.sum(r * r))
        grad[c] = -2.0 * lambda_event * m * _filter(r, kernel, transpose=True)
    return lambda_event * value, grad


def _rgb_array(img) -> np.ndarray:
    return img.as_float() if isinstance(img, RgbImage) else np.asarray(img, np.float64)


def photometric_loss(rendered, gt):
    """Mean absolute per-channel error and its subgradient (0 where equal)."""
    a = _rgb_array(rendered)
    b = _rgb_array(gt)
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean(np.abs(d))), np.sign(d) / d.size


def depth_loss(rendered, gt):
    """Mean absolute error over pixels valid (> 0) in both depth maps.

    An empty overlap gives ``(0.0, zeros)`` and emits :class:`EmptyOverlapWarning`.
    """
    a = np.asarray(rendered.data if isinstance(rendered, DepthImage) else rendered, np.float64)
    b = np.asarray(gt.data if isinstance(gt, DepthImage) else gt, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"depth dimensions differ: {a.shape} vs {b.shape}")
    mask = (a > 0) & (b > 0)
    n = int(mask.sum())
    if n == 0:
        warnings.warn("depth loss has no valid overlap", EmptyOverlapWarning, stacklevel=2)
        return 0.0, np.zeros_like(a)
    d = np.where(mask, a - b, 0.0)
    return float(np.abs(d).sum() / n), np.sign(d) / n


@dataclass
class LossTerms:
    total: float
    event: float = 0.0
    photo: float = 0.0
    depth: float = 0.0


def total_tracking_loss(rendered_rgb, rendered_depth, jac, weights: LossWeights,
                        kernel: GaussianKernel, predictor_params=None,
                        prev_gt_rgb=None, gt_events=None, gt_rgb=None, gt_depth=None, event_mask=None):
    """Combined loss at one pose and its gradient w.r.t. the 6-dim pose tangent.

    ``jac`` is the (H*W, 4, 6) render Jacobian. The event term is active when
    ``gt_events`` is given (it needs ``prev_gt_rgb`` and ``predictor_params``),
    the RGB-D terms when ``gt_rgb`` / ``gt_depth`` are given. ``event_mask``
    restricts the event term to pixels the map actually covers.
    Returns ``(LossTerms, grad (6,))``.
    """
    rgb = _rgb_array(rendered_rgb)
    depth = np.asarray(rendered_depth.data if isinstance(rendered_depth, DepthImage) else rendered_depth, np.float64)
    adj_rgb = np.zeros_like(rgb)
    adj_depth = np.zeros_like(depth)
    terms = LossTerms(0.0)
    if gt_events is not None:
        pos, neg = predict_arrays(prev_gt_rgb, rgb, predictor_params)
        terms.event, g = event_loss(gt_events, (pos, neg), kernel, weights.lambda_event, event_mask)
        adj_rgb += predict_events_gradient(prev_gt_rgb, rgb, predictor_params, g[0], g[1])
    if gt_rgb is not None:
        terms.photo, g = photometric_loss(rgb, gt_rgb)
        adj_rgb += weights.lambda_photo * g
    if gt_depth is not None:
        terms.depth, g = depth_loss(depth, gt_depth)
        adj_depth += weights.lambda_depth * g
    terms.total = terms.event + weights.lambda_photo * terms.photo + weights.lambda_depth * terms.depth
    grad = np.zeros(6) if jac is None else contract_pose_gradient(jac, adj_rgb, adj_depth)
    return terms, grad


__all__ = [
    "LossWeights",
    "GaussianKernel",
    "LossTerms",
    "EmptyOverlapWarning",
    "gaussian_filter",
    "gaussian_filter_adjoint",
    "event_loss",
    "photometric_loss",
    "depth_loss",
    "total_tracking_loss",
]
