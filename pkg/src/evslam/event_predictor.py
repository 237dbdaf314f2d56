"""Closed-form soft event prediction between a GT frame and a rendered frame.

The predicted image counts how many contrast thresholds the log-irradiance
moved by, without rounding:

    dL  = logirr(Y(rendered)) - logirr(Y(prev_gt))
    pos = max(dL, 0) / c_pos
    neg = max(-dL, 0) / c_neg

The predictor has no parameters, is differentiable almost everywhere, and
takes the subgradient 0 at dL = 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LUMA_WEIGHTS, EventImage, RgbImage
from .event_sim import EventSimParams, log_irradiance_array


@dataclass(frozen=True)
class PredictorParams:
    c_pos: float = 0.1
    c_neg: float = 0.1
    epsilon: float = 1e-3

    def __post_init__(self):
        if not (self.c_pos > 0 and self.c_neg > 0):
            raise ValueError("contrast thresholds must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    @classmethod
    def from_sim(cls, sim: EventSimParams) -> "PredictorParams":
        return cls(sim.c_pos, sim.c_neg, sim.epsilon)


def _as_array(img) -> np.ndarray:
    if isinstance(img, RgbImage):
        return img.as_float()
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {arr.shape}")
    return arr


def _luma(rgb: np.ndarray) -> np.ndarray:
    return rgb @ LUMA_WEIGHTS


def _delta_log(prev_gt, rendered, params: PredictorParams):
    a = _as_array(prev_gt)
    b = _as_array(rendered)
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape[:2]} vs {b.shape[:2]}")
    y_prev = _luma(a)
    y_rend = _luma(b)
    dl = log_irradiance_array(y_rend, params.epsilon) - log_irradiance_array(y_prev, params.epsilon)
    return dl, y_rend


def predict_arrays(prev_gt, rendered, params: PredictorParams):
    """``(pos, neg)`` planes as float arrays. Accepts images or raw arrays."""
    dl, _ = _delta_log(prev_gt, rendered, params)
    return np.maximum(dl, 0.0) / params.c_pos, np.maximum(-dl, 0.0) / params.c_neg


def predict_events(prev_gt, rendered, params: PredictorParams) -> EventImage:
    pos, neg = predict_arrays(prev_gt, rendered, params)
    return EventImage(pos, neg)


def predict_events_gradient(prev_gt, rendered, params: PredictorParams, adj_pos, adj_neg) -> np.ndarray:
    """Pull per-pixel gradients on (pos, neg) back to the rendered RGB, shape (H, W, 3).

    Where the rendered luminance sits below epsilon the log clamp is flat and
    the gradient is zero.
    """
    dl, y = _delta_log(prev_gt, rendered, params)
    adj_pos = np.asarray(adj_pos, dtype=np.float64)
    adj_neg = np.asarray(adj_neg, dtype=np.float64)
    if adj_pos.shape != dl.shape or adj_neg.shape != dl.shape:
        raise ValueError("adjoint shape does not match the images")
    g_dl = np.where(dl > 0, adj_pos / params.c_pos, 0.0) - np.where(dl < 0, adj_neg / params.c_neg, 0.0)
    g_y = np.where(y > params.epsilon, g_dl / np.maximum(y, params.epsilon), 0.0)
    return g_y[..., None] * LUMA_WEIGHTS


__all__ = ["PredictorParams", "predict_events", "predict_arrays", "predict_events_gradient"]
