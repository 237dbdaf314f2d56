"""Ground-truth event synthesis between consecutive RGB frames.

Each pixel carries a reference log-irradiance (the level at its last
emitted event) and the time of that event. Between two frames the
log-irradiance is interpolated linearly in time; an event fires whenever the
interpolant departs from the reference by at least the contrast threshold
and the pixel is outside its refractory window. Crossings inside the window
are dropped without moving the reference, so a pixel that is still past
threshold when the window closes fires immediately.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .core import EventImage, GrayImage, RgbImage, luminance

FULL_SCALE = 255.0


@dataclass(frozen=True)
class EventSimParams:
    c_pos: float = 0.1
    c_neg: float = 0.1
    t_ref: float = 1e-4
    epsilon: float = 1e-3
    frame_dt: float = 1.0 / 30.0
    # reset per-pixel references at every frame pair instead of carrying them
    reset_each_pair: bool = False

    def __post_init__(self):
        if not (self.c_pos > 0 and self.c_neg > 0):
            raise ValueError("contrast thresholds must be positive")
        if self.t_ref < 0:
            raise ValueError("refractory period must be >= 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not self.frame_dt > self.t_ref:
            raise ValueError("frame_dt must exceed the refractory period")


@dataclass
class PixelRefState:
    """Per-pixel simulator memory. ``last_time`` is -inf before any event."""

    ref: np.ndarray
    last_time: np.ndarray = field(default=None)

    def __post_init__(self):
        self.ref = np.array(self.ref, dtype=np.float64)
        if self.last_time is None:
            self.last_time = np.full(self.ref.shape, -np.inf)
        else:
            self.last_time = np.array(self.last_time, dtype=np.float64)
        if self.ref.shape != self.last_time.shape:
            raise ValueError("reference and timing planes differ in shape")
        if not np.all(np.isfinite(self.ref)):
            raise ValueError("reference levels must be finite")

    @property
    def shape(self):
        return self.ref.shape

    def copy(self) -> "PixelRefState":
        return PixelRefState(self.ref.copy(), self.last_time.copy())


def log_irradiance_array(values: np.ndarray, epsilon: float) -> np.ndarray:
    return np.log(np.maximum(values, epsilon) / (FULL_SCALE + epsilon))


def log_irradiance(img: GrayImage, epsilon: float = 1e-3) -> GrayImage:
    """``ln(max(E, eps) / (255 + eps))``; the clamp keeps black pixels finite."""
    return GrayImage(log_irradiance_array(img.data, epsilon))


@njit(cache=True)
def _simulate_one(l0, l1, t0, t1, ref, t_last, c_pos, c_neg, t_ref):
    pos = 0
    neg = 0
    span = t1 - t0
    dl = l1 - l0
    t = t0
    while True:
        ta = t_last + t_ref
        if ta < t:
            ta = t
        if ta > t1:
            break
        frac = (ta - t0) / span
        la = l1 if frac >= 1.0 else l0 + dl * frac
        t_pos = math.inf
        t_neg = math.inf
        if la - ref >= c_pos:
            t_pos = ta
        elif dl > 0.0:
            t_pos = t0 + (ref + c_pos - l0) / dl * span
            if t_pos < ta:
                t_pos = ta
        if ref - la >= c_neg:
            t_neg = ta
        elif dl < 0.0:
            t_neg = t0 + (ref - c_neg - l0) / dl * span
            if t_neg < ta:
                t_neg = ta
        if t_pos <= t_neg:
            if t_pos > t1:
                break
            pos += 1
            ref += c_pos
            t = t_pos
        else:
            if t_neg > t1:
                break
            neg += 1
            ref -= c_neg
            t = t_neg
        t_last = t
    return pos, neg, ref, t_last


@njit(cache=True)
def _simulate_plane(l0, l1, t0, t1, ref, t_last, c_pos, c_neg, t_ref, pos, neg):
    n = l0.shape[0]
    for i in range(n):
        p, q, r, tl = _simulate_one(l0[i], l1[i], t0, t1, ref[i], t_last[i], c_pos, c_neg, t_ref)
        pos[i] = p
        neg[i] = q
        ref[i] = r
        t_last[i] = tl


def simulate_pixel(l0: float, l1: float, t0: float, t1: float, ref: float, last_time: float,
                   params: EventSimParams):
    """Simulate one pixel over ``(t0, t1]``.

    Returns ``(pos_count, neg_count, new_ref, new_last_time)``.
    """
    vals = (l0, l1, t0, t1, ref)
    if not all(math.isfinite(v) for v in vals) or math.isnan(last_time) or last_time == math.inf:
        raise ValueError("simulate_pixel inputs must be finite")
    if not t1 > t0:
        raise ValueError("t1 must be greater than t0")
    p, q, r, tl = _simulate_one(float(l0), float(l1), float(t0), float(t1), float(ref),
                                float(last_time), params.c_pos, params.c_neg, params.t_ref)
    return int(p), int(q), float(r), float(tl)


def init_ref_state(first_frame: RgbImage, params: EventSimParams) -> PixelRefState:
    return PixelRefState(log_irradiance_array(luminance(first_frame).data, params.epsilon))


def simulate_log_frames(l_prev: np.ndarray, l_next: np.ndarray, t0: float, t1: float,
                        state: PixelRefState, params: EventSimParams):
    """Core of :func:`simulate_frame_pair` on precomputed log-irradiance planes."""
    if l_prev.shape != l_next.shape or l_prev.shape != state.shape:
        raise ValueError(f"shape mismatch: {l_prev.shape}, {l_next.shape}, state {state.shape}")
    if not t1 > t0:
        raise ValueError("t1 must be greater than t0")
    if params.reset_each_pair:
        new_state = PixelRefState(l_prev)
    else:
        new_state = state.copy()
    shape = l_prev.shape
    ref = new_state.ref.reshape(-1)
    t_last = new_state.last_time.reshape(-1)
    pos = np.zeros(ref.size, np.uint32)
    neg = np.zeros(ref.size, np.uint32)
    _simulate_plane(np.ascontiguousarray(l_prev, dtype=np.float64).reshape(-1),
                    np.ascontiguousarray(l_next, dtype=np.float64).reshape(-1),
                    float(t0), float(t1), ref, t_last,
                    params.c_pos, params.c_neg, params.t_ref, pos, neg)
    return EventImage(pos.reshape(shape), neg.reshape(shape)), new_state


def simulate_frame_pair(prev: RgbImage, next: RgbImage, t0: float, t1: float,
                        state: PixelRefState, params: EventSimParams):
    """Integer event image over ``(t0, t1]`` and the advanced simulator state.

    The input state is left untouched.
    """
    if (prev.height, prev.width) != (next.height, next.width):
        raise ValueError("frame dimensions differ")
    l_prev = log_irradiance_array(luminance(prev).data, params.epsilon)
    l_next = log_irradiance_array(luminance(next).data, params.epsilon)
    return simulate_log_frames(l_prev, l_next, t0, t1, state, params)


def accumulate_events(images) -> EventImage:
    images = list(images)
    if not images:
        raise ValueError("accumulate_events needs at least one image")
    shape = images[0].pos.shape
    pos = np.zeros(shape, np.result_type(*[im.pos.dtype for im in images]))
    neg = np.zeros(shape, np.result_type(*[im.neg.dtype for im in images]))
    for im in images:
        if im.pos.shape != shape:
            raise ValueError(f"event image shape {im.pos.shape} != {shape}")
        pos = pos + im.pos
        neg = neg + im.neg
    return EventImage(pos, neg)


def simulate_sequence(frames, params: EventSimParams, t_start: float = 0.0):
    """Event images for every adjacent pair of ``frames``.

    Element ``k`` covers ``(t_{k-1}, t_k]``; element 0 is empty.
    """
    frames = list(frames)
    if not frames:
        return []
    state = init_ref_state(frames[0], params)
    out = [EventImage.zeros(frames[0].height, frames[0].width)]
    l_prev = state.ref.copy()
    for k in range(1, len(frames)):
        l_next = log_irradiance_array(luminance(frames[k]).data, params.epsilon)
        t0 = t_start + (k - 1) * params.frame_dt
        t1 = t_start + k * params.frame_dt
        ev, state = simulate_log_frames(l_prev, l_next, t0, t1, state, params)
        out.append(ev)
        l_prev = l_next
    return out


__all__ = [
    "EventSimParams",
    "PixelRefState",
    "log_irradiance",
    "log_irradiance_array",
    "simulate_pixel",
    "simulate_frame_pair",
    "simulate_log_frames",
    "simulate_sequence",
    "init_ref_state",
    "accumulate_events",
]
