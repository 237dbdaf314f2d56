import math

import numpy as np
import pytest

from evslam.core import EventImage, GrayImage, RgbImage
from evslam.event_sim import (EventSimParams, PixelRefState, accumulate_events, init_ref_state, log_irradiance,
                              simulate_frame_pair, simulate_pixel, simulate_sequence)
from oracles import SUBSTEPS, brute_force_pixel, random_levels

NO_REF = EventSimParams(t_ref=0.0)


def test_log_irradiance_examples():
    vals = log_irradiance(GrayImage(np.array([[255.0, 127.5, 0.0]])), 1e-3).data[0]
    assert vals[0] == pytest.approx(-3.9216e-6, rel=1e-4)
    assert vals[1] == pytest.approx(-0.693151, abs=1e-6)
    assert vals[2] == pytest.approx(math.log(0.001 / 255.001), abs=1e-12)
    assert vals[2] == pytest.approx(-12.4490, abs=1e-4)


def test_three_crossings():
    assert simulate_pixel(-1.0, -0.65, 0.0, 1 / 30, -1.0, -math.inf, NO_REF)[:2] == (3, 0)


def test_flat_signal_emits_nothing():
    out = simulate_pixel(-2.0, -2.0, 0.0, 1 / 30, -2.05, 0.01, EventSimParams())
    assert out == (0, 0, -2.05, 0.01)


def test_refractory_limited_burst():
    pos, neg, _, _ = simulate_pixel(-3.0, 97.0, 0.0, 1 / 30, -3.0, -math.inf, EventSimParams(t_ref=1e-4))
    assert neg == 0
    assert abs(pos - math.floor((1 / 30) / 1e-4)) <= 1


def test_refractory_cap():
    rng = np.random.default_rng(0)
    p = EventSimParams(t_ref=2e-3)
    for _ in range(500):
        l0, l1 = rng.uniform(-8, 0, size=2)
        pos, neg, _, _ = simulate_pixel(l0, l1, 0.0, p.frame_dt, l0, -math.inf, p)
        assert pos + neg <= math.floor(p.frame_dt / p.t_ref) + 1


def test_floor_law_and_threshold_monotonicity():
    rng = np.random.default_rng(1)
    for _ in range(2000):
        dl = rng.uniform(-3, 3)
        c = rng.uniform(0.01, 0.5)
        p = EventSimParams(c_pos=c, c_neg=c, t_ref=0.0)
        pos, neg, _, _ = simulate_pixel(-4.0, -4.0 + dl, 0.0, p.frame_dt, -4.0, -math.inf, p)
        assert (pos, neg) == ((math.floor(dl / c), 0) if dl > 0 else (0, math.floor(-dl / c)))
        bigger = EventSimParams(c_pos=c * 1.5, c_neg=c * 1.5, t_ref=0.0)
        pos2, neg2, _, _ = simulate_pixel(-4.0, -4.0 + dl, 0.0, p.frame_dt, -4.0, -math.inf, bigger)
        assert pos2 <= pos and neg2 <= neg


def test_matches_brute_force_oracle():
    rng = np.random.default_rng(2)
    for i in range(60):
        t_ref = (0.0, 1e-4, 2e-3)[i % 3]
        p = EventSimParams(c_pos=rng.uniform(0.05, 0.3), c_neg=rng.uniform(0.05, 0.3), t_ref=t_ref)
        levels = random_levels(rng, 4)
        expected = brute_force_pixel(levels, p.frame_dt, levels[0], p.c_pos, p.c_neg, p.t_ref, SUBSTEPS)
        ref, last = levels[0], -math.inf
        for s in range(3):
            pos, neg, ref, last = simulate_pixel(levels[s], levels[s + 1], s * p.frame_dt, (s + 1) * p.frame_dt,
                                                 ref, last, p)
            assert (pos, neg) == tuple(expected[s])


def test_simulate_pixel_rejects_bad_input():
    with pytest.raises(ValueError):
        simulate_pixel(float("nan"), 0.0, 0.0, 1.0, 0.0, -math.inf, NO_REF)
    with pytest.raises(ValueError):
        simulate_pixel(0.0, 1.0, 1.0, 1.0, 0.0, -math.inf, NO_REF)


def gray_rgb(values):
    v = np.asarray(values, dtype=np.float64)
    return RgbImage(np.repeat(v[..., None], 3, axis=-1))


def test_frame_pair_brightening_pixel():
    prev = gray_rgb([[100.0, 50.0]])
    nxt = gray_rgb([[150.0, 50.0]])
    state = init_ref_state(prev, NO_REF)
    assert state.ref[0, 0] == pytest.approx(math.log(100 / 255.001))
    ev, _ = simulate_frame_pair(prev, nxt, 0.0, 1 / 30, state, NO_REF)
    assert ev.is_integer
    assert ev.pos.tolist() == [[4, 0]] and ev.neg.tolist() == [[0, 0]]


def test_frame_pair_identity_and_determinism():
    rng = np.random.default_rng(3)
    a = RgbImage(rng.uniform(0, 255, size=(8, 9, 3)))
    b = RgbImage(rng.uniform(0, 255, size=(8, 9, 3)))
    state = init_ref_state(a, EventSimParams())
    ev, _ = simulate_frame_pair(a, a, 0.0, 1 / 30, state, EventSimParams())
    assert ev.pos.sum() == 0 and ev.neg.sum() == 0
    e1, s1 = simulate_frame_pair(a, b, 0.0, 1 / 30, state, EventSimParams())
    e2, s2 = simulate_frame_pair(a, b, 0.0, 1 / 30, state, EventSimParams())
    assert np.array_equal(e1.pos, e2.pos) and np.array_equal(e1.neg, e2.neg)
    assert np.array_equal(s1.ref, s2.ref)
    with pytest.raises(ValueError):
        simulate_frame_pair(a, RgbImage(np.zeros((3, 3, 3))), 0.0, 1 / 30, state, EventSimParams())


def test_init_ref_state():
    black = init_ref_state(RgbImage(np.zeros((2, 2, 3))), EventSimParams())
    assert np.allclose(black.ref, -12.4490, atol=1e-4)
    assert np.all(black.last_time == -np.inf)
    other = init_ref_state(gray_rgb([[0.0, 10.0], [0.0, 0.0]]), EventSimParams())
    assert (other.ref != black.ref).tolist() == [[False, True], [False, False]]


def test_sequence_matches_pixelwise_simulation():
    rng = np.random.default_rng(4)
    frames = [RgbImage(rng.uniform(0, 255, size=(3, 4, 3)).round()) for _ in range(4)]
    p = EventSimParams()
    events = simulate_sequence(frames, p)
    assert len(events) == 4 and events[0].pos.sum() == 0
    state = init_ref_state(frames[0], p)
    for k in range(1, 4):
        ev, state = simulate_frame_pair(frames[k - 1], frames[k], (k - 1) * p.frame_dt, k * p.frame_dt, state, p)
        assert np.array_equal(ev.pos, events[k].pos) and np.array_equal(ev.neg, events[k].neg)


def test_reset_each_pair_flag():
    frames = [gray_rgb([[100.0]]), gray_rgb([[104.0]]), gray_rgb([[108.0]])]
    persistent = simulate_sequence(frames, EventSimParams(t_ref=0.0))
    reset = simulate_sequence(frames, EventSimParams(t_ref=0.0, reset_each_pair=True))
    # ln(1.08) crosses 0.1 once in total; each single step (~0.039) never does on its own
    assert sum(int(e.pos.sum()) for e in persistent) == 0
    assert sum(int(e.pos.sum()) for e in reset) == 0
    frames.append(gray_rgb([[113.0]]))
    assert sum(int(e.pos.sum()) for e in simulate_sequence(frames, EventSimParams(t_ref=0.0))) == 1
    assert sum(int(e.pos.sum()) for e in simulate_sequence(frames, EventSimParams(t_ref=0.0, reset_each_pair=True))) == 0


def test_accumulate_events():
    z = EventImage.zeros(2, 2)
    a = EventImage(np.array([[2, 0], [0, 1]], np.uint32), np.zeros((2, 2), np.uint32))
    b = EventImage(np.array([[3, 0], [0, 0]], np.uint32), np.ones((2, 2), np.uint32))
    assert accumulate_events([z, z]).pos.sum() == 0
    assert np.array_equal(accumulate_events([a]).pos, a.pos)
    s = accumulate_events([a, b])
    assert s.pos[0, 0] == 5 and s.is_integer
    assert np.array_equal(accumulate_events([b, a]).pos, s.pos)
    assert np.array_equal(accumulate_events([accumulate_events([a, b]), z]).neg, accumulate_events([a, accumulate_events([b, z])]).neg)
    with pytest.raises(ValueError):
        accumulate_events([])
    with pytest.raises(ValueError):
        accumulate_events([a, EventImage.zeros(3, 3)])


def test_params_validation():
    with pytest.raises(ValueError):
        EventSimParams(c_pos=0)
    with pytest.raises(ValueError):
        EventSimParams(t_ref=1.0, frame_dt=0.5)
    with pytest.raises(ValueError):
        PixelRefState(np.array([np.inf]))
