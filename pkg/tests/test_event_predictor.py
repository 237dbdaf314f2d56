import math

import numpy as np
import pytest

from evslam.core import LUMA_WEIGHTS, RgbImage
from evslam.event_predictor import PredictorParams, predict_arrays, predict_events, predict_events_gradient
from evslam.event_sim import EventSimParams, init_ref_state, simulate_frame_pair
from oracles import finite_difference, relative_error


def gray(y, shape=(1, 1)):
    """RGB image whose luma is ``y`` everywhere."""
    return np.full(shape + (3,), float(y))


def random_rgb(rng, shape=(6, 7)):
    return rng.uniform(5.0, 250.0, size=shape + (3,))


def test_identical_images_predict_nothing():
    img = random_rgb(np.random.default_rng(0))
    ev = predict_events(img, img, PredictorParams())
    assert not ev.pos.any() and not ev.neg.any()


def test_single_pixel_example():
    ev = predict_events(gray(100), gray(150), PredictorParams(c_pos=0.1))
    assert ev.pos[0, 0] == pytest.approx(4.05465, abs=1e-5)
    assert ev.pos[0, 0] == pytest.approx(math.log(1.5) / 0.1, rel=1e-12)
    assert ev.neg[0, 0] == 0


def test_swapping_inputs_swaps_channels():
    rng = np.random.default_rng(1)
    a, b = random_rgb(rng), random_rgb(rng)
    p = PredictorParams(0.2, 0.2)
    ab = predict_events(a, b, p)
    ba = predict_events(b, a, p)
    assert np.array_equal(ab.pos, ba.neg) and np.array_equal(ab.neg, ba.pos)


def test_doubling_thresholds_halves_counts():
    rng = np.random.default_rng(2)
    a, b = random_rgb(rng), random_rgb(rng)
    p1 = predict_arrays(a, b, PredictorParams(0.1, 0.15))
    p2 = predict_arrays(a, b, PredictorParams(0.2, 0.3))
    assert np.array_equal(p2[0] * 2, p1[0]) and np.array_equal(p2[1] * 2, p1[1])


def test_dimension_mismatch_raises():
    with pytest.raises(ValueError):
        predict_events(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)), PredictorParams())
    with pytest.raises(ValueError):
        PredictorParams(c_pos=0.0)


def test_zero_adjoint_zero_gradient():
    rng = np.random.default_rng(3)
    a, b = random_rgb(rng), random_rgb(rng)
    g = predict_events_gradient(a, b, PredictorParams(), np.zeros((6, 7)), np.zeros((6, 7)))
    assert np.array_equal(g, np.zeros((6, 7, 3)))


def test_symbolic_derivative_wrt_luminance():
    p = PredictorParams(c_pos=0.1)
    g = predict_events_gradient(gray(100), gray(150), p, np.ones((1, 1)), np.zeros((1, 1)))
    # gradient on RGB is the luminance derivative spread by the luma weights
    assert np.allclose(g[0, 0], LUMA_WEIGHTS / (0.1 * 150.0), rtol=1e-12)


def test_gradient_below_epsilon_is_zero():
    g = predict_events_gradient(gray(100), gray(0.0), PredictorParams(), np.zeros((1, 1)), np.ones((1, 1)))
    assert np.array_equal(g, np.zeros((1, 1, 3)))


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    p = PredictorParams(0.1, 0.12)
    for _ in range(5):
        a = rng.uniform(5.0, 120.0, size=(6, 7, 3))
        # per-pixel factor away from 1 keeps every pixel clear of the relu kink
        b = a * np.where(rng.random((6, 7, 1)) < 0.5, rng.uniform(0.5, 0.95, (6, 7, 1)), rng.uniform(1.05, 2.0, (6, 7, 1)))
        wp, wn = rng.normal(size=(2, 6, 7))

        def f(x):
            pos, neg = predict_arrays(a, x, p)
            return np.sum(wp * pos) + np.sum(wn * neg)

        g = predict_events_gradient(a, b, p, wp, wn)
        fd = finite_difference(f, b, 1e-3)
        assert relative_error(g, fd, 1e-8).max() <= 1e-4


def test_floor_of_soft_count_matches_simulator():
    rng = np.random.default_rng(5)
    sim = EventSimParams(t_ref=0.0)
    p = PredictorParams.from_sim(sim)
    for _ in range(5):
        a = np.round(random_rgb(rng, (20, 30)))
        b = np.round(random_rgb(rng, (20, 30)))
        ev, _ = simulate_frame_pair(RgbImage(a), RgbImage(b), 0.0, sim.frame_dt, init_ref_state(RgbImage(a), sim), sim)
        pos, neg = predict_arrays(a, b, p)
        assert np.abs(np.floor(pos) - ev.pos).max() <= 1
        assert np.abs(np.floor(neg) - ev.neg).max() <= 1
        # exact away from integer boundaries
        safe = (np.abs(pos - np.round(pos)) > 1e-9) & (np.abs(neg - np.round(neg)) > 1e-9)
        assert np.array_equal(np.floor(pos)[safe], ev.pos[safe])
        assert np.array_equal(np.floor(neg)[safe], ev.neg[safe])
