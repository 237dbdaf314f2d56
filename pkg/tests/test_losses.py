import warnings

import numpy as np
import pytest
from scipy import ndimage

from evslam.core import DepthImage, EventImage, GrayImage, RgbImage
from evslam.event_predictor import PredictorParams, predict_arrays
from evslam.losses import (EmptyOverlapWarning, GaussianKernel, LossWeights, depth_loss, event_loss,
                           gaussian_filter, gaussian_filter_adjoint, photometric_loss, total_tracking_loss)
from oracles import finite_difference, relative_error

K = GaussianKernel()
CENTER_WEIGHT = 0.055877163090389224


def test_kernel_normalized_and_symmetric():
    w = K.weights
    assert w.shape == (9, 9)
    assert abs(w.sum() - 1) <= 1e-12
    assert np.array_equal(w, w.T) and np.array_equal(w, w[::-1]) and np.array_equal(w, np.rot90(w))


def test_kernel_center_weight_pinned():
    x = np.arange(-4, 5)
    k = np.exp(-(x[:, None] ** 2 + x[None, :] ** 2) / (2 * 1.7 ** 2))
    assert K.weights[4, 4] == pytest.approx(k[4, 4] / k.sum(), abs=1e-15)
    assert K.weights[4, 4] == pytest.approx(CENTER_WEIGHT, abs=1e-15)


def test_constant_image_unchanged():
    img = np.full((12, 15), 3.25)
    assert np.allclose(gaussian_filter(img, K), img, atol=1e-13)
    out = gaussian_filter(GrayImage(img), K)
    assert isinstance(out, GrayImage)


def test_impulse_gives_kernel():
    img = np.zeros((21, 21))
    img[10, 10] = 1.0
    assert np.allclose(gaussian_filter(img, K)[6:15, 6:15], K.weights, atol=1e-16)


def test_matches_scipy_with_nearest_padding():
    rng = np.random.default_rng(0)
    img = rng.normal(size=(17, 23))
    ref = ndimage.correlate(img, K.weights, mode="nearest")
    assert np.allclose(gaussian_filter(img, K), ref, atol=1e-13)


def test_adjoint_is_transpose():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 11, 14))
    assert np.dot(gaussian_filter(a, K).ravel(), b.ravel()) == pytest.approx(
        np.dot(a.ravel(), gaussian_filter_adjoint(b, K).ravel()), rel=1e-12)


def test_filter_commutes_with_constant_shift():
    img = np.random.default_rng(2).normal(size=(10, 10))
    assert np.allclose(gaussian_filter(img + 7.0, K), gaussian_filter(img, K) + 7.0, atol=1e-13)


def random_events(rng, shape=(16, 20)):
    return rng.uniform(0, 5, size=shape), rng.uniform(0, 5, size=shape)


def test_event_loss_zero_for_perfect_prediction():
    ev = EventImage(np.arange(12, dtype=np.uint32).reshape(3, 4), np.ones((3, 4), np.uint32))
    value, grad = event_loss(ev, (ev.pos.astype(float), ev.neg.astype(float)), K, 0.025)
    assert value == 0 and not grad.any()


def test_event_loss_scales_with_lambda():
    rng = np.random.default_rng(3)
    gt, pred = random_events(rng), random_events(rng)
    v1, g1 = event_loss(gt, pred, K, 0.025)
    v3, g3 = event_loss(gt, pred, K, 0.075)
    assert v3 == pytest.approx(3 * v1, rel=1e-14) and np.allclose(g3, 3 * g1, rtol=1e-14, atol=0)


def test_event_loss_single_pixel_discrepancy():
    gt = (np.zeros((25, 25)), np.zeros((25, 25)))
    pred = (np.zeros((25, 25)), np.zeros((25, 25)))
    pred[0][12, 12] = 2.5
    value, _ = event_loss(gt, pred, K, 0.025)
    assert value == pytest.approx(0.025 * 2.5 ** 2 * np.sum(K.weights ** 2), rel=1e-12)


def test_event_loss_symmetric_and_shift_invariant():
    rng = np.random.default_rng(4)
    a, b, c = random_events(rng), random_events(rng), random_events(rng)
    assert event_loss(a, b, K)[0] == pytest.approx(event_loss(b, a, K)[0], rel=1e-14)
    shifted = event_loss((a[0] + c[0], a[1] + c[1]), (b[0] + c[0], b[1] + c[1]), K)[0]
    assert shifted == pytest.approx(event_loss(a, b, K)[0], rel=1e-12)


def test_event_loss_pixel_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    for _ in range(3):
        gt, pred = random_events(rng, (9, 12)), random_events(rng, (9, 12))
        x = np.stack(pred)
        _, g = event_loss(gt, pred, K, 0.025)
        fd = finite_difference(lambda z: event_loss(gt, (z[0], z[1]), K, 0.025)[0], x, 1e-3)
        assert relative_error(g, fd, 1e-8).max() <= 1e-6


def test_event_loss_dimension_mismatch():
    with pytest.raises(ValueError):
        event_loss((np.zeros((3, 3)), np.zeros((3, 3))), (np.zeros((3, 4)), np.zeros((3, 4))), K)


def test_event_loss_mask_drops_pixels():
    rng = np.random.default_rng(6)
    gt, pred = random_events(rng), random_events(rng)
    mask = np.zeros(gt[0].shape, bool)
    mask[4:10, 5:12] = True
    masked = (np.where(mask, gt[0], 0), np.where(mask, gt[1], 0))
    pm = (np.where(mask, pred[0], 0), np.where(mask, pred[1], 0))
    assert event_loss(gt, pred, K, 0.025, mask)[0] == pytest.approx(event_loss(masked, pm, K, 0.025)[0], rel=1e-12)
    assert not event_loss(gt, pred, K, 0.025, mask)[1][:, ~mask].any()


def test_photometric_examples():
    rng = np.random.default_rng(7)
    a = rng.uniform(0, 200, size=(5, 6, 3))
    b = rng.uniform(0, 200, size=(5, 6, 3))
    assert photometric_loss(a, a)[0] == 0
    assert photometric_loss(a + 10, a)[0] == pytest.approx(10.0, abs=1e-12)
    expected = sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert photometric_loss(RgbImage(a), RgbImage(b))[0] == pytest.approx(expected, rel=1e-12)
    _, g = photometric_loss(a, a)
    assert not g.any()
    with pytest.raises(ValueError):
        photometric_loss(a, b[:, :5])


def test_depth_examples():
    rng = np.random.default_rng(8)
    gt = rng.uniform(0.5, 4.0, size=(6, 7))
    assert depth_loss(DepthImage(gt), DepthImage(gt))[0] == 0
    off = gt + 0.05
    off[0, 0] = 0.0
    assert depth_loss(off, gt)[0] == pytest.approx(0.05, abs=1e-12)
    with pytest.warns(EmptyOverlapWarning):
        value, grad = depth_loss(np.zeros_like(gt), gt)
    assert value == 0 and not grad.any()
    with pytest.raises(ValueError):
        depth_loss(gt, gt[:, :3])


def test_total_loss_event_only_perfect_prediction():
    rng = np.random.default_rng(9)
    prev = rng.uniform(20, 200, size=(8, 9, 3))
    rendered = rng.uniform(20, 200, size=(8, 9, 3))
    p = PredictorParams()
    gt = predict_arrays(prev, rendered, p)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        terms, grad = total_tracking_loss(rendered, np.ones((8, 9)), np.zeros((72, 4, 6)), LossWeights(), K, p,
                                          prev_gt_rgb=prev, gt_events=gt)
    assert terms.total == 0 and not grad.any()


def test_total_loss_recomposes_terms():
    rng = np.random.default_rng(10)
    prev = rng.uniform(20, 200, size=(8, 9, 3))
    rendered = rng.uniform(20, 200, size=(8, 9, 3))
    gt_rgb = rng.uniform(20, 200, size=(8, 9, 3))
    depth, gt_depth = rng.uniform(1, 3, size=(2, 8, 9))
    gt_ev = EventImage(rng.integers(0, 4, (8, 9)).astype(np.uint32), rng.integers(0, 4, (8, 9)).astype(np.uint32))
    w = LossWeights(0.025, 0.7, 1.3)
    p = PredictorParams()
    terms, _ = total_tracking_loss(rendered, depth, None, w, K, p, prev_gt_rgb=prev, gt_events=gt_ev,
                                   gt_rgb=gt_rgb, gt_depth=gt_depth)
    ev = event_loss(gt_ev, predict_arrays(prev, rendered, p), K, 0.025)[0]
    ph = photometric_loss(rendered, gt_rgb)[0]
    dp = depth_loss(depth, gt_depth)[0]
    assert terms.event == pytest.approx(ev, rel=1e-14)
    assert terms.total == pytest.approx(ev + 0.7 * ph + 1.3 * dp, rel=1e-14)


def test_weight_and_kernel_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda_event=-1.0)
    with pytest.raises(ValueError):
        GaussianKernel(size=8)
    with pytest.raises(ValueError):
        GaussianKernel(sigma=0.0)
