import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from im2im_adv.core import PHOTO_PALETTE, ImageBuffer
from im2im_adv.errors import ConfigError, DataError, DimensionError
from im2im_adv.metrics import (
    DEFAULT_METRIC,
    REFERENCE_CLEAN_FCN_SCORES,
    label_outputs,
    l1_metric,
    perceptual_distance,
    psnr,
    seg_scores,
)


def test_psnr_examples():
    a = ImageBuffer(np.full((4, 4, 3), 0.5))
    assert psnr(a, a) == 99.0
    b = ImageBuffer(np.full((4, 4, 3), 0.6))
    assert psnr(a, b) == pytest.approx(20.0)
    with pytest.raises(DimensionError):
        psnr(a, ImageBuffer(np.zeros((2, 2, 3))))


def test_psnr_matches_oracle():
    rng = np.random.default_rng(0)
    a, b = ImageBuffer(rng.random((5, 5, 3))), ImageBuffer(rng.random((5, 5, 3)))
    mse = sum((x - y) ** 2 for x, y in zip(a.values.ravel(), b.values.ravel())) / a.values.size
    assert abs(psnr(a, b) - 10 * math.log10(1 / mse)) < 1e-6


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (8, 8, 3), elements=st.floats(0, 1)), arrays(np.float64, (8, 8, 3), elements=st.floats(0, 1)))
def test_perceptual_metric_axioms(x, y):
    a, b = ImageBuffer(x), ImageBuffer(y)
    for m in (DEFAULT_METRIC, l1_metric()):
        assert perceptual_distance(m, a, a) == 0.0
        assert abs(perceptual_distance(m, a, b) - perceptual_distance(m, b, a)) < 1e-9
        assert perceptual_distance(m, a, b) >= 0.0


def test_perceptual_metric_is_monotone_in_damage():
    rng = np.random.default_rng(1)
    for _ in range(5):
        clean = rng.uniform(0.2, 0.8, (16, 16, 3))
        noise = rng.normal(size=clean.shape)
        light = ImageBuffer(np.clip(clean + 0.02 * noise, 0, 1))
        heavy = ImageBuffer(np.clip(clean + 0.2 * noise, 0, 1))
        c = ImageBuffer(clean)
        assert perceptual_distance(DEFAULT_METRIC, c, heavy) > perceptual_distance(DEFAULT_METRIC, c, light)


def test_seg_scores_examples():
    t = np.array([[0, 0], [1, 1]])
    assert seg_scores(t, t, 2).as_tuple() == (1.0, 1.0, 1.0)
    s = seg_scores(np.array([[0, 1], [1, 1]]), t, 2)
    assert s.per_pixel_acc == 0.75 and s.per_class_acc == 0.75
    assert s.class_iou == pytest.approx((0.5 + 2 / 3) / 2)
    with pytest.raises(DataError):
        seg_scores(np.array([[5]]), np.array([[0]]), 2)
    assert REFERENCE_CLEAN_FCN_SCORES == (0.66, 0.23, 0.17)


@settings(max_examples=50, deadline=None)
@given(arrays(np.int64, (8, 8), elements=st.integers(0, 3)), arrays(np.int64, (8, 8), elements=st.integers(0, 3)))
def test_seg_scores_match_brute_force(pred, true):
    s = seg_scores(pred, true, 4)
    recalls, ious = [], []
    for c in range(4):
        t = true == c
        if not t.any():
            continue
        p = pred == c
        recalls.append((t & p).sum() / t.sum())
        ious.append((t & p).sum() / (t | p).sum())
    assert s.per_pixel_acc == pytest.approx((pred == true).mean())
    assert s.per_class_acc == pytest.approx(np.mean(recalls))
    assert s.class_iou == pytest.approx(np.mean(ious))
    for v in s.as_tuple():
        assert 0.0 <= v <= 1.0


def test_label_outputs_round_trip_and_noise():
    rng = np.random.default_rng(2)
    labels = rng.integers(0, 4, (16, 16))
    img = ImageBuffer(PHOTO_PALETTE[labels])
    assert np.array_equal(label_outputs(img, PHOTO_PALETTE[:4]), labels)
    noisy = ImageBuffer(np.clip(img.values + rng.normal(0, 0.02, img.shape), 0, 1))
    assert (label_outputs(noisy, PHOTO_PALETTE[:4]) == labels).mean() >= 0.99


def test_label_outputs_tie_and_empty_palette():
    pal = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
    mid = ImageBuffer(np.full((1, 1, 3), 0.5))
    assert label_outputs(mid, pal)[0, 0] == 0
    with pytest.raises(ConfigError):
        label_outputs(mid, np.zeros((0, 3)))
