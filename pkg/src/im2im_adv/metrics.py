"""Report metrics: PSNR, a pluggable perceptual distance, segmentation scores."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .core import ImageBuffer
from .errors import ConfigError, DataError, DimensionError

PSNR_CAP = 99.0

# FCN-scores of the clean pix2pix outputs on Cityscapes, kept for reference
# next to the toy numbers: (per-pixel acc, per-class acc, class IoU).
REFERENCE_CLEAN_FCN_SCORES = (0.66, 0.23, 0.17)
# LPIPS of clean outputs against targets on Cityscapes (mean, std).
REFERENCE_O_VS_IT_LPIPS = (0.32, 0.06)


def _same_shape(a: ImageBuffer, b: ImageBuffer):
    if a.shape != b.shape:
        raise DimensionError(f"{a.shape} vs {b.shape}")


def psnr(a: ImageBuffer, b: ImageBuffer) -> float:
    _same_shape(a, b)
    mse = float(np.mean((a.values - b.values) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


# ---------------------------------------------------------------------------
# perceptual distance


@dataclass(frozen=True)
class PerceptualMetric:
    name: str
    distance: Callable[[ImageBuffer, ImageBuffer], float]


def perceptual_distance(metric: PerceptualMetric, a: ImageBuffer, b: ImageBuffer) -> float:
    _same_shape(a, b)
    return float(metric.distance(a, b))


_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


def _ssim_mean(x: np.ndarray, y: np.ndarray, sigma: float) -> float:
    blur = lambda z: ndimage.gaussian_filter(z, sigma=(sigma, sigma, 0), mode="reflect")  # noqa: E731
    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    num = (2 * mx * my + _SSIM_C1) * (2 * sxy + _SSIM_C2)
    den = (mx * mx + my * my + _SSIM_C1) * (sxx + syy + _SSIM_C2)
    return float(np.mean(num / den))


def _downsample(z: np.ndarray) -> np.ndarray:
    h, w = z.shape[0] // 2 * 2, z.shape[1] // 2 * 2
    z = z[:h, :w]
    return 0.25 * (z[0::2, 0::2] + z[1::2, 0::2] + z[0::2, 1::2] + z[1::2, 1::2])


def ms_dssim(a: ImageBuffer, b: ImageBuffer, scales: int = 3, sigma: float = 1.0) -> float:
    """Structural dissimilarity (1 - SSIM) / 2 averaged over a dyadic pyramid."""
    x, y = a.values, b.values
    vals = []
    for _ in range(scales):
        vals.append((1.0 - _ssim_mean(x, y, sigma)) / 2.0)
        if min(x.shape[:2]) < 8:
            break
        x, y = _downsample(x), _downsample(y)
    return max(0.0, float(np.mean(vals)))


class RandomFeatureDistance:
    """LPIPS-shaped distance in the space of a fixed random two-layer conv net.

    Features are unit-normalised across channels at every location; the
    distance is the mean squared difference, averaged over layers.
    """

    def __init__(self, seed: int = 20190917, channels=(16, 32), in_ch: int = 3):
        g = torch.Generator().manual_seed(seed)
        self.weights = []
        c = in_ch
        for k in channels:
            w = torch.randn(k, c, 3, 3, generator=g, dtype=torch.float64) / math.sqrt(9 * c)
            self.weights.append(w)
            c = k

    def features(self, img: np.ndarray) -> list[torch.Tensor]:
        x = torch.from_numpy(np.array(img.transpose(2, 0, 1)))[None] * 2.0 - 1.0
        if x.shape[1] == 1 and self.weights[0].shape[1] == 3:
            x = x.expand(-1, 3, -1, -1)
        feats = []
        for i, w in enumerate(self.weights):
            x = F.relu(F.conv2d(x, w, padding=1))
            feats.append(x / (torch.sqrt((x * x).sum(dim=1, keepdim=True)) + 1e-10))
            if i + 1 < len(self.weights):
                x = F.avg_pool2d(x, 2) if min(x.shape[2:]) >= 2 else x
        return feats

    def __call__(self, a: ImageBuffer, b: ImageBuffer) -> float:
        fa, fb = self.features(a.values), self.features(b.values)
        return float(np.mean([((p - q) ** 2).sum(dim=1).mean().item() for p, q in zip(fa, fb)]))


_RANDOM_FEATURES = RandomFeatureDistance()


def _default_distance(a: ImageBuffer, b: ImageBuffer) -> float:
    if np.array_equal(a.values, b.values):
        return 0.0
    return 0.5 * ms_dssim(a, b) + 0.5 * _RANDOM_FEATURES(a, b)


DEFAULT_METRIC = PerceptualMetric("msdssim+randfeat", _default_distance)


def l1_metric() -> PerceptualMetric:
    return PerceptualMetric("l1", lambda a, b: float(np.mean(np.abs(a.values - b.values))))


# ---------------------------------------------------------------------------
# segmentation scores


@dataclass(frozen=True)
class SegScores:
    per_pixel_acc: float
    per_class_acc: float
    class_iou: float

    def as_tuple(self):
        return (self.per_pixel_acc, self.per_class_acc, self.class_iou)


def seg_scores(pred_labels, true_labels, num_classes: int) -> SegScores:
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    if pred.shape != true.shape:
        raise DimensionError(f"{pred.shape} vs {true.shape}")
    for arr in (pred, true):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise DataError(f"label outside [0, {num_classes})")
    conf = np.bincount(true.ravel() * num_classes + pred.ravel(), minlength=num_classes**2)
    conf = conf.reshape(num_classes, num_classes).astype(np.float64)
    tp = np.diag(conf)
    true_count = conf.sum(axis=1)
    pred_count = conf.sum(axis=0)
    present = true_count > 0
    per_pixel = tp.sum() / conf.sum()
    per_class = np.mean(tp[present] / true_count[present])
    iou = np.mean(tp[present] / (true_count + pred_count - tp)[present])
    return SegScores(float(per_pixel), float(per_class), float(iou))


def label_outputs(output: ImageBuffer, palette) -> np.ndarray:
    """Nearest-palette-colour labelling (ties go to the smaller class id)."""
    pal = np.asarray(palette, dtype=np.float64)
    if pal.size == 0:
        raise ConfigError("palette is empty")
    d = ((output.values[:, :, None, :] - pal[None, None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(d, axis=-1)
