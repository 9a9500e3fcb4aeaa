"""Bilinear sampling, flow warping, flow smoothness and similarity transforms.

Flows are backward: output pixel ``k`` at ``(u, v)`` reads the source image at
``(u + du[k], v + dv[k])``.  Sample points are clamped to the image rectangle
before the 4-neighbour lookup, which keeps gradients defined at the border.
Similarity transforms use the image centre as origin and fill pixels whose
source falls outside the frame with a constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .core import FlowBudget, ImageBuffer
from .errors import ArgumentError, DimensionError


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-pixel displacement (du along columns, dv along rows), in pixels."""

    du: np.ndarray
    dv: np.ndarray

    def __post_init__(self):
        du = np.array(self.du, dtype=np.float64)
        dv = np.array(self.dv, dtype=np.float64)
        if du.ndim != 2 or du.shape != dv.shape:
            raise DimensionError(f"du {du.shape} and dv {dv.shape} must be equal 2-D arrays")
        if not (np.all(np.isfinite(du)) and np.all(np.isfinite(dv))):
            raise ArgumentError("flow contains non-finite values")
        du.setflags(write=False)
        dv.setflags(write=False)
        object.__setattr__(self, "du", du)
        object.__setattr__(self, "dv", dv)

    @classmethod
    def zeros(cls, height, width) -> "FlowField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    @classmethod
    def constant(cls, height, width, du, dv) -> "FlowField":
        return cls(np.full((height, width), float(du)), np.full((height, width), float(dv)))

    @classmethod
    def from_array(cls, arr) -> "FlowField":
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[2] != 2:
            raise DimensionError(f"flow array must be H x W x 2, got {arr.shape}")
        return cls(arr[:, :, 0], arr[:, :, 1])

    def to_array(self) -> np.ndarray:
        return np.stack([self.du, self.dv], axis=-1)

    @property
    def shape(self) -> tuple[int, int]:
        return self.du.shape

    def magnitude(self) -> np.ndarray:
        return np.sqrt(self.du**2 + self.dv**2)

    def __mul__(self, k):
        return FlowField(self.du * k, self.dv * k)

    __rmul__ = __mul__


@dataclass(frozen=True)
class SimilarityParams:
    """Translation (du, dv) in pixels, rotation theta in radians, scales sx, sy."""

    du: float = 0.0
    dv: float = 0.0
    theta: float = 0.0
    sx: float = 1.0
    sy: float = 1.0

    def __post_init__(self):
        if not (self.sx > 0 and self.sy > 0):
            raise ArgumentError("scales must be positive")

    @classmethod
    def identity(cls) -> "SimilarityParams":
        return cls()

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.du, self.dv, self.theta, self.sx, self.sy)

    def is_identity(self) -> bool:
        return self.as_tuple() == (0.0, 0.0, 0.0, 1.0, 1.0)


# ---------------------------------------------------------------------------
# bilinear sampling


def bilinear_sample(image: ImageBuffer, u: float, v: float, channel: int) -> float:
    """Sample one channel at a fractional location with 4-neighbour bilinear weights."""
    if not (math.isfinite(u) and math.isfinite(v)):
        raise ArgumentError(f"non-finite sample coordinate ({u}, {v})")
    if not 0 <= channel < image.channels:
        raise ArgumentError(f"channel {channel} out of range for {image.channels} channels")
    h, w = image.height, image.width
    u = min(max(u, 0.0), w - 1.0)
    v = min(max(v, 0.0), h - 1.0)
    u0, v0 = math.floor(u), math.floor(v)
    u1, v1 = math.ceil(u), math.ceil(v)
    vals = image.values[:, :, channel]
    if u0 == u1 and v0 == v1:
        return float(vals[v0, u0])
    total = 0.0
    for uj, vj in {(u0, v0), (u1, v0), (u0, v1), (u1, v1)}:
        total += vals[vj, uj] * (1.0 - abs(u - uj)) * (1.0 - abs(v - vj))
    return float(total)


def sample_tensor(img: torch.Tensor, su: torch.Tensor, sv: torch.Tensor) -> torch.Tensor:
    """Batched bilinear sampling.

    img: (B, C, H, W); su, sv: (B, H', W') absolute pixel coordinates.
    Returns (B, C, H', W').  Differentiable in img, su and sv.
    """
    b, c, h, w = img.shape
    su = su.clamp(0.0, w - 1.0)
    sv = sv.clamp(0.0, h - 1.0)
    u0 = torch.floor(su).detach()
    v0 = torch.floor(sv).detach()
    au = su - u0
    av = sv - v0
    u0i = u0.long()
    v0i = v0.long()
    u1i = (u0i + 1).clamp(max=w - 1)
    v1i = (v0i + 1).clamp(max=h - 1)
    flat = img.reshape(b, c, h * w)
    out_shape = (b, c) + su.shape[1:]

    def gather(vi, ui):
        idx = (vi * w + ui).reshape(b, 1, -1).expand(b, c, -1)
        return torch.gather(flat, 2, idx).reshape(out_shape)

    au = au.unsqueeze(1)
    av = av.unsqueeze(1)
    return (
        gather(v0i, u0i) * (1 - au) * (1 - av)
        + gather(v0i, u1i) * au * (1 - av)
        + gather(v1i, u0i) * (1 - au) * av
        + gather(v1i, u1i) * au * av
    )


def warp_tensor(img: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """img (B, C, H, W), flow (B, 2, H, W) with channels (du, dv)."""
    b, _, h, w = img.shape
    if flow.shape != (b, 2, h, w):
        raise DimensionError(f"flow {tuple(flow.shape)} does not match image {tuple(img.shape)}")
    vv, uu = torch.meshgrid(
        torch.arange(h, dtype=img.dtype), torch.arange(w, dtype=img.dtype), indexing="ij"
    )
    out = sample_tensor(img, uu + flow[:, 0], vv + flow[:, 1])
    return out.clamp(0.0, 1.0)


def image_to_tensor(image, dtype=torch.float64) -> torch.Tensor:
    values = image.values if isinstance(image, ImageBuffer) else np.asarray(image)
    return torch.from_numpy(np.array(values.transpose(2, 0, 1))).to(dtype).unsqueeze(0)


def flow_to_tensor(flow: FlowField, dtype=torch.float64) -> torch.Tensor:
    return torch.from_numpy(np.stack([flow.du, flow.dv])).to(dtype).unsqueeze(0)


def tensor_to_image(t: torch.Tensor) -> ImageBuffer:
    arr = t.detach().to(torch.float64).squeeze(0).numpy().transpose(1, 2, 0)
    return ImageBuffer.clamped(arr)


def warp_with_flow(image: ImageBuffer, flow: FlowField) -> ImageBuffer:
    if image.shape[:2] != flow.shape:
        raise DimensionError(f"image {image.shape} vs flow {flow.shape}")
    with torch.no_grad():
        out = warp_tensor(image_to_tensor(image), flow_to_tensor(flow))
    return tensor_to_image(out)


def warp_flow_gradient(image: ImageBuffer, flow: FlowField, weights=None) -> np.ndarray:
    """Gradient of ``sum(weights * warp(image, flow))`` with respect to the flow, as H x W x 2."""
    img = image_to_tensor(image)
    f = flow_to_tensor(flow).requires_grad_(True)
    out = warp_tensor(img, f)
    w = torch.ones_like(out) if weights is None else image_to_tensor(np.asarray(weights))
    (out * w).sum().backward()
    return f.grad[0].numpy().transpose(1, 2, 0)


# ---------------------------------------------------------------------------
# flow smoothness and projection


def _safe_sqrt(x: torch.Tensor) -> torch.Tensor:
    # sqrt with zero gradient at exactly 0 (instead of inf)
    pos = x > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, x, torch.ones_like(x))), torch.zeros_like(x))


def flow_tv_tensor(flow: torch.Tensor) -> torch.Tensor:
    """Per-sample TV loss for flow (B, 2, H, W); every unordered neighbour pair counts twice."""
    dh = flow[:, :, :, 1:] - flow[:, :, :, :-1]
    dw = flow[:, :, 1:, :] - flow[:, :, :-1, :]
    th = _safe_sqrt((dh**2).sum(dim=1)).sum(dim=(1, 2))
    tw = _safe_sqrt((dw**2).sum(dim=1)).sum(dim=(1, 2))
    return 2.0 * (th + tw)


def flow_tv_loss(flow: FlowField) -> float:
    """Sum over pixels of the l2 flow difference to each in-image 4-neighbour."""
    with torch.no_grad():
        return float(flow_tv_tensor(flow_to_tensor(flow))[0])


def flow_tv_gradient(flow: FlowField) -> np.ndarray:
    f = flow_to_tensor(flow).requires_grad_(True)
    flow_tv_tensor(f).sum().backward()
    return f.grad[0].numpy().transpose(1, 2, 0)


def project_flow_tensor(flow: torch.Tensor, xi_f: float) -> torch.Tensor:
    mag = torch.sqrt((flow**2).sum(dim=1, keepdim=True))
    scale = torch.where(mag > xi_f, xi_f / torch.clamp(mag, min=1e-300), torch.ones_like(mag))
    return flow * scale


def project_flow(flow: FlowField, budget: FlowBudget | float) -> FlowField:
    """Rescale every flow vector longer than ``xi_f`` onto the bound; shorter ones are untouched."""
    xi_f = budget.xi_f if isinstance(budget, FlowBudget) else float(budget)
    mag = flow.magnitude()
    over = mag > xi_f
    scale = np.ones_like(mag)
    scale[over] = xi_f / mag[over]
    return FlowField(flow.du * scale, flow.dv * scale)


# ---------------------------------------------------------------------------
# similarity transforms


def similarity_matrix(params: SimilarityParams) -> np.ndarray:
    c, s = math.cos(params.theta), math.sin(params.theta)
    return np.diag([params.sx, params.sy]) @ np.array([[c, -s], [s, c]])


def similarity_forward(params: SimilarityParams, u: float, v: float) -> tuple[float, float]:
    """Map a centre-origin point: scale after rotation, translation last."""
    out = similarity_matrix(params) @ np.array([u, v]) + np.array([params.du, params.dv])
    return float(out[0]), float(out[1])


def similarity_source_coords(params: SimilarityParams, height: int, width: int):
    """Source pixel coordinates (su, sv) for every destination pixel (inverse mapping)."""
    cu, cv = (width - 1) / 2.0, (height - 1) / 2.0
    vv, uu = np.mgrid[0:height, 0:width].astype(np.float64)
    inv = np.linalg.inv(similarity_matrix(params))
    pu = uu - cu - params.du
    pv = vv - cv - params.dv
    su = inv[0, 0] * pu + inv[0, 1] * pv + cu
    sv = inv[1, 0] * pu + inv[1, 1] * pv + cv
    return su, sv


_FILL_TOL = 1e-9


def apply_similarity(image: ImageBuffer, params: SimilarityParams, fill: float = 0.0) -> ImageBuffer:
    h, w = image.height, image.width
    su, sv = similarity_source_coords(params, h, w)
    inside = (su >= -_FILL_TOL) & (su <= w - 1 + _FILL_TOL) & (sv >= -_FILL_TOL) & (sv <= h - 1 + _FILL_TOL)
    su = np.clip(su, 0.0, w - 1.0)
    sv = np.clip(sv, 0.0, h - 1.0)
    u0 = np.floor(su).astype(int)
    v0 = np.floor(sv).astype(int)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    au = (su - u0)[:, :, None]
    av = (sv - v0)[:, :, None]
    img = image.values
    out = (
        img[v0, u0] * (1 - au) * (1 - av)
        + img[v0, u1] * au * (1 - av)
        + img[v1, u0] * (1 - au) * av
        + img[v1, u1] * au * av
    )
    out[~inside] = fill
    return ImageBuffer.clamped(out)


# ---------------------------------------------------------------------------
# visualisation


def flow_to_rgb(flow: FlowField, max_magnitude: float | None = None) -> np.ndarray:
    """HSV encoding: hue = flow angle, value = magnitude / max_magnitude."""
    from matplotlib.colors import hsv_to_rgb

    mag = flow.magnitude()
    scale = max_magnitude if max_magnitude else max(float(mag.max()), 1e-12)
    hue = (np.arctan2(flow.dv, flow.du) + np.pi) / (2 * np.pi)
    hsv = np.stack([hue, np.ones_like(hue), np.clip(mag / scale, 0.0, 1.0)], axis=-1)
    return hsv_to_rgb(hsv)
