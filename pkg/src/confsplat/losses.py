"""Training objective terms and their gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .geometry import DimensionError, InvalidParameterError, Raster, check_same_shape


@dataclass
class LossConfig:
    lambda_max: float = 0.6
    k: float = 150.0
    lambda_dssim: float = 0.2
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_c1: float = 0.01 ** 2
    ssim_c2: float = 0.03 ** 2

    def __post_init__(self):
        if self.lambda_max < 0 or self.k <= 0:
            raise InvalidParameterError("lambda_max must be >= 0 and k > 0")
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise InvalidParameterError("lambda_dssim must lie in [0, 1]")


@dataclass
class DepthLossResult:
    value: float
    grad: np.ndarray
    count: int

    @property
    def empty(self) -> bool:
        return self.count == 0


def depth_loss(rendered: Raster, estimated: Raster, confidence: Raster) -> DepthLossResult:
    """Confidence-weighted mean absolute depth error over jointly valid pixels.

    With no jointly valid pixel the loss is 0 and ``result.empty`` is set.
    """
    check_same_shape(rendered, estimated, confidence)
    omega = rendered.valid & estimated.valid & confidence.valid
    count = int(omega.sum())
    grad = np.zeros(rendered.shape)
    if count == 0:
        return DepthLossResult(0.0, grad, 0)
    resid = rendered.plane().astype(np.float64) - estimated.plane()
    conf = confidence.plane().astype(np.float64)
    value = float(np.sum(conf[omega] * np.abs(resid[omega]))) / count
    grad[omega] = conf[omega] * np.sign(resid[omega]) / count
    return DepthLossResult(value, grad, count)


def adaptive_weight(alignment_loss: float, cfg: LossConfig | None = None) -> float:
    """Global depth-loss weight ``lambda_max * exp(-k * l_a)``."""
    cfg = cfg or LossConfig()
    if not np.isfinite(alignment_loss) or alignment_loss < 0:
        raise InvalidParameterError(f"alignment loss must be finite and >= 0, got {alignment_loss}")
    return float(cfg.lambda_max * np.exp(-cfg.k * alignment_loss))


def total_loss(image_term: float, depth_term: float, lambda_d: float) -> float:
    return image_term + lambda_d * depth_term


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _blur(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    # zero-padded 'same' filtering over the two spatial axes; self-adjoint
    # because the window is symmetric
    y = correlate1d(x, win, axis=0, mode="constant", cval=0.0)
    return correlate1d(y, win, axis=1, mode="constant", cval=0.0)


def _as_hwc(img) -> np.ndarray:
    data = img.data if isinstance(img, Raster) else np.asarray(img)
    if data.ndim == 2:
        data = data[:, :, None]
    return data.astype(np.float64)


def ssim(x, y, cfg: LossConfig | None = None, return_grad: bool = False):
    """Mean SSIM over all pixels and channels; optionally d SSIM / d x.

    Uses a Gaussian window with zero padding at the borders.
    """
    cfg = cfg or LossConfig()
    x, y = _as_hwc(x), _as_hwc(y)
    if x.shape != y.shape:
        raise DimensionError(f"image shapes differ: {x.shape} vs {y.shape}")
    win = gaussian_window(cfg.ssim_window, cfg.ssim_sigma)
    c1, c2 = cfg.ssim_c1, cfg.ssim_c2
    mx, my = _blur(x, win), _blur(y, win)
    exx, eyy, exy = _blur(x * x, win), _blur(y * y, win), _blur(x * y, win)
    a1 = 2 * mx * my + c1
    a2 = 2 * (exy - mx * my) + c2
    b1 = mx * mx + my * my + c1
    b2 = (exx - mx * mx) + (eyy - my * my) + c2
    smap = a1 * a2 / (b1 * b2)
    value = float(smap.mean())
    if not return_grad:
        return value
    n = smap.size
    d_mx = (2 * my * a2 - 2 * my * a1) / (b1 * b2) - smap * (2 * mx / b1 - 2 * mx / b2)
    d_exx = -smap / b2
    d_exy = 2 * a1 / (b1 * b2)
    grad = (_blur(d_mx, win) + 2 * x * _blur(d_exx, win) + y * _blur(d_exy, win)) / n
    return value, grad


def image_loss(pred, gt, cfg: LossConfig | None = None) -> tuple[float, np.ndarray]:
    """``(1 - l) * mean|pred - gt| + l * (1 - SSIM)`` and its gradient w.r.t. ``pred``."""
    cfg = cfg or LossConfig()
    p, g = _as_hwc(pred), _as_hwc(gt)
    if p.shape != g.shape:
        raise DimensionError(f"image shapes differ: {p.shape} vs {g.shape}")
    diff = p - g
    l1 = float(np.abs(diff).mean())
    grad = (1.0 - cfg.lambda_dssim) * np.sign(diff) / diff.size
    value = (1.0 - cfg.lambda_dssim) * l1
    if cfg.lambda_dssim > 0:
        s, s_grad = ssim(p, g, cfg, return_grad=True)
        value += cfg.lambda_dssim * (1.0 - s)
        grad = grad - cfg.lambda_dssim * s_grad
    return value, grad
