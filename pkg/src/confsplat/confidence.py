"""Per-pixel depth confidence from edge, texture and depth-gradient cues."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import DimensionError, InvalidParameterError, Raster, check_same_shape


class EmptyMapError(ValueError):
    pass


@dataclass
class ConfidenceConfig:
    w_e: float = 0.2
    w_t: float = 0.5
    w_g: float = 0.3
    epsilon: float = 1e-6
    canny_low: float = 50.0
    canny_high: float = 150.0
    canny_sigma: float = 1.4

    def __post_init__(self):
        ws = (self.w_e, self.w_t, self.w_g)
        if any(not 0.0 <= w <= 1.0 for w in ws) or abs(sum(ws) - 1.0) > 1e-9:
            raise InvalidParameterError("confidence weights must lie in [0, 1] and sum to 1")


def _luma255(image: Raster) -> np.ndarray:
    if image.height < 3 or image.width < 3:
        raise DimensionError("image must be at least 3x3")
    return image.luma() * 255.0


def canny_edges(gray: np.ndarray, low: float = 50.0, high: float = 150.0, sigma: float = 1.4) -> np.ndarray:
    """Binary Canny edge map (values 0 or 255) of an 8-bit-scaled gray image."""
    img = ndimage.gaussian_filter(np.asarray(gray, dtype=np.float64), sigma, mode="nearest", truncate=3.0)
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)

    # quantize the gradient direction to 0/45/90/135 degrees
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    H, W = mag.shape
    padded = np.pad(mag, 1, mode="constant")

    def shifted(dr, dc):
        return padded[1 + dr:1 + dr + H, 1 + dc:1 + dc + W]

    horiz = (angle < 22.5) | (angle >= 157.5)
    diag = (angle >= 22.5) & (angle < 67.5)
    vert = (angle >= 67.5) & (angle < 112.5)
    anti = (angle >= 112.5) & (angle < 157.5)
    n1 = np.select([horiz, diag, vert, anti], [shifted(0, 1), shifted(1, 1), shifted(1, 0), shifted(1, -1)])
    n2 = np.select([horiz, diag, vert, anti], [shifted(0, -1), shifted(-1, -1), shifted(-1, 0), shifted(-1, 1)])
    # ties broken toward the lower-index side so plateaus stay one pixel wide
    thin = (mag > n1) & (mag >= n2)

    strong = thin & (mag >= high)
    weak = thin & (mag >= low)
    labels, count = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    if count == 0:
        return np.zeros_like(mag)
    keep = np.zeros(count + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    return np.where(keep[labels], 255.0, 0.0)


def edge_confidence(image: Raster, cfg: ConfidenceConfig | None = None) -> Raster:
    """``1 - E(I) / 255`` with ``E`` the Canny edge map of the image luma."""
    cfg = cfg or ConfidenceConfig()
    edges = canny_edges(_luma255(image), cfg.canny_low, cfg.canny_high, cfg.canny_sigma)
    return Raster(1.0 - edges / 255.0)


LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def texture_confidence(image: Raster) -> Raster:
    """``1 - |lap I| / max |lap I|``, or all ones when the Laplacian vanishes."""
    lap = np.abs(ndimage.correlate(_luma255(image), LAPLACIAN, mode="nearest"))
    peak = lap.max()
    if peak == 0:
        return Raster(np.ones_like(lap))
    return Raster(1.0 - lap / peak)


def _axis_gradient(d: np.ndarray, valid: np.ndarray, axis: int) -> np.ndarray:
    # central difference where both neighbors are usable, one-sided where
    # only one is, zero where neither is
    fwd_ok = np.zeros_like(valid)
    bwd_ok = np.zeros_like(valid)
    fwd = np.zeros_like(d)
    bwd = np.zeros_like(d)
    sl = [slice(None)] * 2

    def s(a, b):
        sl[axis] = slice(a, b)
        return tuple(sl)

    fwd[s(None, -1)] = d[s(1, None)] - d[s(None, -1)]
    fwd_ok[s(None, -1)] = valid[s(1, None)] & valid[s(None, -1)]
    bwd[s(1, None)] = d[s(1, None)] - d[s(None, -1)]
    bwd_ok[s(1, None)] = valid[s(1, None)] & valid[s(None, -1)]
    both = fwd_ok & bwd_ok
    return np.select([both, fwd_ok, bwd_ok], [0.5 * (fwd + bwd), fwd, bwd], 0.0)


def gradient_confidence(depth: Raster, epsilon: float = 1e-6) -> Raster:
    """``1 / (|grad D| + eps)`` normalized by its maximum over valid pixels."""
    valid = depth.valid
    if not valid.any():
        raise EmptyMapError("depth map has no valid pixels")
    d = depth.plane().astype(np.float64)
    mag = np.hypot(_axis_gradient(d, valid, 1), _axis_gradient(d, valid, 0))
    raw = 1.0 / (mag + epsilon)
    out = np.where(valid, raw / raw[valid].max(), 0.0)
    return Raster(out, valid)


def fuse_confidence(c_e: Raster, c_t: Raster, c_g: Raster, cfg: ConfidenceConfig | None = None) -> Raster:
    cfg = cfg or ConfidenceConfig()
    check_same_shape(c_e, c_t, c_g)
    for r in (c_e, c_t, c_g):
        if r.channels != 1:
            raise DimensionError("confidence cues must be single-channel")
    fused = cfg.w_e * c_e.plane() + cfg.w_t * c_t.plane() + cfg.w_g * c_g.plane()
    valid = c_e.valid & c_t.valid & c_g.valid
    return Raster(np.clip(fused, 0.0, 1.0), valid)


def confidence_map(image: Raster, depth: Raster, cfg: ConfidenceConfig | None = None) -> Raster:
    """Fused confidence for one view from its image and aligned depth."""
    cfg = cfg or ConfidenceConfig()
    check_same_shape(image, depth)
    return fuse_confidence(edge_confidence(image, cfg), texture_confidence(image),
                           gradient_confidence(depth, cfg.epsilon), cfg)
