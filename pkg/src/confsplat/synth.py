"""Synthetic ground-truth scenes rendered by the splatting renderer itself."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import CameraModel, GaussianSet, InvalidParameterError, Raster, SparsePointSet
from .render import render


@dataclass
class SyntheticView:
    camera: CameraModel
    image: Raster
    true_depth: Raster
    alpha: np.ndarray
    mono_depth: Raster
    # mono_depth * scale + shift reproduces the (possibly corrupted) true depth
    mono_scale: float
    mono_shift: float
    sparse: SparsePointSet
    corrupted: bool = False


@dataclass
class SyntheticScene:
    gaussians: GaussianSet
    views: list[SyntheticView]
    init_points: SparsePointSet
    test_views: list[SyntheticView] = field(default_factory=list)
    params: dict = field(default_factory=dict)

    @property
    def truth_points(self) -> np.ndarray:
        return self.gaussians.centers


def random_quaternions(rng, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q * np.where(q[:, :1] < 0, -1.0, 1.0)


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid so in-memory images equal their PNG files."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def ring_cameras(n: int, center, radius: float, height: float, size: int, focal: float,
                 phase: float = 0.0) -> list[CameraModel]:
    cams = []
    for k in range(n):
        ang = phase + 2.0 * np.pi * k / n
        eye = np.asarray(center) + np.array([radius * np.cos(ang), radius * np.sin(ang), height])
        cams.append(CameraModel.look_at(eye, center, focal, size, size))
    return cams


def backproject(cam: CameraModel, rows, cols, depth) -> np.ndarray:
    pix = np.stack([cols, rows, np.ones_like(depth)], axis=1).astype(np.float64)
    rays = pix @ np.linalg.inv(cam.intrinsics).T
    cam_pts = rays * depth[:, None]
    return (cam_pts - cam.translation) @ cam.rotation


def _blur_depth(depth: np.ndarray, weight: np.ndarray, sigma: float) -> np.ndarray:
    # normalized convolution so empty background does not pull depth to zero
    num = ndimage.gaussian_filter(depth * weight, sigma, mode="nearest")
    den = ndimage.gaussian_filter(weight, sigma, mode="nearest")
    return np.where(den > 1e-12, num / np.maximum(den, 1e-12), depth)


def _make_view(gs, cam, rng, depth_noise, edge_blur, warp_amp, points_per_view, sparse_noise, corrupted):
    out = render(gs, cam)
    image = Raster(quantize(out.color.data))
    dvalid = out.depth.valid
    dtrue = out.depth.plane()
    alpha = out.alpha_sum.plane()

    dc = dtrue.copy()
    if edge_blur > 0:
        dc = _blur_depth(dtrue, alpha, edge_blur)
    if corrupted and warp_amp > 0:
        cols = np.arange(cam.width)[None, :]
        rows = np.arange(cam.height)[:, None]
        phase = rng.uniform(0, 2 * np.pi)
        dc = dc + warp_amp * np.sin(2 * np.pi * cols / cam.width + phase) * np.cos(2 * np.pi * rows / cam.height)
    if depth_noise > 0:
        dc = dc + rng.normal(0.0, depth_noise, dc.shape)
    scale = float(rng.uniform(0.5, 2.0))
    shift = float(rng.uniform(-0.5, 0.5))
    mono = Raster((dc - shift) / scale, dvalid)

    cand_r, cand_c = np.nonzero(dvalid & (alpha > 0.5))
    k = min(points_per_view, len(cand_r))
    pick = rng.choice(len(cand_r), size=k, replace=False) if k else np.zeros(0, dtype=int)
    rr, cc = cand_r[pick], cand_c[pick]
    err = rng.uniform(0.0, 2.0, k)
    d = dtrue[rr, cc] + (rng.normal(0.0, 1.0, k) * sparse_noise * err if sparse_noise > 0 else 0.0)
    pts = backproject(cam, rr, cc, d)
    return SyntheticView(cam, image, Raster(dtrue, dvalid), alpha, mono, scale, shift,
                         SparsePointSet(pts, err), corrupted)


def generate_synthetic_scene(n_gaussians: int, n_views: int, image_size: int, seed: int = 0, *,
                             n_test_views: int = 0, depth_noise: float = 0.0, edge_blur: float = 0.0,
                             corrupt_views: int = 0, warp_amplitude: float = 0.3,
                             init_noise: float = 0.03, points_per_view: int = 64,
                             sparse_noise: float = 0.0, camera_radius: float = 2.6,
                             camera_height: float = 0.8, focal_factor: float = 1.1,
                             scale_range: tuple[float, float] = (0.06, 0.16)) -> SyntheticScene:
    """Random Gaussians in the unit box seen by a ring of cameras.

    Each view carries its rendered image (8-bit quantized) and true depth, a
    "monocular" depth that is an affine transform of the (optionally
    blurred, warped or noisy) true depth, and sparse depth observations
    back-projected from the true depth. ``corrupt_views`` views (the first
    ones after a seeded shuffle) get a non-affine warp. ``init_points`` are
    the true centers displaced by ``init_noise``.
    """
    if n_gaussians < 1 or n_views < 1:
        raise InvalidParameterError("need at least one Gaussian and one view")
    rng = np.random.default_rng(seed)
    gs = GaussianSet.from_arrays(
        centers=rng.uniform(-0.5, 0.5, (n_gaussians, 3)),
        scales=np.exp(rng.uniform(np.log(scale_range[0]), np.log(scale_range[1]), (n_gaussians, 3))),
        quats=random_quaternions(rng, n_gaussians),
        opacities=rng.uniform(0.6, 0.95, n_gaussians),
        colors=rng.uniform(0.1, 0.9, (n_gaussians, 3)),
    )
    center = gs.centers.mean(axis=0)
    focal = focal_factor * image_size
    cams = ring_cameras(n_views, center, camera_radius, camera_height, image_size, focal)
    bad = set(rng.permutation(n_views)[:corrupt_views].tolist())
    views = [_make_view(gs, cam, rng, depth_noise, edge_blur, warp_amplitude, points_per_view,
                        sparse_noise, i in bad) for i, cam in enumerate(cams)]
    test_cams = ring_cameras(n_test_views, center, camera_radius, camera_height, image_size, focal,
                             phase=np.pi / max(n_views, 1))
    test_views = [_make_view(gs, cam, rng, 0.0, 0.0, 0.0, 0, 0.0, False) for cam in test_cams]

    offsets = rng.normal(0.0, init_noise, gs.centers.shape)
    reproj = np.linalg.norm(offsets, axis=1) * focal / camera_radius
    init = SparsePointSet(gs.centers + offsets, reproj)
    params = dict(n_gaussians=n_gaussians, n_views=n_views, image_size=image_size, seed=seed,
                  n_test_views=n_test_views, depth_noise=depth_noise, edge_blur=edge_blur,
                  corrupt_views=corrupt_views, warp_amplitude=warp_amplitude, init_noise=init_noise,
                  points_per_view=points_per_view, sparse_noise=sparse_noise,
                  camera_radius=camera_radius, camera_height=camera_height, focal_factor=focal_factor,
                  scale_range=list(scale_range))
    return SyntheticScene(gs, views, init, test_views, params)
