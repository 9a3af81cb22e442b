"""Differentiable CPU splatting of color and normalized depth.

Every Gaussian that survives culling is evaluated at every pixel center
(no tiles), sorted once per view front-to-back. The per-pixel effective
opacity is ``min(o * exp(-0.5 d^T conic d), 0.99)`` and blending stops once
the transmittance in front of a Gaussian drops below 1e-4.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    CameraModel,
    DimensionError,
    GaussianPrimitive,
    GaussianSet,
    Raster,
    as_gaussian_set,
    quat_to_rotmat,
    rotmat_grad_to_quat,
    sigmoid,
)

NEAR_PLANE = 0.01
DILATION = 0.3
MAX_ALPHA = 0.99
MIN_TRANSMITTANCE = 1e-4
COVERAGE_FLOOR = 1e-6
# upper bound on pixels x Gaussians per work chunk
CHUNK_ELEMENTS = 1 << 18


@dataclass(frozen=True)
class ProjectedGaussian:
    pixel_mean: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float
    color: np.ndarray


@dataclass
class RenderOutput:
    color: Raster
    depth: Raster
    alpha_sum: Raster
    # transmittance left behind the last blended Gaussian, per pixel
    final_transmittance: np.ndarray


@dataclass
class GaussianGrads:
    """Loss gradients w.r.t. the unconstrained parameters of a GaussianSet."""

    centers: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GaussianGrads":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n), np.zeros((n, 3)))

    def pack(self) -> np.ndarray:
        return GaussianSet(self.centers, self.log_scales, self.quats,
                           self.opacity_logits, self.colors).pack()


@dataclass
class _Projection:
    # all arrays indexed by Gaussian (N = all Gaussians, culled included)
    visible: np.ndarray
    cam_points: np.ndarray
    mean2d: np.ndarray
    jac: np.ndarray
    cov3d: np.ndarray
    rotmats: np.ndarray
    unit_quats: np.ndarray
    scales: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    opacities: np.ndarray


def _project_all(gs: GaussianSet, cam: CameraModel) -> _Projection:
    n = len(gs)
    R, K = cam.rotation, cam.intrinsics
    A = K[:2, :2]
    t = gs.centers @ R.T + cam.translation
    tz = t[:, 2]
    in_front = tz > NEAR_PLANE
    tz_safe = np.where(in_front, tz, 1.0)
    xy = t[:, :2] / tz_safe[:, None]
    mean2d = xy @ A.T + K[:2, 2]
    jac = np.zeros((n, 2, 3))
    jac[:, :, :2] = A[None] / tz_safe[:, None, None]
    jac[:, :, 2] = -(xy @ A.T) / tz_safe[:, None]

    q = gs.unit_quats
    M = quat_to_rotmat(q)
    s = gs.scales
    cov3d = (M * (s ** 2)[:, None, :]) @ np.swapaxes(M, 1, 2)
    V = jac @ R
    cov2d = V @ cov3d @ np.swapaxes(V, 1, 2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, 1, 2)) + DILATION * np.eye(2)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)

    half_tr = 0.5 * (a + c)
    lam_max = half_tr + np.sqrt(np.maximum(half_tr ** 2 - det, 0.0))
    radius = 3.0 * np.sqrt(lam_max)
    on_screen = (
        (mean2d[:, 0] + radius >= -0.5) & (mean2d[:, 0] - radius <= cam.width - 0.5)
        & (mean2d[:, 1] + radius >= -0.5) & (mean2d[:, 1] - radius <= cam.height - 0.5)
    )
    return _Projection(
        visible=in_front & on_screen, cam_points=t, mean2d=mean2d, jac=jac, cov3d=cov3d,
        rotmats=M, unit_quats=q, scales=s, cov2d=cov2d, conic=conic, opacities=gs.opacities,
    )


def project_gaussian(g: GaussianPrimitive, cam: CameraModel) -> ProjectedGaussian | None:
    """EWA projection of one Gaussian; None when it is culled."""
    p = _project_all(GaussianSet.from_primitives([g]), cam)
    if not p.visible[0]:
        return None
    return ProjectedGaussian(p.mean2d[0].copy(), p.cov2d[0].copy(), float(p.cam_points[0, 2]),
                             g.opacity, g.color.copy())


def _draw_order(proj: _Projection) -> np.ndarray:
    idx = np.flatnonzero(proj.visible)
    return idx[np.argsort(proj.cam_points[idx, 2], kind="stable")]


def _chunk_terms(proj, order, colors, cam, r0, r1):
    """Per-pixel, per-Gaussian blending terms for image rows ``[r0, r1)``."""
    ys, xs = np.mgrid[r0:r1, 0:cam.width]
    px = xs.reshape(-1).astype(np.float64)
    py = ys.reshape(-1).astype(np.float64)
    m = proj.mean2d[order]
    con = proj.conic[order]
    dx = px[:, None] - m[None, :, 0]
    dy = py[:, None] - m[None, :, 1]
    power = -0.5 * (con[:, 0] * dx * dx + con[:, 2] * dy * dy) - con[:, 1] * dx * dy
    gauss = np.exp(np.minimum(power, 0.0))
    raw = proj.opacities[order][None, :] * gauss
    alpha = np.minimum(raw, MAX_ALPHA)
    one_minus = 1.0 - alpha
    trans = np.ones_like(alpha)
    if alpha.shape[1] > 1:
        trans[:, 1:] = np.cumprod(one_minus[:, :-1], axis=1)
    included = trans >= MIN_TRANSMITTANCE
    weight = alpha * trans * included
    return dict(dx=dx, dy=dy, gauss=gauss, raw=raw, alpha=alpha, trans=trans,
                included=included, weight=weight)


def _row_chunks(cam: CameraModel, n_drawn: int):
    # bound the per-chunk (pixels x Gaussians) work arrays; fixed for a given
    # image and Gaussian count so results do not depend on the machine
    rows = max(1, min(cam.height, CHUNK_ELEMENTS // max(1, cam.width * n_drawn)))
    return [(r0, min(cam.height, r0 + rows)) for r0 in range(0, cam.height, rows)]


def _forward(gs: GaussianSet, cam: CameraModel, keep_terms: bool = False):
    gs.check_finite()
    proj = _project_all(gs, cam)
    order = _draw_order(proj)
    H, W = cam.height, cam.width
    color = np.zeros((H, W, 3))
    alpha_sum = np.zeros((H, W))
    depth_num = np.zeros((H, W))
    t_final = np.ones((H, W))
    colors = gs.colors[order]
    depths = proj.cam_points[order, 2]
    cache = [] if keep_terms else None
    for r0, r1 in _row_chunks(cam, len(order)):
        if len(order) == 0:
            continue
        terms = _chunk_terms(proj, order, colors, cam, r0, r1)
        if keep_terms:
            cache.append(terms)
        w = terms["weight"]
        color[r0:r1] = (w @ colors).reshape(r1 - r0, W, 3)
        alpha_sum[r0:r1] = w.sum(axis=1).reshape(r1 - r0, W)
        depth_num[r0:r1] = (w @ depths).reshape(r1 - r0, W)
        kept = np.where(terms["included"], 1.0 - terms["alpha"], 1.0)
        t_final[r0:r1] = np.prod(kept, axis=1).reshape(r1 - r0, W)
    valid = alpha_sum > COVERAGE_FLOOR
    depth = np.where(valid, depth_num / np.where(valid, alpha_sum, 1.0), 0.0)
    out = RenderOutput(
        color=Raster(color),
        depth=Raster(depth, valid),
        alpha_sum=Raster(alpha_sum),
        final_transmittance=t_final,
    )
    return out, proj, order, cache


def render(gaussians, cam: CameraModel) -> RenderOutput:
    """Render color, normalized depth and accumulated opacity for one view.

    ``gaussians`` is a :class:`GaussianSet` or a sequence of
    :class:`GaussianPrimitive`.
    """
    out = _forward(as_gaussian_set(gaussians), cam)[0]
    return out


def _backward(gs, cam, out, proj, order, grad_color: np.ndarray, grad_depth: np.ndarray,
              cache=None) -> GaussianGrads:
    n = len(gs)
    grads = GaussianGrads.zeros(n)
    if len(order) == 0:
        return grads
    H, W = cam.height, cam.width
    colors = gs.colors[order]
    depths = proj.cam_points[order, 2]
    con = proj.conic[order]
    ops = proj.opacities[order]
    valid = out.depth.valid
    a_sum = out.alpha_sum.plane()
    dvals = out.depth.plane()

    m = len(order)
    g_color = np.zeros((m, 3))
    g_depth = np.zeros(m)
    g_opacity = np.zeros(m)
    g_mean = np.zeros((m, 2))
    g_conic = np.zeros((m, 3))
    for k, (r0, r1) in enumerate(_row_chunks(cam, m)):
        gc = grad_color[r0:r1].reshape(-1, 3)
        v = valid[r0:r1].reshape(-1)
        gd = np.where(v, grad_depth[r0:r1].reshape(-1), 0.0)
        if not (gc.any() or gd.any()):
            continue
        asum = np.where(v, a_sum[r0:r1].reshape(-1), 1.0)
        g_num = gd / asum
        g_den = -gd * dvals[r0:r1].reshape(-1) / asum

        t = cache[k] if cache is not None else _chunk_terms(proj, order, colors, cam, r0, r1)
        w = t["weight"]
        # d loss / d weight_j for each pixel
        gw = gc @ colors.T + g_num[:, None] * depths[None, :] + g_den[:, None]
        g_color += w.T @ gc
        g_depth += w.T @ g_num
        contrib = gw * w
        behind = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
        g_alpha = t["included"] * (t["trans"] * gw - behind / (1.0 - t["alpha"]))
        g_raw = g_alpha * (t["raw"] < MAX_ALPHA)
        g_opacity += np.sum(g_raw * t["gauss"], axis=0)
        g_power = g_raw * ops[None, :] * t["gauss"]
        dx, dy = t["dx"], t["dy"]
        g_conic[:, 0] += np.sum(-0.5 * dx * dx * g_power, axis=0)
        g_conic[:, 1] += np.sum(-dx * dy * g_power, axis=0)
        g_conic[:, 2] += np.sum(-0.5 * dy * dy * g_power, axis=0)
        g_mean[:, 0] += np.sum(g_power * (con[:, 0] * dx + con[:, 1] * dy), axis=0)
        g_mean[:, 1] += np.sum(g_power * (con[:, 1] * dx + con[:, 2] * dy), axis=0)

    # conic -> 2D covariance (conic b appears twice in the quadratic form)
    a, b, c = con[:, 0], con[:, 1], con[:, 2]
    inv = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    g_inv = np.stack([np.stack([g_conic[:, 0], 0.5 * g_conic[:, 1]], -1),
                      np.stack([0.5 * g_conic[:, 1], g_conic[:, 2]], -1)], -2)
    g_cov2d = -inv @ g_inv @ inv

    R = cam.rotation
    A = cam.intrinsics[:2, :2]
    jac = proj.jac[order]
    V = jac @ R
    cov3d = proj.cov3d[order]
    g_cov3d = np.swapaxes(V, 1, 2) @ g_cov2d @ V
    g_V = 2.0 * g_cov2d @ V @ cov3d
    g_jac = g_V @ R.T

    tpts = proj.cam_points[order]
    tz = tpts[:, 2]
    g_t = np.einsum("nij,ni->nj", jac, g_mean)
    g_t[:, 0] += np.sum(g_jac[:, :, 2] * -A[None, :, 0], axis=1) / tz ** 2
    g_t[:, 1] += np.sum(g_jac[:, :, 2] * -A[None, :, 1], axis=1) / tz ** 2
    a_txy = tpts[:, :2] @ A.T
    g_t[:, 2] += (np.sum(g_jac[:, :, :2] * -A[None], axis=(1, 2)) / tz ** 2
                  + np.sum(g_jac[:, :, 2] * 2.0 * a_txy, axis=1) / tz ** 3)
    g_t[:, 2] += g_depth
    grads.centers[order] = g_t @ R

    M = proj.rotmats[order]
    s2 = proj.scales[order] ** 2
    g_M = 2.0 * g_cov3d @ M * s2[:, None, :]
    grads.log_scales[order] = 2.0 * s2 * np.einsum("nji,njk,nki->ni", M, g_cov3d, M)
    qhat = proj.unit_quats[order]
    g_qhat = rotmat_grad_to_quat(qhat, g_M)
    norms = np.linalg.norm(gs.quats[order], axis=1, keepdims=True)
    grads.quats[order] = (g_qhat - qhat * np.sum(qhat * g_qhat, axis=1, keepdims=True)) / norms
    grads.opacity_logits[order] = g_opacity * ops * (1.0 - ops)
    grads.colors[order] = g_color
    return grads


def _cotangent(r, cam, channels, name) -> np.ndarray:
    if r is None:
        return np.zeros((cam.height, cam.width, channels))
    data = r.data if isinstance(r, Raster) else np.asarray(r)
    if data.ndim == 2:
        data = data[:, :, None]
    if data.shape != (cam.height, cam.width, channels):
        raise DimensionError(f"{name} has shape {data.shape}, expected {(cam.height, cam.width, channels)}")
    return data.astype(np.float64)


def render_backward(gaussians, cam: CameraModel, grad_color, grad_depth) -> GaussianGrads:
    """Gradients of a scalar loss w.r.t. all Gaussian parameters.

    ``grad_color`` (H, W, 3) and ``grad_depth`` (H, W) are the loss
    cotangents of the rendered color and depth. The forward pass is
    recomputed; depth cotangents at invalid depth pixels are ignored.
    """
    gs = as_gaussian_set(gaussians)
    out, proj, order, _ = _forward(gs, cam)
    gc = _cotangent(grad_color, cam, 3, "grad_color")
    gd = _cotangent(grad_depth, cam, 1, "grad_depth")[:, :, 0]
    return _backward(gs, cam, out, proj, order, gc, gd)


class RenderPass:
    """Forward render that keeps what the backward pass needs."""

    def __init__(self, gaussians, cam: CameraModel):
        self.gaussians = as_gaussian_set(gaussians)
        self.cam = cam
        self.output, self._proj, self._order, self._terms = _forward(self.gaussians, cam, keep_terms=True)

    def backward(self, grad_color, grad_depth) -> GaussianGrads:
        gc = _cotangent(grad_color, self.cam, 3, "grad_color")
        gd = _cotangent(grad_depth, self.cam, 1, "grad_depth")[:, :, 0]
        return _backward(self.gaussians, self.cam, self.output, self._proj, self._order, gc, gd,
                         self._terms)


__all__ = [
    "ProjectedGaussian", "RenderOutput", "GaussianGrads", "RenderPass",
    "project_gaussian", "render", "render_backward", "sigmoid",
]
