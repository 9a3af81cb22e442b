"""Scale/shift alignment of monocular depth against projected sparse depth."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import CameraModel, Raster, SparsePointSet, check_same_shape, project_points


class InsufficientConstraintsError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"alignment objective became non-finite at step {step}")
        self.step = step


@dataclass
class AlignConfig:
    learning_rate: float = 1.0
    lr_decay: float = 0.999
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    max_steps: int = 1000
    convergence_tol: float = 1e-5
    # consecutive steps the relative change must stay below convergence_tol
    patience: int = 100
    negative_weight: float = 1.0
    prune_ratio: float = 1e-3


@dataclass
class AlignmentResult:
    scale: float
    shift: float
    aligned_depth: Raster
    alignment_loss: float
    valid_count: int
    inliers: np.ndarray
    steps: int

    def sidecar(self) -> dict:
        return {
            "scale": self.scale,
            "shift": self.shift,
            "alignment_loss": self.alignment_loss,
            "valid_count": self.valid_count,
        }


def project_sparse_depth(points: SparsePointSet, cam: CameraModel) -> tuple[Raster, Raster]:
    """Splat sparse point depths to their nearest pixel; the nearest point wins."""
    H, W = cam.height, cam.width
    target = np.zeros((H, W), dtype=np.float32)
    weights = np.zeros((H, W), dtype=np.float32)
    valid = np.zeros((H, W), dtype=bool)
    if len(points) == 0:
        return Raster(target, valid), Raster(weights, valid)
    pix, depth = project_points(cam, points.points)
    col = np.floor(pix[:, 0] + 0.5)
    row = np.floor(pix[:, 1] + 0.5)
    ok = (depth > 0) & np.isfinite(col) & np.isfinite(row)
    ok &= (col >= 0) & (col < W) & (row >= 0) & (row < H)
    idx = np.flatnonzero(ok)
    # far-to-near so the nearest point is written last
    idx = idx[np.argsort(-depth[idx], kind="stable")]
    r, c = row[idx].astype(int), col[idx].astype(int)
    target[r, c] = depth[idx]
    weights[r, c] = points.weights()[idx]
    valid[r, c] = True
    return Raster(target, valid), Raster(weights, valid.copy())


class _AffineObjective:
    """Weighted fit plus negative-depth penalty in a whitened parameterization.

    ``scale * d + shift == t_std * (a * u + b) + t_mean`` with ``u`` the
    weighted-standardized initial depth, so both coordinates have unit
    curvature.
    """

    def __init__(self, d_all, d_obs, t_obs, w_obs, neg_weight):
        wsum = w_obs.sum()
        self.d_mean = float((w_obs * d_obs).sum() / wsum)
        self.d_std = float(np.sqrt((w_obs * (d_obs - self.d_mean) ** 2).sum() / wsum)) or 1.0
        self.t_mean = float((w_obs * t_obs).sum() / wsum)
        self.t_std = float(np.sqrt((w_obs * (t_obs - self.t_mean) ** 2).sum() / wsum)) or 1.0
        self.set_observations(d_obs, t_obs, w_obs)
        self.u_all = (d_all - self.d_mean) / self.d_std
        self.neg_weight = neg_weight

    def set_observations(self, d_obs, t_obs, w_obs):
        self.u = (d_obs - self.d_mean) / self.d_std
        self.t = (t_obs - self.t_mean) / self.t_std
        self.w = w_obs

    def to_affine(self, p):
        scale = p[0] * self.t_std / self.d_std
        return scale, self.t_std * p[1] + self.t_mean - scale * self.d_mean

    def from_affine(self, scale, shift):
        a = scale * self.d_std / self.t_std
        return np.array([a, (scale * self.d_mean + shift - self.t_mean) / self.t_std])

    def __call__(self, p):
        # objective in original units (for the convergence test) and its
        # gradient w.r.t. the whitened parameters
        s2 = self.t_std ** 2
        r = self.t - (p[0] * self.u + p[1])
        fit = float(np.sum(self.w * r * r)) * s2
        g = np.array([-2 * np.sum(self.w * r * self.u), -2 * np.sum(self.w * r)]) * s2
        if self.neg_weight > 0:
            trans = p[0] * self.u_all + p[1] + self.t_mean / self.t_std
            neg = np.minimum(trans, 0.0)
            if neg.any():
                fit += self.neg_weight * float(np.sum(neg * neg)) * s2
                g += self.neg_weight * 2 * s2 * np.array([np.sum(neg * self.u_all), np.sum(neg)])
        return fit, g


def _adam_descent(obj, p, cfg: AlignConfig, state=None):
    """Run until the relative objective change stays small; returns (p, steps, state)."""
    m, v, step0 = state if state is not None else (np.zeros_like(p), np.zeros_like(p), 0)
    prev = None
    calm = 0
    k = 0
    for k in range(1, cfg.max_steps + 1):
        f, g = obj(p)
        t = step0 + k
        if not (np.isfinite(f) and np.all(np.isfinite(g))):
            raise DivergenceError(t)
        if prev is not None and abs(prev - f) <= cfg.convergence_tol * abs(prev):
            calm += 1
            if calm >= cfg.patience:
                break
        else:
            calm = 0
        prev = f
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        m_hat = m / (1 - cfg.beta1 ** t)
        v_hat = v / (1 - cfg.beta2 ** t)
        lr = cfg.learning_rate * cfg.lr_decay ** (t - 1)
        p = p - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return p, k, (m, v, step0 + k)


# overflow is reported as DivergenceError rather than as numpy warnings
@np.errstate(over="ignore", invalid="ignore")
def align_depth(initial: Raster, target: Raster, weights: Raster, cfg: AlignConfig | None = None) -> AlignmentResult:
    """Fit ``scale * initial + shift`` to sparse target depth by Adam descent.

    After the first convergence the worst ``ceil(prune_ratio * |omega|)``
    pixels by weighted squared residual are dropped once and descent
    resumes. Pruning is skipped if it would leave fewer than two pixels.
    """
    cfg = cfg or AlignConfig()
    check_same_shape(initial, target, weights)
    d = initial.plane().astype(np.float64)
    omega = target.valid & weights.valid & initial.valid
    n = int(omega.sum())
    if n < 2:
        raise InsufficientConstraintsError(f"need at least 2 constrained pixels, got {n}")
    rows, cols = np.nonzero(omega)
    d_obs = d[rows, cols]
    t_obs = target.plane()[rows, cols].astype(np.float64)
    w_obs = weights.plane()[rows, cols].astype(np.float64)
    obj = _AffineObjective(d[initial.valid], d_obs, t_obs, w_obs, cfg.negative_weight)

    p, steps, state = _adam_descent(obj, obj.from_affine(1.0, 0.0), cfg)
    keep = np.ones(n, dtype=bool)
    n_prune = math.ceil(cfg.prune_ratio * n) if cfg.prune_ratio > 0 else 0
    if n_prune and n - n_prune >= 2:
        scale, shift = obj.to_affine(p)
        resid = w_obs * (t_obs - (scale * d_obs + shift)) ** 2
        worst = np.argsort(-resid, kind="stable")[:n_prune]
        keep[worst] = False
        obj.set_observations(d_obs[keep], t_obs[keep], w_obs[keep])
        p, more, _ = _adam_descent(obj, p, cfg, state)
        steps += more

    scale, shift = obj.to_affine(p)
    resid = t_obs[keep] - (scale * d_obs[keep] + shift)
    loss = float(np.sum(w_obs[keep] * resid * resid) / keep.sum())
    inliers = np.zeros_like(omega)
    inliers[rows[keep], cols[keep]] = True
    aligned = Raster((scale * d + shift).astype(initial.data.dtype), initial.valid)
    return AlignmentResult(float(scale), float(shift), aligned, loss, int(keep.sum()), inliers, steps)
