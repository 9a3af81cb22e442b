"""Image-quality and point-cloud geometric metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import DimensionError, GaussianSet, bounding_diagonal
from .losses import LossConfig, _as_hwc
from .losses import ssim as _ssim


class UndefinedMetricError(ValueError):
    pass


def psnr(pred, gt) -> float:
    """PSNR in dB for images in [0, 1]; ``inf`` when they are identical."""
    p, g = _as_hwc(pred), _as_hwc(gt)
    if p.shape != g.shape:
        raise DimensionError(f"image shapes differ: {p.shape} vs {g.shape}")
    mse = float(np.mean((p - g) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def ssim(pred, gt, cfg: LossConfig | None = None) -> float:
    return _ssim(pred, gt, cfg)


@dataclass
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise DimensionError("normals and points differ in length")
            if np.any(np.abs(np.linalg.norm(self.normals, axis=1) - 1) > 1e-6):
                raise ValueError("normals must be unit length")

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, matrix) -> "PointCloud":
        """Apply a 4x4 (or 3x4) affine transform; normals get the linear part."""
        mat = np.asarray(matrix, dtype=np.float64)
        lin, off = mat[:3, :3], mat[:3, 3]
        pts = self.points @ lin.T + off
        nrm = None
        if self.normals is not None:
            nrm = self.normals @ np.linalg.inv(lin)
            nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        return PointCloud(pts, nrm)


def gaussian_point_cloud(gs: GaussianSet, min_opacity: float = 0.5) -> PointCloud:
    """Centers of Gaussians whose opacity exceeds ``min_opacity``."""
    return PointCloud(gs.centers[gs.opacities > min_opacity])


@dataclass
class GeometricReport:
    threshold: float
    precision: float
    recall: float
    fscore_percent: float

    def to_dict(self) -> dict:
        return dict(threshold=self.threshold, precision=self.precision,
                    recall=self.recall, fscore_percent=self.fscore_percent)


def nearest_distances(query, reference) -> np.ndarray:
    return cKDTree(np.asarray(reference, dtype=np.float64)).query(np.asarray(query, dtype=np.float64), k=1)[0]


def fscore(reconstructed: PointCloud, truth: PointCloud, threshold: float) -> GeometricReport:
    """Precision/recall of nearest-neighbor distances below ``threshold``."""
    if len(reconstructed) == 0 or len(truth) == 0:
        raise UndefinedMetricError("F-score needs two non-empty clouds")
    precision = float(np.mean(nearest_distances(reconstructed.points, truth.points) < threshold))
    recall = float(np.mean(nearest_distances(truth.points, reconstructed.points) < threshold))
    f = 200.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return GeometricReport(float(threshold), precision, recall, f)


def default_threshold(truth: PointCloud) -> float:
    return bounding_diagonal(truth.points) / 500.0


@dataclass
class M3C2Result:
    core_points: np.ndarray
    normals: np.ndarray
    distances: np.ndarray  # NaN where invalid
    rmse: float

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.distances)


def mean_spacing(points) -> float:
    pts = np.asarray(points, dtype=np.float64)
    d, _ = cKDTree(pts).query(pts, k=2)
    return float(np.mean(d[:, 1]))


def estimate_normals(cloud: np.ndarray, cores: np.ndarray, radius: float, tree=None,
                     orient=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Plane-fit normals at ``cores`` from neighbors within ``radius``.

    Rows are NaN where fewer than 3 neighbors exist or the neighborhood is
    (near-)collinear. Normals are oriented to have a non-negative dot
    product with ``orient``.
    """
    tree = tree or cKDTree(cloud)
    orient = np.asarray(orient, dtype=np.float64)
    out = np.full((len(cores), 3), np.nan)
    for i, nb in enumerate(tree.query_ball_point(cores, radius)):
        if len(nb) < 3:
            continue
        pts = cloud[nb]
        centered = pts - pts.mean(axis=0)
        _, sv, vt = np.linalg.svd(centered, full_matrices=False)
        if len(sv) < 2 or sv[1] <= 1e-9 * max(sv[0], 1e-300):
            continue
        n = vt[-1]
        if n @ orient < 0:
            n = -n
        out[i] = n
    return out


def _cylinder_mean(cloud, tree, core, normal, radius, max_depth):
    reach = np.hypot(radius, max_depth)
    idx = tree.query_ball_point(core, reach)
    if not idx:
        return np.nan
    rel = cloud[idx] - core
    along = rel @ normal
    perp = np.linalg.norm(rel - np.outer(along, normal), axis=1)
    inside = (perp <= radius) & (np.abs(along) <= max_depth)
    if not inside.any():
        return np.nan
    return float(np.mean(along[inside]))


def m3c2(reference: PointCloud, compared: PointCloud, normal_scale: float | None = None,
         cylinder_radius: float | None = None, max_depth: float | None = None,
         core_step: int = 1, orient=(0.0, 0.0, 1.0), normals=None) -> M3C2Result:
    """Signed M3C2 distances from ``reference`` to ``compared``.

    Core points are every ``core_step``-th reference point. Normals are
    fitted on the reference within ``normal_scale / 2`` unless given.
    Defaults: ``normal_scale`` = 20x mean reference spacing, cylinder
    radius ``normal_scale / 2``, ``max_depth`` = 5x ``normal_scale``.
    """
    ref, cmp_ = reference.points, compared.points
    if len(ref) == 0 or len(cmp_) == 0:
        raise UndefinedMetricError("M3C2 needs two non-empty clouds")
    if normal_scale is None:
        normal_scale = 20.0 * mean_spacing(ref)
    if cylinder_radius is None:
        cylinder_radius = normal_scale / 2.0
    if max_depth is None:
        max_depth = 5.0 * normal_scale
    cores = ref[::core_step]
    ref_tree, cmp_tree = cKDTree(ref), cKDTree(cmp_)
    if normals is None:
        normals = estimate_normals(ref, cores, normal_scale / 2.0, ref_tree, orient)
    else:
        normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)[::core_step] if len(normals) == len(ref) \
            else np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    dist = np.full(len(cores), np.nan)
    for i, (c, n) in enumerate(zip(cores, normals)):
        if not np.all(np.isfinite(n)):
            continue
        m_ref = _cylinder_mean(ref, ref_tree, c, n, cylinder_radius, max_depth)
        m_cmp = _cylinder_mean(cmp_, cmp_tree, c, n, cylinder_radius, max_depth)
        dist[i] = m_cmp - m_ref
    ok = np.isfinite(dist)
    rmse = float(np.sqrt(np.mean(dist[ok] ** 2))) if ok.any() else float("nan")
    return M3C2Result(cores, normals, dist, rmse)
