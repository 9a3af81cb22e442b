"""Shared domain types and elementary transforms.

Quaternions are stored scalar-first, ``(w, x, y, z)``. Cameras follow the
OpenCV convention: ``x_cam = R @ x_world + T`` with +z pointing forward and
pixel coordinates measured from the center of the top-left pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

# Layout of one Gaussian inside a flat parameter vector.
PARAM_LAYOUT = (
    ("centers", 3),
    ("log_scales", 3),
    ("quats", 4),
    ("opacity_logits", 1),
    ("colors", 3),
)
PARAMS_PER_GAUSSIAN = sum(n for _, n in PARAM_LAYOUT)


class InvalidParameterError(ValueError):
    """Raised for non-finite or out-of-domain model parameters."""


class DimensionError(ValueError):
    """Raised when raster or array shapes disagree."""


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions of shape ``(..., 4)``."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def rotmat_grad_to_quat(q: np.ndarray, grad_m: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. ``quat_to_rotmat(q)`` back onto ``q`` (unit q)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = grad_m
    gw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0]
              - 2 * x * g[..., 1, 1] - w * g[..., 1, 2] + z * g[..., 2, 0]
              + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    gy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
              + x * g[..., 1, 0] + z * g[..., 1, 2] - w * g[..., 2, 0]
              + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    gz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
              + w * g[..., 1, 0] - 2 * z * g[..., 1, 1] + y * g[..., 1, 2]
              + x * g[..., 2, 0] + y * g[..., 2, 1])
    return np.stack([gw, gx, gy, gz], axis=-1)


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a * b`` (rotation ``b`` first, then ``a``)."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def covariance_from_scale_rotation(scale, rotation) -> np.ndarray:
    """Return ``M diag(s)^2 M^T`` for scale ``s`` and unit quaternion ``rotation``.

    Broadcasts over leading dimensions.
    """
    scale = np.asarray(scale, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    if not (np.all(np.isfinite(scale)) and np.all(np.isfinite(rotation))):
        raise InvalidParameterError("non-finite scale or rotation")
    if np.any(scale <= 0):
        raise InvalidParameterError("scale must be strictly positive")
    m = quat_to_rotmat(rotation)
    ms = m * (scale ** 2)[..., None, :]
    cov = ms @ np.swapaxes(m, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


@dataclass(frozen=True)
class GaussianPrimitive:
    """One anisotropic 3D Gaussian in user-facing (constrained) form."""

    center: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray

    def __post_init__(self):
        for name in ("center", "scale", "rotation", "color"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        object.__setattr__(self, "opacity", float(self.opacity))
        if self.center.shape != (3,) or self.scale.shape != (3,) or self.color.shape != (3,):
            raise DimensionError("center, scale and color must be 3-vectors")
        if self.rotation.shape != (4,):
            raise DimensionError("rotation must be a 4-vector quaternion")
        values = np.concatenate([self.center, self.scale, self.rotation, self.color, [self.opacity]])
        if not np.all(np.isfinite(values)):
            raise InvalidParameterError("non-finite Gaussian parameter")
        if np.any(self.scale <= 0):
            raise InvalidParameterError("scale must be strictly positive")
        if not 0.0 <= self.opacity <= 1.0:
            raise InvalidParameterError("opacity must lie in [0, 1]")
        n = np.linalg.norm(self.rotation)
        if n == 0:
            raise InvalidParameterError("zero quaternion")
        object.__setattr__(self, "rotation", self.rotation / n)

    @property
    def covariance(self) -> np.ndarray:
        return covariance_from_scale_rotation(self.scale, self.rotation)


@dataclass
class GaussianSet:
    """Struct-of-arrays Gaussian parameters in unconstrained (optimizer) form.

    ``log_scales`` and ``opacity_logits`` are pre-activation values; ``quats``
    may drift off the unit sphere between optimizer steps and are normalized
    on read.
    """

    centers: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        n = len(self.centers)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)

    def __len__(self) -> int:
        return len(self.centers)

    @classmethod
    def empty(cls) -> "GaussianSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_primitives(cls, prims: Iterable[GaussianPrimitive]) -> "GaussianSet":
        prims = list(prims)
        if not prims:
            return cls.empty()
        with np.errstate(divide="ignore"):
            return cls(
                centers=np.stack([p.center for p in prims]),
                log_scales=np.log(np.stack([p.scale for p in prims])),
                quats=np.stack([p.rotation for p in prims]),
                opacity_logits=logit(np.clip([p.opacity for p in prims], 1e-12, 1 - 1e-12)),
                colors=np.stack([p.color for p in prims]),
            )

    @classmethod
    def from_arrays(cls, centers, scales, quats, opacities, colors) -> "GaussianSet":
        """Build from constrained values (positive scales, opacities in (0, 1))."""
        return cls(
            centers=centers,
            log_scales=np.log(np.asarray(scales, dtype=np.float64)),
            quats=quats,
            opacity_logits=logit(np.clip(opacities, 1e-12, 1 - 1e-12)),
            colors=colors,
        )

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def unit_quats(self) -> np.ndarray:
        return self.quats / np.linalg.norm(self.quats, axis=1, keepdims=True)

    def to_primitives(self) -> list[GaussianPrimitive]:
        scales, quats, ops = self.scales, self.unit_quats, self.opacities
        return [
            GaussianPrimitive(self.centers[i], scales[i], quats[i], ops[i], self.colors[i])
            for i in range(len(self))
        ]

    def copy(self) -> "GaussianSet":
        return GaussianSet(self.centers.copy(), self.log_scales.copy(), self.quats.copy(),
                           self.opacity_logits.copy(), self.colors.copy())

    def subset(self, keep) -> "GaussianSet":
        return GaussianSet(self.centers[keep], self.log_scales[keep], self.quats[keep],
                           self.opacity_logits[keep], self.colors[keep])

    def normalize_quats(self) -> None:
        self.quats = self.unit_quats

    def check_finite(self) -> None:
        for name, _ in PARAM_LAYOUT:
            arr = getattr(self, name)
            bad = ~np.isfinite(arr.reshape(len(self), -1 if len(self) else 1)).all(axis=1)
            if bad.any():
                raise InvalidParameterError(f"non-finite {name} for Gaussian {int(np.argmax(bad))}")

    def pack(self) -> np.ndarray:
        """Flatten to a ``(N * 14,)`` vector, one contiguous block per Gaussian."""
        cols = [getattr(self, name).reshape(len(self), n) for name, n in PARAM_LAYOUT]
        return np.concatenate(cols, axis=1).reshape(-1)

    @classmethod
    def unpack(cls, vec) -> "GaussianSet":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size % PARAMS_PER_GAUSSIAN:
            raise DimensionError(f"parameter vector length {vec.size} is not a multiple of {PARAMS_PER_GAUSSIAN}")
        block = vec.reshape(-1, PARAMS_PER_GAUSSIAN)
        out, col = {}, 0
        for name, n in PARAM_LAYOUT:
            out[name] = block[:, col:col + n].copy()
            col += n
        return cls(**out)


def as_gaussian_set(gaussians) -> GaussianSet:
    if isinstance(gaussians, GaussianSet):
        return gaussians
    return GaussianSet.from_primitives(gaussians)


@dataclass(frozen=True)
class CameraModel:
    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise InvalidParameterError("camera width and height must be positive")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if np.max(np.abs(r.T @ r - np.eye(3))) >= 1e-9:
            raise InvalidParameterError("camera rotation is not orthonormal")
        if k[1, 0] != 0 or k[2, 0] != 0 or k[2, 1] != 0 or k[2, 2] != 1:
            raise InvalidParameterError("intrinsics must be upper-triangular with K[2, 2] = 1")
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise InvalidParameterError("focal lengths must be positive")

    @classmethod
    def look_at(cls, eye, target, focal: float, width: int, height: int, up=(0.0, 0.0, 1.0),
                focal_y: float | None = None) -> "CameraModel":
        """Pinhole camera at ``eye`` looking at ``target`` (image y points along -up)."""
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-12:
            right = np.cross(fwd, [1.0, 0.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        r = np.stack([right, down, fwd])
        k = np.array([[focal, 0.0, (width - 1) / 2],
                      [0.0, focal if focal_y is None else focal_y, (height - 1) / 2],
                      [0.0, 0.0, 1.0]])
        return cls(k, r, -r @ eye, width, height)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def to_dict(self) -> dict:
        return {
            "K": self.intrinsics.reshape(-1).tolist(),
            "R": self.rotation.reshape(-1).tolist(),
            "T": self.translation.tolist(),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(np.reshape(d["K"], (3, 3)), np.reshape(d["R"], (3, 3)), d["T"], d["width"], d["height"])


def project_point(camera: CameraModel, point) -> tuple[np.ndarray | None, float]:
    """Project one world point.

    Returns ``(pixel, depth)``; ``pixel`` is None when the camera-space depth
    is within 1e-12 of zero. Points behind the camera still get a pixel (the
    perspective division flips them) so callers must check ``depth``.
    """
    point = np.asarray(point, dtype=np.float64)
    if point.shape != (3,) or not np.all(np.isfinite(point)):
        raise InvalidParameterError("point must be a finite 3-vector")
    cam = camera.to_camera(point)
    depth = float(cam[2])
    if abs(depth) < 1e-12:
        return None, depth
    uvw = camera.intrinsics @ cam
    return uvw[:2] / uvw[2], depth


def project_points(camera: CameraModel, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`project_point`; degenerate depths yield NaN pixels."""
    cam = camera.to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    depth = cam[:, 2]
    uvw = cam @ camera.intrinsics.T
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = uvw[:, :2] / uvw[:, 2:3]
    pix[np.abs(depth) < 1e-12] = np.nan
    return pix, depth


@dataclass
class Raster:
    """Per-pixel image buffer of shape ``(H, W, C)`` with an ``(H, W)`` validity mask.

    Invalid pixels are forced to 0. The dtype is preserved so renderer
    outputs stay float64; file I/O stores float32.
    """

    data: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        data = np.asarray(self.data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise DimensionError(f"raster data must be (H, W[, 1|3]), got {data.shape}")
        if self.valid is None:
            valid = np.ones(data.shape[:2], dtype=bool)
        else:
            valid = np.asarray(self.valid, dtype=bool)
            if valid.shape != data.shape[:2]:
                raise DimensionError("validity mask shape does not match raster")
        if not valid.all():
            data = np.where(valid[:, :, None], data, 0).astype(data.dtype)
        self.data = data
        self.valid = valid

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    def plane(self) -> np.ndarray:
        """Single-channel data as ``(H, W)``."""
        if self.channels != 1:
            raise DimensionError("raster has more than one channel")
        return self.data[:, :, 0]

    def luma(self) -> np.ndarray:
        if self.channels == 1:
            return self.data[:, :, 0].astype(np.float64)
        d = self.data.astype(np.float64)
        return 0.299 * d[:, :, 0] + 0.587 * d[:, :, 1] + 0.114 * d[:, :, 2]

    @classmethod
    def zeros(cls, height: int, width: int, channels: int = 1, dtype=np.float64) -> "Raster":
        return cls(np.zeros((height, width, channels), dtype=dtype))


def check_same_shape(*rasters: Raster) -> None:
    shapes = {r.shape for r in rasters}
    if len(shapes) > 1:
        raise DimensionError(f"raster dimensions differ: {sorted(shapes)}")


@dataclass(frozen=True)
class SparsePointSet:
    points: np.ndarray
    reproj_error: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if self.reproj_error is not None:
            err = np.asarray(self.reproj_error, dtype=np.float64).reshape(-1)
            if len(err) != len(pts):
                raise DimensionError("reproj_error length differs from point count")
            if np.any(err < 0) or not np.all(np.isfinite(err)):
                raise InvalidParameterError("reproj_error must be finite and non-negative")
            object.__setattr__(self, "reproj_error", err)

    def __len__(self) -> int:
        return len(self.points)

    def weights(self) -> np.ndarray:
        """Per-point alignment weights ``1 / (1 + reproj_error)``."""
        if self.reproj_error is None:
            return np.ones(len(self))
        return 1.0 / (1.0 + self.reproj_error)


def bounding_diagonal(points: Sequence) -> float:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
