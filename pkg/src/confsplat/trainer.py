"""Optimization loop: render, confidence-weighted depth loss, Adam update."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import CameraModel, GaussianSet, InvalidParameterError, Raster, SparsePointSet, logit
from .losses import LossConfig, adaptive_weight, depth_loss, image_loss, total_loss
from .metrics import psnr
from .optim import Adam
from .render import RenderPass

log = logging.getLogger(__name__)

PARAM_GROUPS = ("centers", "log_scales", "quats", "opacity_logits", "colors")
HISTORY_FIELDS = ("iteration", "image_loss", "depth_loss", "lambda_d", "total_loss", "psnr_train")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 2000
    lr_center: float = 1.6e-4
    lr_center_final: float = 1.6e-6
    # multiplies both center rates; the usual choice is the scene extent
    center_lr_scale: float = 1.0
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    prune_opacity_below: float = 0.005
    prune_every: int = 500
    seed: int = 0
    # False trains on the image loss alone
    depth_supervision: bool = True
    # False replaces the confidence map by ones
    use_confidence: bool = True
    # "adaptive" (lambda_max * exp(-k * l_a)) or "fixed" (always lambda_max)
    depth_weighting: str = "adaptive"
    # multiplies the 3-NN initial scale (used by callers of init_from_sparse)
    init_scale_factor: float = 1.0

    def __post_init__(self):
        rates = (self.lr_center, self.lr_center_final, self.center_lr_scale, self.lr_color,
                 self.lr_opacity, self.lr_scale, self.lr_rotation, self.init_scale_factor)
        if any(r <= 0 for r in rates):
            raise InvalidParameterError("learning rates must be positive")
        if self.iterations <= 0:
            raise InvalidParameterError("iterations must be positive")
        if self.depth_weighting not in ("adaptive", "fixed"):
            raise InvalidParameterError(f"unknown depth_weighting {self.depth_weighting!r}")

    def center_lr(self, iteration: int) -> float:
        """Log-linear decay from ``lr_center`` to ``lr_center_final``."""
        frac = min(max(iteration / self.iterations, 0.0), 1.0)
        lr = math.exp((1 - frac) * math.log(self.lr_center) + frac * math.log(self.lr_center_final))
        return lr * self.center_lr_scale


@dataclass
class TrainView:
    image: Raster
    camera: CameraModel
    aligned_depth: Raster | None = None
    confidence: Raster | None = None
    alignment_loss: float = 0.0


@dataclass
class TrainState:
    gaussians: GaussianSet
    optimizer: Adam
    iteration: int = 0
    history: list[dict] = field(default_factory=list)

    def write_history(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
            w.writeheader()
            for rec in self.history:
                w.writerow({k: repr(rec[k]) if isinstance(rec[k], float) else rec[k] for k in HISTORY_FIELDS})


def init_from_sparse(points: SparsePointSet | np.ndarray, colors=None, opacity: float = 0.1,
                     fallback_scale: float = 0.01, scale_factor: float = 1.0) -> GaussianSet:
    """One isotropic Gaussian per point, sized by the mean 3-NN distance.

    ``scale_factor`` multiplies that distance; very sparse clouds (a few
    points per object) start less blurred with a factor below one.
    """
    if scale_factor <= 0:
        raise InvalidParameterError("scale_factor must be positive")
    pts = points.points if isinstance(points, SparsePointSet) else np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        raise InvalidParameterError("cannot initialize from an empty point set")
    if n < 4:
        scale = np.full(n, fallback_scale)
    else:
        d, _ = cKDTree(pts).query(pts, k=4)
        scale = np.maximum(scale_factor * d[:, 1:].mean(axis=1), 1e-7)
    if colors is None:
        cols = np.full((n, 3), 0.5)
    else:
        cols = np.asarray(colors, dtype=np.float64).reshape(n, 3)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return GaussianSet(
        centers=pts.copy(),
        log_scales=np.repeat(np.log(scale)[:, None], 3, axis=1),
        quats=quats,
        opacity_logits=np.full(n, float(logit(opacity))),
        colors=cols,
    )


def _params(gs: GaussianSet) -> dict[str, np.ndarray]:
    return {k: getattr(gs, k) for k in PARAM_GROUPS}


def make_state(gaussians: GaussianSet, cfg: TrainConfig) -> TrainState:
    gs = gaussians.copy()
    lrs = dict(centers=cfg.center_lr(0), log_scales=cfg.lr_scale, quats=cfg.lr_rotation,
               opacity_logits=cfg.lr_opacity, colors=cfg.lr_color)
    opt = Adam(_params(gs), lrs, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    return TrainState(gs, opt)


def view_schedule(n_views: int, iterations: int, seed: int) -> np.ndarray:
    """Seeded epoch-wise shuffle of view indices, one per iteration."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < iterations:
        out.extend(rng.permutation(n_views).tolist())
    return np.asarray(out[:iterations])


def depth_lambda(view: TrainView, cfg: TrainConfig, loss_cfg: LossConfig) -> float:
    if not cfg.depth_supervision or view.aligned_depth is None:
        return 0.0
    if cfg.depth_weighting == "fixed":
        return float(loss_cfg.lambda_max)
    return adaptive_weight(view.alignment_loss, loss_cfg)


def train_step(state: TrainState, view: TrainView, cfg: TrainConfig, loss_cfg: LossConfig) -> dict:
    """One forward/backward/update on ``view``; returns the history record."""
    gs = state.gaussians
    it = state.iteration + 1
    rp = RenderPass(gs, view.camera)
    pred = rp.output.color
    img_val, img_grad = image_loss(pred, view.image, loss_cfg)

    lam = depth_lambda(view, cfg, loss_cfg)
    d_val = 0.0
    grad_depth = None
    if cfg.depth_supervision and view.aligned_depth is not None:
        conf = view.confidence
        if conf is None or not cfg.use_confidence:
            conf = Raster(np.ones(view.aligned_depth.shape), view.aligned_depth.valid)
        dres = depth_loss(rp.output.depth, view.aligned_depth, conf)
        d_val = dres.value
        if not dres.empty:
            grad_depth = lam * dres.grad
    total = total_loss(img_val, d_val, lam)
    for name, value in (("image", img_val), ("depth", d_val), ("total", total)):
        if not np.isfinite(value):
            raise TrainingError(f"non-finite {name} loss at iteration {it}")

    grads = rp.backward(img_grad, grad_depth)
    state.optimizer.lrs["centers"] = cfg.center_lr(it - 1)
    state.optimizer.step(_params(gs), {k: getattr(grads, k) for k in PARAM_GROUPS})
    gs.normalize_quats()
    np.clip(gs.colors, 0.0, 1.0, out=gs.colors)
    state.iteration = it

    if cfg.prune_every and it % cfg.prune_every == 0 and it < cfg.iterations:
        keep = gs.opacities >= cfg.prune_opacity_below
        if not keep.all():
            state.gaussians = gs.subset(keep)
            state.optimizer.keep_rows(keep)
            log.info("iteration %d: pruned %d Gaussians", it, int((~keep).sum()))
        if len(state.gaussians) == 0:
            raise TrainingError(f"all Gaussians pruned at iteration {it}")

    rec = dict(iteration=it, image_loss=float(img_val), depth_loss=float(d_val), lambda_d=float(lam),
               total_loss=float(total), psnr_train=float(psnr(pred, view.image)))
    state.history.append(rec)
    return rec


def train(views: Sequence[TrainView], cfg: TrainConfig, init: GaussianSet,
          loss_cfg: LossConfig | None = None,
          callback: Callable[[TrainState], None] | None = None) -> TrainState:
    """Optimize ``init`` against ``views``; ``callback`` runs after every step."""
    if not views:
        raise InvalidParameterError("need at least one view")
    loss_cfg = loss_cfg or LossConfig()
    state = make_state(init, cfg)
    order = view_schedule(len(views), cfg.iterations, cfg.seed)
    for it in range(cfg.iterations):
        train_step(state, views[order[it]], cfg, loss_cfg)
        if callback is not None:
            callback(state)
    return state


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
