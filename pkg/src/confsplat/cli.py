"""Command-line entry point chaining synthesis, alignment, training and evaluation."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .align import align_depth, project_sparse_depth
from .confidence import confidence_map
from .metrics import PointCloud, default_threshold, fscore, m3c2, psnr, ssim
from .render import render
from .synth import generate_synthetic_scene
from .trainer import HISTORY_FIELDS, TrainView, init_from_sparse, make_state, train_step, view_schedule

log = logging.getLogger("confsplat")


class StageError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


def _views(scene: Path) -> list[Path]:
    meta = io.load_scene_meta(scene)
    return [scene / "views" / v["name"] for v in meta["views"]]


def _config(path) -> io.ExperimentConfig:
    return io.ExperimentConfig.load(path) if path else io.ExperimentConfig()


def cmd_synth(a) -> None:
    scene = generate_synthetic_scene(
        a.n_gaussians, a.n_views, a.size, a.seed, n_test_views=a.test_views, depth_noise=a.depth_noise,
        edge_blur=a.edge_blur, corrupt_views=a.corrupt_views, init_noise=a.init_noise,
        sparse_noise=a.sparse_noise)
    io.save_scene(scene, a.out)
    print(a.out)


def _align_view(d: Path, cfg: io.ExperimentConfig):
    sparse = io.read_points(d / "sparse.ply")
    cam = io.read_camera(d / "camera.json")
    target, weights = project_sparse_depth(sparse, cam)
    return align_depth(io.read_depth(d / "mono_depth.cdg"), target, weights, cfg.align)


def cmd_align(a) -> None:
    cfg = _config(a.config)
    for d in _views(Path(a.scene)):
        res = _align_view(d, cfg)
        io.write_depth(d / "aligned_depth.cdg", res.aligned_depth)
        io.write_json(d / "alignment.json", res.sidecar())
        log.info("%s: scale %.6g shift %.6g l_a %.3g", d.name, res.scale, res.shift, res.alignment_loss)


def _aligned(d: Path, cfg):
    path = d / "aligned_depth.cdg"
    if path.is_file() and (d / "alignment.json").is_file():
        side = json.loads((d / "alignment.json").read_text())
        return io.read_depth(path), float(side["alignment_loss"])
    res = _align_view(d, cfg)
    return res.aligned_depth, res.alignment_loss


def cmd_confidence(a) -> None:
    cfg = _config(a.config)
    for d in _views(Path(a.scene)):
        depth, _ = _aligned(d, cfg)
        conf = confidence_map(io.read_png(d / "image.png"), depth, cfg.confidence)
        io.write_depth(d / "confidence.conf", conf)
        if a.preview:
            io.write_png(d / "confidence_preview.png", conf)


def _train_views(scene: Path, cfg) -> list[TrainView]:
    out = []
    for d in _views(scene):
        image = io.read_png(d / "image.png")
        depth, l_a = _aligned(d, cfg)
        conf_path = d / "confidence.conf"
        conf = io.read_depth(conf_path) if conf_path.is_file() else confidence_map(image, depth, cfg.confidence)
        out.append(TrainView(image, io.read_camera(d / "camera.json"), depth, conf, l_a))
    return out


def cmd_train(a) -> None:
    cfg = _config(a.config)
    scene = Path(a.scene or cfg.run.scene)
    out = io.ensure_dir(a.out or cfg.run.output)
    views = _train_views(scene, cfg)
    init = init_from_sparse(io.read_points(scene / "sparse_points.ply"), scale_factor=cfg.train.init_scale_factor)
    (out / "config.ini").write_text(cfg.to_ini())
    ckpt = io.ensure_dir(out / "checkpoints")
    state = make_state(init, cfg.train)
    order = view_schedule(len(views), cfg.train.iterations, cfg.train.seed)
    every = cfg.run.checkpoint_every
    for it in range(cfg.train.iterations):
        train_step(state, views[order[it]], cfg.train, cfg.loss)
        if every and state.iteration % every == 0:
            io.write_gaussians(ckpt / f"iter_{state.iteration:06d}.ply", state.gaussians)
    io.write_gaussians(out / "final.ply", state.gaussians)
    state.write_history(out / "history.csv")
    log.info("trained %d iterations, %d Gaussians left", state.iteration, len(state.gaussians))


def cmd_render(a) -> None:
    gs = io.read_gaussians(a.checkpoint)
    out = render(gs, io.read_camera(a.camera))
    prefix = Path(a.out)
    if prefix.parent != Path(""):
        io.ensure_dir(prefix.parent)
    io.write_png(prefix.with_suffix(".png"), out.color)
    io.write_depth(prefix.with_suffix(".cdg"), out.depth)


def _emit(obj, path) -> None:
    if path:
        io.write_json(path, obj)
    else:
        print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_eval2d(a) -> None:
    pred_dir, gt_dir = Path(a.pred), Path(a.gt)
    names = sorted(p.relative_to(gt_dir) for p in gt_dir.rglob("*.png"))
    if not names:
        raise StageError("eval2d", f"no PNG images under {gt_dir}")
    rows = {}
    for name in names:
        pred_path = pred_dir / name
        if not pred_path.is_file():
            raise StageError("eval2d", f"missing prediction {pred_path}")
        p, g = io.read_png(pred_path), io.read_png(gt_dir / name)
        rows[str(name)] = {"psnr": psnr(p, g), "ssim": ssim(p, g)}
    finite = [r["psnr"] for r in rows.values() if np.isfinite(r["psnr"])]
    report = {"images": rows,
              "mean_psnr": float(np.mean(finite)) if len(finite) == len(rows) else float("inf"),
              "mean_ssim": float(np.mean([r["ssim"] for r in rows.values()]))}
    _emit(report, a.out)


def _cloud(path, min_opacity: float) -> PointCloud:
    cols = io.read_ply(path)
    if "opacity_logit" in cols:
        gs = io.read_gaussians(path)
        return PointCloud(gs.centers[gs.opacities > min_opacity])
    return PointCloud(io.read_cloud(path))


def cmd_eval3d(a) -> None:
    cfg = _config(a.config)
    rec, gt = _cloud(a.rec, cfg.eval.min_opacity), _cloud(a.gt, cfg.eval.min_opacity)
    for name, cloud in (("reconstruction", rec), ("ground truth", gt)):
        if len(cloud) == 0:
            raise StageError("eval3d", f"{name} has no points (Gaussians need opacity > {cfg.eval.min_opacity})")
    if cfg.eval.pre_transform.strip():
        rec = rec.transformed(cfg.eval.transform_matrix())
    tau = a.threshold or cfg.eval.fscore_threshold or default_threshold(gt)
    report = fscore(rec, gt, tau).to_dict()
    out = io.ensure_dir(a.out)
    if len(gt) >= 2:
        res = m3c2(gt, rec)
        report["m3c2_rmse"] = res.rmse
        report["m3c2_valid"] = int(res.valid.sum())
        io.write_points(out / "m3c2.ply", res.core_points, extra={"m3c2_dist": res.distances})
    io.write_json(out / "report.json", report)
    print(json.dumps(report, sort_keys=True))


def cmd_curves(a) -> None:
    with open(a.history, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise StageError("curves", "empty history")
    missing = [f for f in HISTORY_FIELDS if f not in rows[0]]
    if missing:
        raise StageError("curves", f"history lacks columns {missing}")
    data = {f: np.array([float(r[f]) for r in rows]) for f in HISTORY_FIELDS}
    win = a.window
    fields = ["iteration"] + [f"{f}_mean" for f in HISTORY_FIELDS[1:]] + ["image_loss_var", "total_loss_var"]
    out = sys.stdout if not a.out else open(a.out, "w", newline="")
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(fields)
        for end in range(win, len(rows) + 1, a.every):
            sl = slice(end - win, end)
            w.writerow([int(data["iteration"][end - 1])]
                       + [repr(float(data[f][sl].mean())) for f in HISTORY_FIELDS[1:]]
                       + [repr(float(data["image_loss"][sl].var())), repr(float(data["total_loss"][sl].var()))])
    finally:
        if out is not sys.stdout:
            out.close()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="confsplat", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--log-file", help="append timestamped log lines here")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic ground-truth scene")
    s.add_argument("--out", required=True)
    s.add_argument("--n-gaussians", type=int, default=20)
    s.add_argument("--n-views", type=int, default=8)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--test-views", type=int, default=0)
    s.add_argument("--depth-noise", type=float, default=0.0)
    s.add_argument("--edge-blur", type=float, default=0.0)
    s.add_argument("--corrupt-views", type=int, default=0)
    s.add_argument("--init-noise", type=float, default=0.03)
    s.add_argument("--sparse-noise", type=float, default=0.0)
    s.set_defaults(func=cmd_synth)

    for name, func, text in (("align", cmd_align, "fit per-view depth scale/shift to sparse points"),
                             ("confidence", cmd_confidence, "write per-view confidence maps")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--scene", required=True)
        s.add_argument("--config")
        if name == "confidence":
            s.add_argument("--preview", action="store_true", help="also write an 8-bit PNG of each map")
        s.set_defaults(func=func)

    s = sub.add_parser("train", help="optimize Gaussians on a scene")
    s.add_argument("--scene")
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", help="render a checkpoint from a camera")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--camera", required=True)
    s.add_argument("--out", required=True, help="output prefix; .png and .cdg are appended")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval2d", help="PSNR/SSIM between matching PNGs")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval2d)

    s = sub.add_parser("eval3d", help="F-score and M3C2 between point clouds")
    s.add_argument("--rec", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--threshold", type=float)
    s.add_argument("--config")
    s.add_argument("--out", default="eval3d")
    s.set_defaults(func=cmd_eval3d)

    s = sub.add_parser("curves", help="window-averaged history for plotting")
    s.add_argument("--history", required=True)
    s.add_argument("--window", type=int, default=100)
    s.add_argument("--every", type=int, default=10)
    s.add_argument("--out")
    s.set_defaults(func=cmd_curves)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = [logging.StreamHandler(sys.stderr)]
    if args.log_file:
        fh = logging.FileHandler(args.log_file)
        fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        handlers.append(fh)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, handlers=handlers, force=True)
    if getattr(args, "window", 1) < 1 or getattr(args, "every", 1) < 1:
        print(f"ERROR:{args.command}:window and every must be positive", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except StageError as exc:
        print(f"ERROR:{exc.stage}:{exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # every failure becomes one parsable line
        msg = str(exc).replace("\n", " ") or type(exc).__name__
        print(f"ERROR:{args.command}:{type(exc).__name__}: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
