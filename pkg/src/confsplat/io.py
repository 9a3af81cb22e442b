"""File formats: raw depth, PLY, PNG, camera JSON and the experiment config."""

from __future__ import annotations

import configparser
import dataclasses
import io as _io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .align import AlignConfig
from .confidence import ConfidenceConfig
from .geometry import CameraModel, DimensionError, GaussianSet, InvalidParameterError, Raster, SparsePointSet
from .losses import LossConfig
from .trainer import TrainConfig


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# raw depth / confidence rasters

DEPTH_MAGIC = b"CDG1"


def encode_depth(r: Raster) -> bytes:
    if r.channels != 1:
        raise DimensionError("raw depth files hold single-channel rasters")
    h, w = r.shape
    payload = np.ascontiguousarray(r.plane(), dtype="<f4").tobytes()
    mask = np.ascontiguousarray(r.valid, dtype=np.uint8).tobytes()
    return DEPTH_MAGIC + struct.pack("<II", w, h) + payload + mask


def decode_depth(buf: bytes) -> Raster:
    if len(buf) < 12 or buf[:4] != DEPTH_MAGIC:
        raise FormatError("not a raw depth file (bad magic)")
    w, h = struct.unpack("<II", buf[4:12])
    if len(buf) != 12 + 5 * w * h:
        raise FormatError(f"raw depth file is {len(buf)} bytes, expected {12 + 5 * w * h}")
    n = w * h
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=12).reshape(h, w).astype(np.float32)
    mask = np.frombuffer(buf, dtype=np.uint8, count=n, offset=12 + 4 * n).reshape(h, w)
    if np.any(mask > 1):
        raise FormatError("validity bytes must be 0 or 1")
    return Raster(data, mask.astype(bool))


def write_depth(path, r: Raster) -> None:
    Path(path).write_bytes(encode_depth(r))


def read_depth(path) -> Raster:
    return decode_depth(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_PLY_NAMES = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort",
              "i4": "int", "u4": "uint", "f4": "float", "f8": "double"}


def _parse_header(fh):
    if fh.readline().strip() != b"ply":
        raise FormatError("missing 'ply' magic line")
    fmt = None
    count = None
    props = []
    in_vertex = False
    while True:
        line = fh.readline()
        if not line:
            raise FormatError("unterminated PLY header")
        tok = line.decode("ascii", "replace").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
            elif count is None:
                raise FormatError(f"element {tok[1]!r} before vertex is not supported")
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise FormatError("list properties on vertices are not supported")
            if tok[1] not in _PLY_TYPES:
                raise FormatError(f"unknown PLY type {tok[1]!r}")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError(f"unsupported PLY format {fmt!r}")
    if count is None:
        raise FormatError("PLY has no vertex element")
    return fmt, count, props


def read_ply(path) -> dict[str, np.ndarray]:
    """Vertex properties of an ASCII or binary little-endian PLY, in file order."""
    with open(path, "rb") as fh:
        fmt, count, props = _parse_header(fh)
        if fmt == "ascii":
            body = fh.read().decode("ascii").split()
            if len(body) < count * len(props):
                raise FormatError("truncated ASCII PLY body")
            table = np.array(body[:count * len(props)], dtype=np.float64).reshape(count, len(props))
            return {name: table[:, i].astype(t) for i, (name, t) in enumerate(props)}
        dtype = np.dtype([(name, "<" + t) for name, t in props])
        raw = fh.read(dtype.itemsize * count)
        if len(raw) < dtype.itemsize * count:
            raise FormatError("truncated binary PLY body")
        arr = np.frombuffer(raw, dtype=dtype, count=count)
        return {name: arr[name].astype(np.dtype(t)) for name, t in props}


def write_ply(path, columns: dict[str, np.ndarray], binary: bool = True) -> None:
    """Write equal-length 1-D columns as vertex properties (order kept)."""
    cols = {k: np.asarray(v).reshape(-1) for k, v in columns.items()}
    lengths = {len(v) for v in cols.values()}
    if len(lengths) > 1:
        raise DimensionError("PLY columns differ in length")
    n = lengths.pop() if lengths else 0
    for k, v in cols.items():
        if v.dtype.str[1:] not in _PLY_NAMES:
            cols[k] = v.astype(np.float64)
    lines = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {n}"]
    lines += [f"property {_PLY_NAMES[v.dtype.str[1:]]} {k}" for k, v in cols.items()]
    lines.append("end_header")
    head = ("\n".join(lines) + "\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(head)
        if binary:
            dtype = np.dtype([(k, "<" + v.dtype.str[1:]) for k, v in cols.items()])
            rec = np.empty(n, dtype=dtype)
            for k, v in cols.items():
                rec[k] = v
            fh.write(rec.tobytes())
        else:
            buf = _io.StringIO()
            for i in range(n):
                buf.write(" ".join(repr(float(v[i])) if v.dtype.kind == "f" else str(int(v[i]))
                                   for v in cols.values()))
                buf.write("\n")
            fh.write(buf.getvalue().encode("ascii"))


def _xyz(cols) -> np.ndarray:
    try:
        return np.stack([cols["x"], cols["y"], cols["z"]], axis=1).astype(np.float64)
    except KeyError as exc:
        raise FormatError("PLY lacks x/y/z properties") from exc


def write_points(path, points, reproj_error=None, extra: dict | None = None, binary: bool = True) -> None:
    """Point cloud with optional ``reproj_error`` and extra real columns."""
    if isinstance(points, SparsePointSet):
        reproj_error = points.reproj_error if reproj_error is None else reproj_error
        points = points.points
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    # doubles keep files lossless with respect to the in-memory clouds
    cols = {"x": pts[:, 0], "y": pts[:, 1], "z": pts[:, 2]}
    if reproj_error is not None:
        cols["reproj_error"] = np.asarray(reproj_error, dtype=np.float64)
    for k, v in (extra or {}).items():
        cols[k] = np.asarray(v, dtype=np.float64)
    write_ply(path, cols, binary)


def read_points(path) -> SparsePointSet:
    cols = read_ply(path)
    err = cols.get("reproj_error")
    return SparsePointSet(_xyz(cols), None if err is None else err.astype(np.float64))


_GAUSSIAN_COLUMNS = ("x", "y", "z", "log_scale_0", "log_scale_1", "log_scale_2",
                     "rot_0", "rot_1", "rot_2", "rot_3", "opacity_logit", "red", "green", "blue")


def write_gaussians(path, gs: GaussianSet, binary: bool = True) -> None:
    """Checkpoint with every raw parameter stored as a double (lossless)."""
    flat = np.concatenate([gs.centers, gs.log_scales, gs.quats, gs.opacity_logits[:, None], gs.colors], axis=1)
    write_ply(path, {name: flat[:, i].astype(np.float64) for i, name in enumerate(_GAUSSIAN_COLUMNS)}, binary)


def read_gaussians(path) -> GaussianSet:
    cols = read_ply(path)
    missing = [c for c in _GAUSSIAN_COLUMNS if c not in cols]
    if missing:
        raise FormatError(f"Gaussian checkpoint lacks properties {missing}")
    flat = np.stack([cols[c].astype(np.float64) for c in _GAUSSIAN_COLUMNS], axis=1)
    return GaussianSet(centers=flat[:, 0:3].copy(), log_scales=flat[:, 3:6].copy(), quats=flat[:, 6:10].copy(),
                       opacity_logits=flat[:, 10].copy(), colors=flat[:, 11:14].copy())


def read_cloud(path) -> np.ndarray:
    """xyz of any PLY; Gaussian checkpoints are read through their centers."""
    return _xyz(read_ply(path))


# ---------------------------------------------------------------------------
# images and cameras

def write_png(path, r: Raster | np.ndarray) -> None:
    from PIL import Image

    data = r.data if isinstance(r, Raster) else np.asarray(r)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    img = np.round(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(img).save(path, format="PNG")


def read_png(path) -> Raster:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return Raster(arr)


def write_camera(path, cam: CameraModel) -> None:
    Path(path).write_text(json.dumps(cam.to_dict(), indent=2) + "\n")


def read_camera(path) -> CameraModel:
    try:
        return CameraModel.from_dict(json.loads(Path(path).read_text()))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, InvalidParameterError):
            raise
        raise FormatError(f"bad camera file {path}: {exc}") from exc


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# experiment config (INI)

@dataclass
class EvalConfig:
    # 0 means diag/500 of the ground-truth cloud
    fscore_threshold: float = 0.0
    min_opacity: float = 0.5
    # optional row-major 4x4 applied to the reconstruction, comma-separated
    pre_transform: str = ""

    def transform_matrix(self) -> np.ndarray:
        vals = [float(v) for v in self.pre_transform.replace(",", " ").split()]
        if len(vals) != 16:
            raise FormatError("eval.pre_transform needs 16 numbers")
        return np.reshape(vals, (4, 4))


@dataclass
class RunConfig:
    scene: str = ""
    output: str = "out"
    checkpoint_every: int = 500


_SECTIONS = {"run": RunConfig, "align": AlignConfig, "confidence": ConfidenceConfig,
             "loss": LossConfig, "train": TrainConfig, "eval": EvalConfig}


@dataclass
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    confidence: ConfidenceConfig = field(default_factory=ConfidenceConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for sec in _SECTIONS:
            obj = getattr(self, sec)
            cp[sec] = {f.name: _fmt(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        buf = _io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise FormatError(f"malformed config: {exc}") from exc
        unknown = [s for s in cp.sections() if s not in _SECTIONS]
        if unknown:
            raise FormatError(f"unknown config section(s) {unknown}")
        parts = {}
        for sec, kind in _SECTIONS.items():
            fields = {f.name: f for f in dataclasses.fields(kind)}
            kw = {}
            if cp.has_section(sec):
                for key, raw in cp[sec].items():
                    if key not in fields:
                        raise FormatError(f"unknown key {sec}.{key}")
                    kw[key] = _parse(raw, type(getattr(kind(), key)), f"{sec}.{key}")
            parts[sec] = kind(**kw)
        return cls(**parts)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_ini(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_ini())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, kind: type, where: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError as exc:
        raise FormatError(f"bad value for {where}: {raw!r}") from exc
    return raw


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# scene directories

SCENE_FILE = "scene.json"


def view_dir(root, index: int, split: str = "views") -> Path:
    return Path(root) / split / f"view_{index:03d}"


def save_scene(scene, root) -> Path:
    """Write a synthetic scene as a directory of PNG/raw/PLY/JSON files."""
    root = ensure_dir(root)
    write_gaussians(root / "gt_gaussians.ply", scene.gaussians)
    write_points(root / "sparse_points.ply", scene.init_points)
    meta = {"params": scene.params, "views": [], "test_views": []}
    for split, views in (("views", scene.views), ("test_views", scene.test_views)):
        for i, v in enumerate(views):
            d = ensure_dir(view_dir(root, i, split))
            write_png(d / "image.png", v.image)
            write_camera(d / "camera.json", v.camera)
            write_depth(d / "true_depth.cdg", v.true_depth)
            if split == "views":
                write_depth(d / "mono_depth.cdg", v.mono_depth)
                write_points(d / "sparse.ply", v.sparse)
            meta[split].append({"name": d.name, "mono_scale": v.mono_scale, "mono_shift": v.mono_shift,
                                "corrupted": v.corrupted})
    write_json(root / SCENE_FILE, meta)
    return root


def load_scene_meta(root) -> dict:
    path = Path(root) / SCENE_FILE
    if not path.is_file():
        raise FormatError(f"{root} is not a scene directory (no {SCENE_FILE})")
    return json.loads(path.read_text())
