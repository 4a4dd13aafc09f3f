"""File formats: float images, Gaussian scenes, PLY export, manifests, checkpoints, stamps.

All bulk containers are little-endian with a 4-byte magic and a u16 version.
Float payloads are 32-bit, so reading a file and writing it again reproduces
the original bytes exactly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .geometry import Camera, RigidTransform
from .lifter import LifterConfig, LifterParams
from .render import FloatImage, GaussianScene, sh_coeff_count

FIMG_MAGIC = b"FIMG"
FIMG_VERSION = 1
SCENE_MAGIC = b"GSCN"
SCENE_VERSION = 1
CKPT_MAGIC = b"LFTR"
CKPT_VERSION = 1
MANIFEST_VERSION = 1
SEMANTICS = ("color", "depth", "mask", "alpha")
SH_C0 = 0.28209479177387814


class FormatError(ValueError):
    pass


def _check_magic(buf: bytes, magic: bytes, version: int, what: str) -> None:
    if buf[:4] != magic:
        raise FormatError(f"not a {what} file (bad magic {buf[:4]!r})")
    (ver,) = struct.unpack_from("<H", buf, 4)
    if ver != version:
        raise FormatError(f"unsupported {what} version {ver} (expected {version})")


# float images


def encode_float_image(img: FloatImage) -> bytes:
    data = np.asarray(img.data)
    if data.ndim == 2:
        data = data[:, :, None]
    h, w, c = data.shape
    head = FIMG_MAGIC + struct.pack("<HIIIB", FIMG_VERSION, h, w, c, SEMANTICS.index(img.semantics))
    return head + np.ascontiguousarray(data, dtype="<f4").tobytes()


def decode_float_image(buf: bytes) -> FloatImage:
    _check_magic(buf, FIMG_MAGIC, FIMG_VERSION, "FIMG")
    _, h, w, c, tag = struct.unpack_from("<HIIIB", buf, 4)
    off = 4 + struct.calcsize("<HIIIB")
    if len(buf) - off != 4 * h * w * c:
        raise FormatError(f"FIMG payload length {len(buf) - off} does not match {h}x{w}x{c}")
    if tag >= len(SEMANTICS):
        raise FormatError(f"unknown FIMG semantics tag {tag}")
    data = np.frombuffer(buf, dtype="<f4", offset=off).reshape(h, w, c).astype(np.float32)
    return FloatImage(data, SEMANTICS[tag])


def write_float_image(path, img: FloatImage) -> None:
    Path(path).write_bytes(encode_float_image(img))


def read_float_image(path) -> FloatImage:
    return decode_float_image(_read(path))


def _read(path) -> bytes:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"missing file: {p}")
    return p.read_bytes()


# Gaussian scenes


def encode_scene(scene: GaussianScene) -> bytes:
    n = len(scene)
    k = sh_coeff_count(scene.sh_degree)
    rec = np.concatenate(
        [
            scene.means,
            scene.opacities[:, None],
            scene.quats,
            scene.scales,
            scene.colors.reshape(n, 3 * k),
        ],
        axis=1,
    )
    return SCENE_MAGIC + struct.pack("<HIB", SCENE_VERSION, n, scene.sh_degree) + rec.astype("<f4").tobytes()


def decode_scene(buf: bytes, scene_id: str = "") -> GaussianScene:
    _check_magic(buf, SCENE_MAGIC, SCENE_VERSION, "scene")
    _, n, deg = struct.unpack_from("<HIB", buf, 4)
    off = 4 + struct.calcsize("<HIB")
    k = sh_coeff_count(deg)
    width = 11 + 3 * k
    if len(buf) - off != 4 * n * width:
        raise FormatError(f"scene payload length {len(buf) - off} does not match {n} records")
    rec = np.frombuffer(buf, dtype="<f4", offset=off).reshape(n, width).astype(np.float64)
    return GaussianScene(
        rec[:, 0:3].copy(), rec[:, 3].copy(), rec[:, 4:8].copy(), rec[:, 8:11].copy(),
        rec[:, 11:].reshape(n, k, 3).copy(), sh_degree=deg, scene_id=scene_id,
    )


def write_scene(path, scene: GaussianScene) -> None:
    Path(path).write_bytes(encode_scene(scene))


def read_scene(path) -> GaussianScene:
    return decode_scene(_read(path), Path(path).stem)


# PLY in the common splatting layout


def _ply_fields(k: int) -> list[str]:
    rest = [f"f_rest_{i}" for i in range(3 * (k - 1))]
    return ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", *rest, "opacity",
            "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]


def write_ply(path, scene: GaussianScene) -> None:
    """Binary PLY with logit opacity, log scales and DC colors offset by 0.5 and divided by SH_C0."""
    n = len(scene)
    k = sh_coeff_count(scene.sh_degree)
    op = np.clip(scene.opacities, 1e-7, 1 - 1e-7)
    # higher-order coefficients are stored channel-major
    rest = scene.colors[:, 1:, :].transpose(0, 2, 1).reshape(n, -1)
    cols = np.concatenate(
        [scene.means, (scene.colors[:, 0, :] - 0.5) / SH_C0, rest, np.log(op / (1 - op))[:, None],
         np.log(scene.scales), scene.quats],
        axis=1,
    )
    names = _ply_fields(k)
    head = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    head += [f"property float {f}" for f in names] + ["end_header"]
    Path(path).write_bytes(("\n".join(head) + "\n").encode("ascii") + cols.astype("<f4").tobytes())


def read_ply(path) -> GaussianScene:
    buf = _read(path)
    end = buf.find(b"end_header\n")
    if not buf.startswith(b"ply\n") or end < 0:
        raise FormatError("not a PLY file")
    lines = buf[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise FormatError("only binary little-endian PLY is supported")
    n, names = None, []
    for line in lines:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts[:1] == ["property"]:
            if parts[1] != "float":
                raise FormatError(f"unsupported PLY property type {parts[1]!r}")
            names.append(parts[2])
    if n is None:
        raise FormatError("PLY has no vertex element")
    body = end + len(b"end_header\n")
    if len(buf) - body < 4 * n * len(names):
        raise FormatError("truncated PLY body")
    data = np.frombuffer(buf, dtype="<f4", offset=body, count=n * len(names))
    cols = dict(zip(names, data.reshape(n, len(names)).astype(np.float64).T))
    n_rest = sum(1 for f in names if f.startswith("f_rest_"))
    k = 1 + n_rest // 3
    deg = {1: 0, 4: 1}.get(k)
    if deg is None:
        raise FormatError(f"unsupported number of SH coefficients: {k}")
    colors = np.empty((n, k, 3))
    colors[:, 0, :] = np.stack([cols[f"f_dc_{c}"] for c in range(3)], axis=1) * SH_C0 + 0.5
    if k > 1:
        rest = np.stack([cols[f"f_rest_{i}"] for i in range(n_rest)], axis=1).reshape(n, 3, k - 1)
        colors[:, 1:, :] = rest.transpose(0, 2, 1)
    return GaussianScene(
        np.stack([cols["x"], cols["y"], cols["z"]], axis=1),
        1.0 / (1.0 + np.exp(-cols["opacity"])),
        np.stack([cols[f"rot_{i}"] for i in range(4)], axis=1),
        np.exp(np.stack([cols[f"scale_{i}"] for i in range(3)], axis=1)),
        colors,
        sh_degree=deg,
        scene_id=Path(path).stem,
    )


# dataset manifests


@dataclass
class ViewEntry:
    image: str
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: list[float]
    depth: str | None = None
    preview: str | None = None
    masks: dict[str, str] = field(default_factory=dict)  # target view index -> mask path

    @classmethod
    def from_camera(cls, cam: Camera, image: str, **kw) -> "ViewEntry":
        return cls(image, float(cam.fx), float(cam.fy), float(cam.cx), float(cam.cy), int(cam.width),
                   int(cam.height), [float(v) for v in cam.pose.matrix().reshape(-1)], **kw)

    def camera(self) -> Camera:
        pose = RigidTransform.from_matrix(np.asarray(self.world_to_camera).reshape(4, 4))
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, pose)


@dataclass
class DatasetManifest:
    scene_id: str
    views: list[ViewEntry]
    format_version: int = MANIFEST_VERSION
    kind: str = ""
    seed: int = 0
    reference: int = 0
    extent: float | None = None
    bounds: list | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def save(self, directory) -> Path:
        p = Path(directory) / "manifest.json"
        p.write_text(self.to_json())
        return p

    @classmethod
    def load(cls, directory, check_files: bool = True) -> "DatasetManifest":
        d = Path(directory)
        p = d / "manifest.json" if d.is_dir() else d
        if not p.is_file():
            raise FileNotFoundError(f"missing manifest: {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"malformed manifest {p}: {exc}") from None
        if raw.get("format_version") != MANIFEST_VERSION:
            raise FormatError(f"unsupported manifest version {raw.get('format_version')!r}")
        try:
            views = [ViewEntry(**v) for v in raw["views"]]
            man = cls(raw["scene_id"], views, raw["format_version"], raw.get("kind", ""), raw.get("seed", 0),
                      raw.get("reference", 0), raw.get("extent"), raw.get("bounds"))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed manifest {p}: {exc}") from None
        if check_files:
            base = p.parent
            for v in man.views:
                for rel in [v.image, v.depth, v.preview, *v.masks.values()]:
                    if rel is not None and not (base / rel).is_file():
                        raise FileNotFoundError(f"manifest references missing file: {base / rel}")
        return man


# lifter checkpoints


def encode_checkpoint(params: LifterParams) -> bytes:
    names, arrays = [], []
    for name, p in params.net.named_parameters():
        names.append(name)
        arrays.append(p.detach().contiguous().numpy())
    has_adam = all(n in params.adam.m for n in names)
    meta = {
        "config": asdict(params.cfg),
        "params": [[n, list(a.shape)] for n, a in zip(names, arrays)],
        "adam_step": params.adam.step if has_adam else 0,
        "has_adam": has_adam,
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(blob)), blob]
    parts += [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays]
    if has_adam:
        for mom in (params.adam.m, params.adam.v):
            parts += [np.ascontiguousarray(mom[n], dtype="<f4").tobytes() for n in names]
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> LifterParams:
    _check_magic(buf, CKPT_MAGIC, CKPT_VERSION, "checkpoint")
    _, size = struct.unpack_from("<HI", buf, 4)
    off = 4 + struct.calcsize("<HI")
    meta = json.loads(buf[off : off + size])
    off += size
    cfg_raw = meta["config"]
    cfg_raw["channels"] = tuple(cfg_raw["channels"])
    params = LifterParams.create(LifterConfig(**cfg_raw))
    named = dict(params.net.named_parameters())

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        if off + 4 * count > len(buf):
            raise FormatError("truncated checkpoint")
        arr = np.frombuffer(buf, dtype="<f4", offset=off, count=count).reshape(shape).astype(np.float32)
        off += 4 * count
        return arr

    with torch.no_grad():
        for name, shape in meta["params"]:
            if name not in named or list(named[name].shape) != shape:
                raise FormatError(f"checkpoint parameter {name} does not fit the configured lifter")
            named[name].copy_(torch.from_numpy(take(shape)))
    if meta["has_adam"]:
        params.adam.step = meta["adam_step"]
        for mom in (params.adam.m, params.adam.v):
            for name, shape in meta["params"]:
                mom[name] = take(shape)
    if off != len(buf):
        raise FormatError("trailing bytes in checkpoint")
    return params


def write_checkpoint(path, params: LifterParams) -> None:
    Path(path).write_bytes(encode_checkpoint(params))


def read_checkpoint(path) -> LifterParams:
    return decode_checkpoint(_read(path))


# previews and stamps


def save_png(path, img) -> None:
    """8-bit preview. Color is clipped to [0, 1]; other semantics are min-max scaled per image."""
    data = np.asarray(img.data if isinstance(img, FloatImage) else img, dtype=np.float64)
    semantics = img.semantics if isinstance(img, FloatImage) else "color"
    if semantics == "color":
        arr = np.clip(data[:, :, :3], 0, 1)
    else:
        ch = data[:, :, 0] if data.ndim == 3 else data
        lo, hi = float(ch.min()), float(ch.max())
        arr = (ch - lo) / (hi - lo) if hi > lo else np.zeros_like(ch)
    Image.fromarray(np.round(arr * 255).astype(np.uint8)).save(path, optimize=False)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_stamp(directory, command: str, seed: int, config: dict) -> Path:
    """Reproducibility record; contains no timestamps so reruns match byte for byte."""
    stamp = {
        "tool": "splatlift",
        "version": __version__,
        "command": command,
        "seed": seed,
        "config_hash": config_hash(config),
        "config": config,
    }
    p = Path(directory) / f"stamp_{command}.json"
    p.write_text(json.dumps(stamp, indent=2, sort_keys=True, default=str) + "\n")
    return p
