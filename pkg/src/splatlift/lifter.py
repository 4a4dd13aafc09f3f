"""Per-pixel Gaussian predictor: one RGB image in, k Gaussians per pixel out.

A small convolutional encoder-decoder stands in for a large pretrained
backbone. The encoder is the trunk; the decoder and its final 1x1 projection
form the head. Each predicted Gaussian sits on the camera ray through its
pixel center at the predicted depth, plus a bounded 3D offset.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import Camera
from .optim import AdamState
from .render import FloatImage, GaussianScene, render, render_backward, sh_coeff_count


@dataclass
class LifterConfig:
    height: int = 96
    width: int = 96
    k: int = 1
    sh_degree: int = 0
    channels: tuple[int, ...] = (12, 24, 36, 48)
    d_min: float = 1.0
    d_max: float = 8.0
    scene_extent: float = 10.0
    delta_scale: float | None = None  # default 5% of scene_extent
    s_min: float = 0.004
    s_max: float = 0.5
    head_init: str = "small"  # small | zero

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if len(self.channels) != 4:
            raise ValueError("the trunk has exactly 4 stages")
        self.channels = tuple(int(c) for c in self.channels)

    @property
    def delta_bound(self) -> float:
        return 0.05 * self.scene_extent if self.delta_scale is None else self.delta_scale

    @property
    def attrs_per_gaussian(self) -> int:
        return 1 + 3 + 1 + 4 + 3 + 3 * sh_coeff_count(self.sh_degree)

    @property
    def out_channels(self) -> int:
        return self.k * self.attrs_per_gaussian


def _conv(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


class LifterNet(nn.Module):
    def __init__(self, cfg: LifterConfig):
        super().__init__()
        c1, c2, c3, c4 = cfg.channels
        self.cfg = cfg
        self.trunk = nn.ModuleList(
            [
                nn.Sequential(_conv(3, c1), nn.SiLU(), _conv(c1, c1), nn.SiLU()),
                nn.Sequential(_conv(c1, c2, 2), nn.SiLU(), _conv(c2, c2), nn.SiLU()),
                nn.Sequential(_conv(c2, c3, 2), nn.SiLU(), _conv(c3, c3), nn.SiLU()),
                nn.Sequential(_conv(c3, c4, 2), nn.SiLU(), _conv(c4, c4), nn.SiLU()),
            ]
        )
        # decoder: upsample, project to the skip width, add, refine
        self.proj = nn.ModuleList([nn.Conv2d(c4, c3, 1), nn.Conv2d(c3, c2, 1), nn.Conv2d(c2, c1, 1)])
        self.up = nn.ModuleList([nn.Sequential(_conv(c, c), nn.SiLU()) for c in (c3, c2, c1)])
        self.out = nn.Conv2d(c1, cfg.out_channels, 1)
        if cfg.head_init == "zero":
            nn.init.zeros_(self.out.weight)
        else:
            nn.init.normal_(self.out.weight, std=1e-3)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) images to (B, C, H, W) raw attributes."""
        skips = []
        h = x.contiguous(memory_format=torch.channels_last)
        for stage in self.trunk:
            h = stage(h)
            skips.append(h)
        h = skips[-1]
        for proj, block, skip in zip(self.proj, self.up, reversed(skips[:-1])):
            h = F.interpolate(h, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            h = block(proj(h) + skip)
        return self.out(h).contiguous()

    def head_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("trunk.")]

    def trunk_parameters(self):
        return [p for n, p in self.named_parameters() if n.startswith("trunk.")]


@dataclass
class LifterParams:
    net: LifterNet
    cfg: LifterConfig
    adam: AdamState = field(default_factory=AdamState)

    @classmethod
    def create(cls, cfg: LifterConfig, seed: int = 0, dtype=torch.float32) -> "LifterParams":
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        net = LifterNet(cfg).to(dtype).to(memory_format=torch.channels_last)
        torch.random.set_rng_state(gen_state)
        return cls(net, cfg)

    def groups(self) -> dict[str, list[str]]:
        names = [n for n, _ in self.net.named_parameters()]
        return {
            "trunk": [n for n in names if n.startswith("trunk.")],
            "head": [n for n in names if not n.startswith("trunk.")],
        }

    def n_params(self) -> int:
        return sum(p.numel() for p in self.net.parameters())


def _image_tensor(images, dtype) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        t = images
    else:
        arrays = images if isinstance(images, (list, tuple)) else [images]
        t = torch.as_tensor(np.stack([(a.data if isinstance(a, FloatImage) else np.asarray(a))[:, :, :3]
                                      for a in arrays]))
    if t.ndim == 3:
        t = t.unsqueeze(0)
    if t.shape[-1] == 3 and t.shape[1] != 3:
        t = t.permute(0, 3, 1, 2)
    return t.to(dtype).contiguous()


def lifter_forward(image, params: LifterParams) -> torch.Tensor:
    """Raw per-pixel attributes, (B, C, H, W); a single image gives B = 1."""
    x = _image_tensor(image, next(params.net.parameters()).dtype)
    cfg = params.cfg
    if tuple(x.shape[-2:]) != (cfg.height, cfg.width):
        raise ValueError(f"resolution mismatch: image {tuple(x.shape[-2:])}, lifter {(cfg.height, cfg.width)}")
    return params.net(x)


@dataclass
class PixelGaussians:
    """Activated attributes, each shaped (H, W, k, ...)."""

    depth: torch.Tensor
    delta: torch.Tensor
    opacity: torch.Tensor
    quat: torch.Tensor
    scales: torch.Tensor
    color: torch.Tensor


def split_raw(raw: torch.Tensor, cfg: LifterConfig) -> dict[str, torch.Tensor]:
    """(C, H, W) raw tensor to named (H, W, k, n) slices."""
    c, h, w = raw.shape
    per = cfg.attrs_per_gaussian
    r = raw.permute(1, 2, 0).reshape(h, w, cfg.k, per)
    sizes = {"depth": 1, "delta": 3, "opacity": 1, "quat": 4, "scales": 3, "color": per - 12}
    out, start = {}, 0
    for name, n in sizes.items():
        out[name] = r[..., start : start + n]
        start += n
    return out


def apply_activations(raw: torch.Tensor, cfg: LifterConfig) -> PixelGaussians:
    """Map one sample's raw (C, H, W) output onto valid attribute ranges."""
    parts = split_raw(raw, cfg)
    depth = cfg.d_min + (cfg.d_max - cfg.d_min) * torch.sigmoid(parts["depth"][..., 0])
    delta = cfg.delta_bound * torch.tanh(parts["delta"])
    opacity = torch.sigmoid(parts["opacity"][..., 0])
    q = parts["quat"] + torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=raw.dtype)
    quat = q / torch.linalg.vector_norm(q, dim=-1, keepdim=True).clamp_min(1e-12)
    scales = torch.clamp(cfg.s_min * torch.exp(parts["scales"]), cfg.s_min, cfg.s_max)
    k = sh_coeff_count(cfg.sh_degree)
    col = parts["color"].reshape(*parts["color"].shape[:-1], k, 3)
    if k == 1:
        color = torch.sigmoid(col)
    else:
        color = torch.cat([torch.sigmoid(col[..., :1, :]), col[..., 1:, :]], dim=-2)
    return PixelGaussians(depth, delta, opacity, quat, scales, color)


def pixel_ray_dirs(cam: Camera, dtype=torch.float64) -> torch.Tensor:
    """(H, W, 3) world directions with unit camera-frame z through pixel centers."""
    u = torch.arange(cam.width, dtype=torch.float64) + 0.5
    v = torch.arange(cam.height, dtype=torch.float64) + 0.5
    vv, uu = torch.meshgrid(v, u, indexing="ij")
    dc = torch.stack([(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, torch.ones_like(uu)], dim=-1)
    R = torch.tensor(cam.pose.rotation)
    return (dc @ R).to(dtype)


def gaussian_tensors(attrs: PixelGaussians, cam: Camera) -> dict[str, torch.Tensor]:
    """Flattened, row-major (pixel, k) Gaussian tensors in world coordinates."""
    h, w, k = attrs.depth.shape
    if (h, w) != (cam.height, cam.width):
        raise ValueError("attribute and camera resolutions differ")
    dtype = attrs.depth.dtype
    dirs = pixel_ray_dirs(cam, dtype)
    origin = torch.as_tensor(cam.center, dtype=dtype)
    means = origin + attrs.depth[..., None] * dirs[:, :, None, :] + attrs.delta
    return {
        "means": means.reshape(-1, 3),
        "opacities": attrs.opacity.reshape(-1),
        "quats": attrs.quat.reshape(-1, 4),
        "scales": attrs.scales.reshape(-1, 3),
        "colors": attrs.color.reshape(h * w * k, -1, 3),
    }


def attributes_to_scene(attrs: PixelGaussians, cam: Camera, scene_id: str = "") -> GaussianScene:
    t = gaussian_tensors(attrs, cam)
    sh_degree = 0 if t["colors"].shape[1] == 1 else 1
    return GaussianScene(
        *(t[n].detach().cpu().double().numpy() for n in ("means", "opacities", "quats", "scales", "colors")),
        sh_degree=sh_degree,
        scene_id=scene_id,
    )


class _RenderFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means, opacities, quats, scales, colors, cam):
        sh_degree = 0 if colors.shape[1] == 1 else 1
        scene = GaussianScene(
            *(t.detach().double().numpy() for t in (means, opacities, quats, scales, colors)),
            sh_degree=sh_degree,
        )
        out = render(scene, cam)
        ctx.scene = scene
        ctx.cam = cam
        ctx.state = out.state
        ctx.dtype = means.dtype
        return torch.from_numpy(out.color.data).to(means.dtype)

    @staticmethod
    def backward(ctx, grad_color):
        g = render_backward(ctx.scene, ctx.cam, grad_color.detach().double().numpy(), ctx.state)
        conv = [torch.from_numpy(a).to(ctx.dtype) for a in (g.d_mu, g.d_opacity, g.d_rot, g.d_scales, g.d_color)]
        return (*conv, None)


def render_tensors(gaussians: dict[str, torch.Tensor], cam: Camera) -> torch.Tensor:
    """Differentiable (H, W, 3) render of Gaussian tensors."""
    return _RenderFn.apply(
        gaussians["means"], gaussians["opacities"], gaussians["quats"], gaussians["scales"],
        gaussians["colors"], cam,
    )


def lift(image, params: LifterParams, cam: Camera, scene_id: str = "") -> GaussianScene:
    """Image to Gaussian scene in the world frame of ``cam``."""
    with torch.no_grad():
        raw = lifter_forward(image, params)[0]
        return attributes_to_scene(apply_activations(raw, params.cfg), cam, scene_id)
