"""Masked novel-view training of the lifter.

Each sample pairs an input image with a target view, the rigid transform from
the input camera frame to the target camera frame, and a visibility mask over
the target view. The lifter's Gaussians live in the input camera frame, so the
input camera has identity pose and the target camera's pose is that transform.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import Camera, RigidTransform
from .lifter import LifterParams, apply_activations, gaussian_tensors, render_tensors
from .metrics import psnr
from .optim import adam_step
from .render import FloatImage
from .visibility import VisibilityMask

log = logging.getLogger(__name__)


class PerceptualLossFn(Protocol):
    name: str
    version: int

    def __call__(self, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        """Differentiable scalar for (H, W, 3) tensors; 0 for identical inputs."""


class GradientPerceptual:
    """Multi-scale image-gradient difference, a weight-free perceptual stand-in.

    At each of ``octaves`` scales (2x average pooling between them) the
    horizontal and vertical finite differences of both images are compared with
    a Charbonnier penalty ``sqrt(d^2 + eps^2) - eps``, which is zero at d = 0
    and smooth everywhere. Scales are averaged.
    """

    name = "grad-diff"
    version = 1

    def __init__(self, octaves: int = 3, eps: float = 1e-3):
        self.octaves = octaves
        self.eps = eps

    def _penalty(self, d: torch.Tensor) -> torch.Tensor:
        eps2 = torch.tensor(self.eps * self.eps, dtype=d.dtype)
        return (torch.sqrt(d * d + eps2) - torch.sqrt(eps2)).mean()

    def __call__(self, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        x = pred.permute(2, 0, 1).unsqueeze(0)
        y = target.permute(2, 0, 1).unsqueeze(0)
        total = pred.new_zeros(())
        used = 0
        for level in range(self.octaves):
            if level:
                if min(x.shape[-2:]) < 2:
                    break
                x = F.avg_pool2d(x, 2)
                y = F.avg_pool2d(y, 2)
            parts = []
            if x.shape[-1] > 1:
                parts.append(self._penalty(torch.diff(x, dim=-1) - torch.diff(y, dim=-1)))
            if x.shape[-2] > 1:
                parts.append(self._penalty(torch.diff(x, dim=-2) - torch.diff(y, dim=-2)))
            if parts:
                total = total + sum(parts)
                used += 1
        return total / max(used, 1)


PERCEPTUAL_BACKENDS: dict[str, Callable[[], PerceptualLossFn]] = {"grad-diff": GradientPerceptual}


@dataclass
class LossConfig:
    alpha_l2: float = 1.0
    alpha_perceptual: float = 0.1
    masking: bool = True
    perceptual: str = "grad-diff"

    def __post_init__(self):
        if self.alpha_l2 < 0 or self.alpha_perceptual < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.perceptual not in PERCEPTUAL_BACKENDS:
            raise ValueError(f"unknown perceptual backend {self.perceptual!r}")

    def perceptual_fn(self) -> PerceptualLossFn:
        return PERCEPTUAL_BACKENDS[self.perceptual]()


def _tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    data = x.data if isinstance(x, (FloatImage, VisibilityMask)) else x
    return torch.as_tensor(np.asarray(data), dtype=dtype or torch.float64)


def _mask_tensor(mask, like: torch.Tensor) -> torch.Tensor:
    m = _tensor(mask, like.dtype)
    if m.ndim == 3:
        m = m[:, :, 0]
    if tuple(m.shape) != tuple(like.shape[:2]):
        raise ValueError(f"mask shape {tuple(m.shape)} does not match image {tuple(like.shape[:2])}")
    return m


def _check_pair(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")


def masked_l2(pred, target, mask):
    """``sum(M * ||pred - target||^2) / (H * W)``, squared norm over channels."""
    tensor_in = isinstance(pred, torch.Tensor)
    p = _tensor(pred)
    t = _tensor(target, p.dtype)
    _check_pair(p, t)
    m = _mask_tensor(mask, p)
    out = (m * ((p - t) ** 2).sum(dim=-1)).sum() / (p.shape[0] * p.shape[1])
    return out if tensor_in else float(out)


def weighted_perceptual(pred, target, mask, fn: PerceptualLossFn):
    """Mask coverage fraction times the perceptual loss of the full images."""
    tensor_in = isinstance(pred, torch.Tensor)
    p = _tensor(pred)
    t = _tensor(target, p.dtype)
    _check_pair(p, t)
    m = _mask_tensor(mask, p)
    out = m.sum() / (p.shape[0] * p.shape[1]) * fn(p, t)
    return out if tensor_in else float(out)


def loss_tensor(pred: torch.Tensor, target: torch.Tensor, mask, cfg: LossConfig,
                fn: PerceptualLossFn | None = None) -> torch.Tensor:
    """Differentiable total loss; ``mask`` is ignored (all ones) when masking is off."""
    _check_pair(pred, target)
    if not cfg.masking or mask is None:
        m = torch.ones(pred.shape[:2], dtype=pred.dtype)
    else:
        m = _mask_tensor(mask, pred)
    fn = fn or cfg.perceptual_fn()
    return cfg.alpha_l2 * masked_l2(pred, target, m) + cfg.alpha_perceptual * weighted_perceptual(pred, target, m, fn)


def total_loss(pred, target, mask, cfg: LossConfig) -> tuple[float, np.ndarray]:
    """Loss value and its gradient with respect to ``pred`` (float64)."""
    p = _tensor(pred, torch.float64).detach().clone().requires_grad_(True)
    t = _tensor(target, torch.float64)
    loss = loss_tensor(p, t, mask, cfg)
    (grad,) = torch.autograd.grad(loss, p)
    return float(loss.detach()), grad.numpy()


@dataclass
class TrainSample:
    x_input: FloatImage
    x_target: FloatImage
    K: RigidTransform  # input camera frame -> target camera frame
    mask: VisibilityMask | None
    intrinsics_input: Camera
    intrinsics_target: Camera
    sample_id: str = ""
    eval_mask: np.ndarray | None = None  # binary mask for metrics; defaults to ``mask``

    def __post_init__(self):
        shape = self.x_input.data.shape[:2]
        if self.x_target.data.shape[:2] != shape:
            raise ValueError(f"sample {self.sample_id}: input and target resolutions differ")
        if self.mask is not None:
            md = self.mask.data
            if md.shape != shape:
                raise ValueError(f"sample {self.sample_id}: mask resolution differs")
            if md.min() < 0 or md.max() > 1:
                raise ValueError(f"sample {self.sample_id}: mask outside [0, 1]")

    @property
    def cam_input(self) -> Camera:
        return self.intrinsics_input.with_pose(RigidTransform())

    @property
    def cam_target(self) -> Camera:
        return self.intrinsics_target.with_pose(self.K)

    def metric_mask(self) -> np.ndarray:
        if self.eval_mask is not None:
            return np.asarray(self.eval_mask, dtype=np.float64)
        if self.mask is not None:
            return self.mask.data
        return np.ones(self.x_target.data.shape[:2])


def predict_view(params: LifterParams, sample: TrainSample) -> np.ndarray:
    """Rendered (H, W, 3) prediction of the sample's target view."""
    from .lifter import lifter_forward

    with torch.no_grad():
        raw = lifter_forward(sample.x_input, params)[0]
        g = gaussian_tensors(apply_activations(raw, params.cfg), sample.cam_input)
        return render_tensors(g, sample.cam_target).double().numpy()


def holdout_masked_psnr(params: LifterParams, samples) -> float:
    values = []
    for s in samples:
        pred = np.clip(predict_view(params, s), 0.0, 1.0)
        v = psnr(pred, s.x_target.data[:, :, :3], s.metric_mask())
        if v is not None:
            values.append(v)
    return float(np.mean(values)) if values else float("nan")


@dataclass
class TrainResult:
    params: LifterParams
    log: list[tuple[int, float, float | None]] = field(default_factory=list)

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss", "masked_psnr_holdout"])
            for step, loss, hp in self.log:
                w.writerow([step, repr(loss), "" if hp is None else repr(hp)])


def _batches(n: int, batch: int, rng: np.random.Generator):
    """Endless stream of index batches from per-epoch seeded shuffles."""
    buf: list[int] = []
    while True:
        while len(buf) < batch:
            buf.extend(rng.permutation(n).tolist())
        yield buf[:batch]
        buf = buf[batch:]


def train_lifter(dataset, params: LifterParams, loss_cfg: LossConfig, steps: int = 5000, batch: int = 4,
                 lr_head: float = 1e-3, lr_trunk: float | None = None, seed: int = 0, holdout=None,
                 eval_every: int = 250, callback=None) -> TrainResult:
    """Optimize ``params`` in place with Adam; trunk rate defaults to head rate / 10."""
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty training set")
    if loss_cfg.masking and any(s.mask is None for s in dataset):
        raise ValueError("masking is enabled but some samples carry no mask")
    if steps < 0 or batch < 1:
        raise ValueError("steps must be >= 0 and batch >= 1")
    lr_trunk = lr_head / 10.0 if lr_trunk is None else lr_trunk
    cfg = params.cfg
    for s in dataset:
        if s.x_input.data.shape[:2] != (cfg.height, cfg.width):
            raise ValueError(f"resolution mismatch: sample {s.sample_id} vs lifter {(cfg.height, cfg.width)}")

    net = params.net
    dtype = next(net.parameters()).dtype
    named = dict(net.named_parameters())
    groups = params.groups()
    lr = {n: lr_head for n in groups["head"]} | {n: lr_trunk for n in groups["trunk"]}
    fn = loss_cfg.perceptual_fn()
    inputs = torch.stack([torch.as_tensor(s.x_input.data[:, :, :3]) for s in dataset]).permute(0, 3, 1, 2).to(dtype)
    targets = [torch.as_tensor(s.x_target.data[:, :, :3], dtype=dtype) for s in dataset]
    masks = [None if s.mask is None else torch.as_tensor(s.mask.data, dtype=dtype) for s in dataset]
    rng = np.random.default_rng(seed)
    stream = _batches(len(dataset), batch, rng)
    result = TrainResult(params)

    for step in range(1, steps + 1):
        idx = next(stream)
        for p in net.parameters():
            p.grad = None
        raw = net(inputs[idx])
        losses = []
        for b, i in enumerate(idx):
            s = dataset[i]
            attrs = apply_activations(raw[b], cfg)
            pred = render_tensors(gaussian_tensors(attrs, s.cam_input), s.cam_target)
            li = loss_tensor(pred, targets[i], masks[i], loss_cfg, fn)
            if not math.isfinite(float(li.detach())):
                raise FloatingPointError(f"non-finite loss at step {step}, sample {s.sample_id or i}")
            losses.append(li)
        loss = torch.stack(losses).mean()
        loss.backward()
        grads = {n: p.grad.numpy() for n, p in named.items() if p.grad is not None}
        adam_step({n: named[n].data.numpy() for n in grads}, grads, params.adam, lr)
        value = float(loss.detach())
        hp = None
        if holdout and eval_every and step % eval_every == 0:
            hp = holdout_masked_psnr(params, holdout)
            log.info("step %d loss %.6f holdout masked psnr %.3f", step, value, hp)
        result.log.append((step, value, hp))
        if callback is not None:
            callback(step, value, hp)
    return result
