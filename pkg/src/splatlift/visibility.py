"""Soft visibility masks from depth reprojection between two views.

Each target pixel with valid depth is lifted to 3D, projected into the input
view, and its input-camera depth is compared with the input view's own depth
map sampled at that location. The discrepancy goes through a scaled and
shifted logistic, so the mask peaks at ``sigmoid(-shift)`` (about 0.4875),
not 1. ``normalized=True`` divides that ceiling out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import NEAR_PLANE, Camera, pixel_rays
from .render import FloatImage, GaussianScene, render_depth

MASK_SCALE = 3.0
MASK_SHIFT = 0.05


def soft_visibility(depth_diff, scale: float = MASK_SCALE, shift: float = MASK_SHIFT):
    """``sigmoid(-scale * |diff| - shift)``; works on scalars and arrays."""
    x = -scale * np.abs(depth_diff) - shift
    out = 1.0 / (1.0 + np.exp(-x))
    return float(out) if np.ndim(out) == 0 else out


MASK_CEILING = soft_visibility(0.0)


@dataclass
class VisibilityMask:
    image: FloatImage
    provenance: str = "gaussian-derived"  # gaussian-derived | oracle | oracle-depth

    @property
    def data(self) -> np.ndarray:
        return self.image.data[:, :, 0]


def sample_depth_bilinear(depth: FloatImage, u, v):
    """Bilinear lookup at continuous pixel coordinates, ignoring invalid neighbors.

    Returns (values, ok); ``ok`` is False where no valid neighbor carries weight.
    """
    d = depth.data[:, :, 0]
    valid = depth.data[:, :, 1] > 0.5 if depth.channels > 1 else np.isfinite(d)
    h, w = d.shape
    x = np.asarray(u, dtype=np.float64) - 0.5
    y = np.asarray(v, dtype=np.float64) - 0.5
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    acc = np.zeros(x.shape)
    wsum = np.zeros(x.shape)
    for dy, dx, wgt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)), (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        xi = x0 + dx
        yi = y0 + dy
        inb = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        xc = np.clip(xi, 0, w - 1)
        yc = np.clip(yi, 0, h - 1)
        use = inb & valid[yc, xc]
        wv = np.where(use, wgt, 0.0)
        acc += wv * np.where(use, d[yc, xc], 0.0)
        wsum += wv
    ok = wsum > 1e-12
    return np.where(ok, acc / np.where(ok, wsum, 1.0), 0.0), ok


def depth_visibility_mask(depth_input: FloatImage, depth_target: FloatImage, cam_input: Camera,
                          cam_target: Camera, normalized: bool = False, provenance: str = "gaussian-derived",
                          scale: float = MASK_SCALE, shift: float = MASK_SHIFT) -> VisibilityMask:
    """Mask over the target view from two (depth, valid) maps."""
    dt = depth_target.data[:, :, 0]
    vt = depth_target.data[:, :, 1] > 0.5
    origin, dirs = pixel_rays(cam_target)
    X = origin + np.where(vt, dt, 1.0)[..., None] * dirs
    pc = cam_input.pose.apply(X)
    z = pc[..., 2]
    front = vt & (z > NEAR_PLANE)
    zs = np.where(front, z, 1.0)
    u = cam_input.fx * pc[..., 0] / zs + cam_input.cx
    v = cam_input.fy * pc[..., 1] / zs + cam_input.cy
    inside = front & (u >= 0) & (u < cam_input.width) & (v >= 0) & (v < cam_input.height)
    d_in, ok = sample_depth_bilinear(depth_input, np.where(inside, u, 0.5), np.where(inside, v, 0.5))
    keep = inside & ok
    m = np.where(keep, soft_visibility(d_in - z, scale, shift), 0.0)
    if normalized:
        m = m / soft_visibility(0.0, scale, shift)
    return VisibilityMask(FloatImage(m, "mask"), provenance)


def compute_visibility_mask(scene: GaussianScene, cam_input: Camera, cam_target: Camera,
                            normalized: bool = False) -> VisibilityMask:
    if len(scene) == 0:
        raise ValueError("empty scene")
    return depth_visibility_mask(render_depth(scene, cam_input), render_depth(scene, cam_target),
                                 cam_input, cam_target, normalized)


def compute_pairwise_masks(scene: GaussianScene, cameras, normalized: bool = False) -> dict:
    """Masks for every ordered pair ``(i, j)``, ``i != j``, keyed by ``(i, j)`` (input i, target j)."""
    cameras = list(cameras)
    if len(cameras) < 2:
        raise ValueError("need at least 2 cameras")
    depths = [render_depth(scene, c) for c in cameras]
    return {
        (i, j): depth_visibility_mask(depths[i], depths[j], cameras[i], cameras[j], normalized)
        for i in range(len(cameras))
        for j in range(len(cameras))
        if i != j
    }


def binarize(mask, threshold: float = 0.5 * MASK_CEILING) -> np.ndarray:
    data = mask.data if isinstance(mask, VisibilityMask) else np.asarray(mask)
    if data.ndim == 3:
        data = data[:, :, 0]
    return data > threshold


def iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.sum(a | b)
    return 1.0 if union == 0 else float(np.sum(a & b) / union)
