"""Per-scene Gaussian optimization from posed images."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree

from .geometry import NEAR_PLANE, quat_to_rotmat
from .metrics import ssim_torch
from .optim import AdamState, adam_step
from .render import GaussianScene, render, render_backward

log = logging.getLogger(__name__)


@dataclass
class FitConfig:
    iterations: int = 2000
    lr_means: float = 1.6e-4  # multiplied by the scene extent, decayed 100x over the run
    lr_scales: float = 0.01
    lr_opacity: float = 0.05
    lr_quats: float = 0.002
    lr_colors: float = 0.01
    densify_interval: int = 100
    densify_from: int = 200
    densify_until: int | None = None  # default: half the run
    dup_scale_threshold: float = 0.002
    prune_scale_threshold: float = 0.02
    opacity_prune_threshold: float = 0.005
    densify_grad_threshold: float = 2e-4
    init_point_count: int = 3000
    init_opacity: float = 0.1
    init_mode: str = "sweep"  # sweep | frustum
    sweep_depths: int = 64
    max_gaussians: int = 30000
    ssim_weight: float = 0.2
    opacity_reset_interval: int = 0  # 0 disables
    scene_extent: float | None = None
    init_bounds: tuple | None = None  # ((xmin, ymin, zmin), (xmax, ymax, zmax))

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        for name in ("dup_scale_threshold", "prune_scale_threshold", "opacity_prune_threshold",
                     "densify_grad_threshold", "densify_interval", "init_point_count", "max_gaussians"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.init_mode not in ("sweep", "frustum"):
            raise ValueError(f"unknown init mode {self.init_mode!r}")


@dataclass
class FitResult:
    scene: GaussianScene
    losses: list[float] = field(default_factory=list)
    counts: list[int] = field(default_factory=list)

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss", "count"])
            for i, (loss, n) in enumerate(zip(self.losses, self.counts)):
                w.writerow([i, repr(loss), n])


def _logit(p):
    p = np.clip(p, 1e-6, 1 - 1e-6)
    return np.log(p / (1 - p))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def frustum_mask(cams, points) -> np.ndarray:
    """True for points in front of and projecting inside every camera."""
    ok = np.ones(len(points), dtype=bool)
    for cam in cams:
        pc = cam.pose.apply(points)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = cam.fx * pc[:, 0] / z + cam.cx
            v = cam.fy * pc[:, 1] / z + cam.cy
        ok &= (z > NEAR_PLANE) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return ok


def _frustum_points(cams, lo, hi, count: int, rng: np.random.Generator) -> np.ndarray:
    pts = np.zeros((0, 3))
    for _ in range(200):
        cand = rng.uniform(lo, hi, (4 * count, 3))
        pts = np.concatenate([pts, cand[frustum_mask(cams, cand)]])
        if len(pts) >= count:
            break
    if len(pts) == 0:
        raise ValueError("view frustums do not intersect inside the init bounds")
    return pts[:count]


def _sample_colors(img: np.ndarray, u, v) -> np.ndarray:
    """Bilinear lookup at continuous pixel coordinates (pixel centers at i + 0.5), edge-clamped."""
    h, w = img.shape[:2]
    x = np.clip(np.asarray(u) - 0.5, 0.0, w - 1.0)
    y = np.clip(np.asarray(v) - 0.5, 0.0, h - 1.0)
    x0 = np.minimum(x.astype(np.intp), w - 2) if w > 1 else np.zeros(x.shape, np.intp)
    y0 = np.minimum(y.astype(np.intp), h - 2) if h > 1 else np.zeros(y.shape, np.intp)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _sweep_cost(imgs, cams, k, pu, pv, ref, inv_z, best_views: int = 2) -> np.ndarray:
    """Patch SSD for per-pixel candidate inverse depths ``(m, D)``.

    Averages the ``best_views`` best-matching other views so a surface hidden
    in some views is still scored by the views that see it.
    """
    cam = cams[k]
    d_cam = np.stack([(pu - cam.cx) / cam.fx, (pv - cam.cy) / cam.fy, np.ones_like(pu)], axis=-1)
    d_world = d_cam @ cam.pose.rotation
    X = cam.center + (1.0 / inv_z)[:, :, None, None] * d_world[:, None]  # (m, D, P, 3)
    costs = []
    for j, other in enumerate(cams):
        if j == k:
            continue
        pc = other.pose.apply(X.reshape(-1, 3)).reshape(X.shape)
        zz = pc[..., 2]
        front = zz > NEAR_PLANE
        zs = np.where(front, zz, 1.0)
        uo = other.fx * pc[..., 0] / zs + other.cx
        vo = other.fy * pc[..., 1] / zs + other.cy
        ok = np.all(front & (uo >= 0) & (uo < other.width) & (vo >= 0) & (vo < other.height), axis=2)
        diff = _sample_colors(imgs[j], uo, vo) - ref[:, None]
        costs.append(np.where(ok, np.mean(diff**2, axis=(2, 3)), np.inf))
    costs = np.sort(np.stack(costs), axis=0)[: min(best_views, len(costs))]
    return np.mean(costs, axis=0)


def sweep_points(views, lo, hi, count: int, rng: np.random.Generator, depths: int = 64,
                 patch: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Points on surfaces found by photometric plane sweep over the posed views.

    Random pixels of each view are matched against every other view, keeping
    the depth whose (2 * patch + 1)^2 fronto-parallel patch agrees best. A
    coarse pass over inverse depth is refined within one coarse cell of its
    best candidate. Twice the needed pixels are matched and the better half
    kept, which drops occlusion-boundary mismatches. Returns points and their
    source-pixel colors.
    """
    cams = [c for _, c in views]
    imgs = [np.ascontiguousarray(img.data[:, :, :3], dtype=np.float64) for img, _ in views]
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    off = np.arange(-patch, patch + 1, dtype=np.float64)
    du, dv = (a.ravel() for a in np.meshgrid(off, off))
    centre = len(du) // 2
    per_view = -(-count // len(views))
    pts, cols = [], []
    for k, cam in enumerate(cams):
        zc = cam.pose.apply(corners)[:, 2]
        far = max(zc.max(), 2 * NEAR_PLANE)
        near = max(zc.min(), NEAR_PLANE, 0.1 * far)
        coarse = np.linspace(1.0 / near, 1.0 / far, depths)
        cell = abs(coarse[1] - coarse[0]) if depths > 1 else 0.0
        m = 2 * per_view
        u = rng.uniform(patch, cam.width - patch, m)
        v = rng.uniform(patch, cam.height - patch, m)
        pu, pv = u[:, None] + du, v[:, None] + dv  # (m, P)
        ref = _sample_colors(imgs[k], pu, pv)
        rows = np.arange(m)
        cost = _sweep_cost(imgs, cams, k, pu, pv, ref, np.broadcast_to(coarse, (m, depths)))
        best = coarse[np.argmin(cost, axis=1)]
        fine = best[:, None] + np.linspace(-cell, cell, depths)[None, :]
        fine = np.clip(fine, 1.0 / far, 1.0 / near)
        cost = _sweep_cost(imgs, cams, k, pu, pv, ref, fine)
        pick = np.argmin(cost, axis=1)
        score = cost[rows, pick]
        keep = np.argsort(score, kind="stable")[:per_view]
        keep = keep[np.isfinite(score[keep])]
        z = 1.0 / fine[rows, pick]
        d = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)]).T @ cam.pose.rotation
        pts.append((cam.center + z[:, None] * d)[keep])
        cols.append(ref[keep, centre])
    pts, cols = np.concatenate(pts), np.concatenate(cols)
    order = rng.permutation(len(pts))[:count]
    return pts[order], cols[order]


def init_scene(views, cfg: FitConfig, rng: np.random.Generator) -> GaussianScene:
    """Initial Gaussians from plane-sweep surface points or random frustum-intersection points."""
    cams = [c for _, c in views]
    if cfg.init_bounds is None:
        lo, hi = np.array([-5.0, -5.0, 0.5]), np.array([5.0, 5.0, 5.0])
    else:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in cfg.init_bounds)
    if cfg.init_mode == "sweep":
        pts, colors = sweep_points(views, lo, hi, cfg.init_point_count, rng, cfg.sweep_depths)
        if len(pts) == 0:
            raise ValueError("plane sweep found no points seen by two views")
    else:
        pts = _frustum_points(cams, lo, hi, cfg.init_point_count, rng)
        colors = np.zeros((len(pts), 3))
        for img, cam in views:
            pc = cam.pose.apply(pts)
            u = np.clip((cam.fx * pc[:, 0] / pc[:, 2] + cam.cx).astype(int), 0, cam.width - 1)
            v = np.clip((cam.fy * pc[:, 1] / pc[:, 2] + cam.cy).astype(int), 0, cam.height - 1)
            colors += img.data[v, u, :3]
        colors /= len(views)
    k = min(4, len(pts))
    if k > 1:
        d, _ = cKDTree(pts).query(pts, k=k)
        nn = np.sqrt(np.mean(d[:, 1:] ** 2, axis=1))
    else:
        nn = np.full(len(pts), 0.1)
    scales = np.repeat(np.maximum(nn, 1e-4)[:, None], 3, axis=1)
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (len(pts), 1))
    opac = np.full(len(pts), cfg.init_opacity)
    return GaussianScene(pts, opac, quats, scales, colors[:, None, :])


def densify_and_prune(scene: GaussianScene, mean_grads, cfg: FitConfig, extent: float,
                      rng: np.random.Generator | None = None):
    """Clone/split high-gradient Gaussians, then prune transparent or oversized ones.

    Returns ``(scene, source, fresh)``: ``source[i]`` is the old index that new
    Gaussian ``i`` derives from and ``fresh[i]`` marks Gaussians created here.
    """
    rng = rng or np.random.default_rng(0)
    n = len(scene)
    mean_grads = np.asarray(mean_grads, dtype=np.float64).reshape(n)
    max_scale = scene.scales.max(axis=1)
    hot = mean_grads >= cfg.densify_grad_threshold
    small = max_scale <= cfg.dup_scale_threshold * extent
    room = cfg.max_gaussians - n
    candidates = np.flatnonzero(hot)
    if len(candidates) > max(room, 0):
        # each densified Gaussian adds one net member; keep the strongest that fit
        keep = np.argsort(-mean_grads[candidates], kind="stable")[: max(room, 0)]
        candidates = np.sort(candidates[keep])
    clone = candidates[small[candidates]]
    split = candidates[~small[candidates]]

    means = [scene.means]
    scales = [scene.scales]
    source = [np.arange(n)]
    fresh = [np.zeros(n, dtype=bool)]
    removed = np.zeros(n, dtype=bool)
    if len(clone):
        means.append(scene.means[clone])
        scales.append(scene.scales[clone])
        source.append(clone)
        fresh.append(np.ones(len(clone), dtype=bool))
    if len(split):
        removed[split] = True
        for _ in range(2):
            offs = rng.normal(size=(len(split), 3)) * scene.scales[split]
            rots = np.array([quat_to_rotmat(q) for q in scene.quats[split]])
            means.append(scene.means[split] + np.einsum("nij,nj->ni", rots, offs))
            scales.append(scene.scales[split] / 1.6)
            source.append(split)
            fresh.append(np.ones(len(split), dtype=bool))
    source = np.concatenate(source)
    fresh = np.concatenate(fresh)
    out = GaussianScene(
        np.concatenate(means), scene.opacities[source], scene.quats[source], np.concatenate(scales),
        scene.colors[source], scene.sh_degree, scene.scene_id,
    )
    keep = ~np.concatenate([removed, np.zeros(len(source) - n, dtype=bool)])
    keep &= out.opacities >= cfg.opacity_prune_threshold
    keep &= out.scales.max(axis=1) <= cfg.prune_scale_threshold * extent
    if not np.any(keep):
        log.warning("pruning would empty the scene; keeping the most opaque Gaussian")
        keep[int(np.argmax(out.opacities))] = True
    idx = np.flatnonzero(keep)
    log.debug("densify: %d cloned, %d split, %d pruned -> %d", len(clone), len(split),
              int(np.sum(~keep)) - len(split), len(idx))
    return out.subset(idx), source[idx], fresh[idx]


def _image_loss(pred: np.ndarray, target: np.ndarray, ssim_weight: float):
    r = torch.from_numpy(pred).requires_grad_(True)
    gt = torch.from_numpy(np.ascontiguousarray(target, dtype=np.float64))
    loss = (1.0 - ssim_weight) * torch.mean((r - gt) ** 2)
    if ssim_weight > 0:
        loss = loss + ssim_weight * (1.0 - ssim_torch(r, gt))
    loss.backward()
    return float(loss.detach()), r.grad.numpy()


def default_extent(cfg: FitConfig) -> float:
    if cfg.scene_extent is not None:
        return float(cfg.scene_extent)
    lo, hi = cfg.init_bounds if cfg.init_bounds is not None else ((-5, -5, 0.5), (5, 5, 5))
    return float(np.linalg.norm(np.subtract(hi, lo)))


def fit_scene(views, cfg: FitConfig | None = None, seed: int = 0, callback=None) -> FitResult:
    """Optimize a Gaussian scene to reproduce posed ``(FloatImage, Camera)`` views."""
    cfg = cfg or FitConfig()
    views = list(views)
    if len(views) < 2:
        raise ValueError("need at least 2 views to fit a scene")
    shapes = {(img.height, img.width) for img, _ in views}
    if len(shapes) != 1 or any((c.height, c.width) != (img.height, img.width) for img, c in views):
        raise ValueError("views must share one image size matching their cameras")
    rng = np.random.default_rng(seed)
    extent = default_extent(cfg)
    scene = init_scene(views, cfg, rng)
    params = {
        "means": scene.means.copy(),
        "log_scales": np.log(scene.scales),
        "logit_opacity": _logit(scene.opacities),
        "quats": scene.quats.copy(),
        "colors": scene.colors.copy(),
    }
    state = AdamState()
    densify_until = cfg.densify_until if cfg.densify_until is not None else cfg.iterations // 2
    grad_accum = np.zeros(len(scene))
    seen = np.zeros(len(scene))
    result = FitResult(scene)
    order = np.array([], dtype=int)

    def current() -> GaussianScene:
        return GaussianScene(
            params["means"], _sigmoid(params["logit_opacity"]), params["quats"],
            np.exp(params["log_scales"]), params["colors"], scene.sh_degree, scene.scene_id,
        )

    for it in range(cfg.iterations):
        if len(order) == 0:
            order = rng.permutation(len(views))
        vi, order = order[0], order[1:]
        img, cam = views[vi]
        sc = current()
        out = render(sc, cam)
        loss, up = _image_loss(out.color.data, img.data[:, :, :3], cfg.ssim_weight)
        if not np.isfinite(loss):
            raise FloatingPointError(f"loss diverged at iteration {it}")
        g = render_backward(sc, cam, up, out.state)
        frac = 1.0 - it / max(cfg.iterations - 1, 1)
        lr = {
            "means": cfg.lr_means * extent * (0.01 ** (1.0 - frac)),
            "log_scales": cfg.lr_scales,
            "logit_opacity": cfg.lr_opacity,
            "quats": cfg.lr_quats,
            "colors": cfg.lr_colors,
        }
        grads = {
            "means": g.d_mu,
            "log_scales": g.d_scales * sc.scales,
            "logit_opacity": g.d_opacity * sc.opacities * (1.0 - sc.opacities),
            "quats": g.d_rot,
            "colors": g.d_color,
        }
        adam_step(params, grads, state, lr)
        result.losses.append(loss)
        result.counts.append(len(sc))

        vis = out.state.visible
        ndc = g.d_mean2d * np.array([0.5 * cam.width, 0.5 * cam.height])
        grad_accum[vis] += np.linalg.norm(ndc[vis], axis=1)
        seen[vis] += 1
        step = it + 1
        if cfg.densify_from <= step <= densify_until and step % cfg.densify_interval == 0:
            mean_grads = grad_accum / np.maximum(seen, 1)
            new, source, fresh = densify_and_prune(current(), mean_grads, cfg, extent, rng)
            params = {
                "means": new.means.copy(),
                "log_scales": np.log(new.scales),
                "logit_opacity": params["logit_opacity"][source].copy(),
                "quats": new.quats.copy(),
                "colors": new.colors.copy(),
            }
            for name in params:
                state.reindex(name, source, fresh)
            grad_accum = np.zeros(len(new))
            seen = np.zeros(len(new))
        if cfg.opacity_reset_interval and step % cfg.opacity_reset_interval == 0 and step < cfg.iterations:
            params["logit_opacity"] = np.minimum(params["logit_opacity"], _logit(0.01))
            state.reindex("logit_opacity", np.arange(len(params["means"])), np.ones(len(params["means"]), bool))
        if callback is not None:
            callback(it, loss, len(sc))
    result.scene = current()
    return result
