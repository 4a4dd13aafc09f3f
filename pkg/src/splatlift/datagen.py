"""Synthetic posed scenes made of opaque textured quads, with an exact ray-cast oracle.

Ground truth is geometric rather than Gaussian, so depths and visibility
masks computed here are independent of the splatting code path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import NEAR_PLANE, Camera, RigidTransform, look_at, pixel_rays
from .render import FloatImage

SCENE_KINDS = ("wall", "wall+occluder", "room-corner", "random-quads")
VISIBILITY_EPS = 1e-4
WALL_DEPTH = 4.0


@dataclass(frozen=True)
class Quad:
    corner: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    texture: str = "noise"
    seed: int = 0

    def __post_init__(self):
        for name in ("corner", "edge_u", "edge_v"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(3))
        if np.linalg.norm(np.cross(self.edge_u, self.edge_v)) < 1e-12:
            raise ValueError("degenerate quad: edge vectors are parallel")

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.edge_u, self.edge_v)
        return n / np.linalg.norm(n)

    def corners(self) -> np.ndarray:
        c, u, v = self.corner, self.edge_u, self.edge_v
        return np.array([c, c + u, c + u + v, c + v])


@dataclass(frozen=True)
class QuadScene:
    quads: tuple[Quad, ...]
    kind: str = "custom"
    seed: int = 0
    bounds: tuple[tuple[float, float, float], tuple[float, float, float]] = ((-5, -5, 0.5), (5, 5, 5))

    @property
    def extent(self) -> float:
        """Diagonal of the axis-aligned box around all quads."""
        pts = np.concatenate([q.corners() for q in self.quads])
        return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))

    def without(self, index: int) -> "QuadScene":
        quads = self.quads[:index] + self.quads[index + 1 :]
        return QuadScene(quads, self.kind, self.seed, self.bounds)


@dataclass
class TrajectoryConfig:
    count: int = 8
    pattern: str = "strafe"  # strafe | orbit
    step: float = 0.2  # strafe spacing, or orbit angle step in degrees
    look_at: tuple[float, float, float] = (0.0, 0.0, WALL_DEPTH)
    width: int = 64
    height: int = 64
    fov_deg: float = 60.0
    reference_index: int | None = None

    @property
    def reference(self) -> int:
        """Index of the camera sitting at the world origin (the designated input view)."""
        return (self.count - 1) // 2 if self.reference_index is None else self.reference_index


def trajectory_camera(cfg: TrajectoryConfig, offset: float) -> Camera:
    """Camera ``offset`` steps from the reference along the trajectory (may be fractional)."""
    target = np.asarray(cfg.look_at, dtype=np.float64)
    if cfg.pattern == "strafe":
        eye = np.array([cfg.step * offset, 0.0, 0.0])
    elif cfg.pattern == "orbit":
        ang = np.radians(cfg.step * offset)
        r = target[2]
        eye = np.array([r * np.sin(ang), 0.0, r - r * np.cos(ang)])
    else:
        raise ValueError(f"unknown trajectory pattern {cfg.pattern!r}")
    pose = RigidTransform() if offset == 0 else look_at(eye, target)
    return Camera.from_fov(cfg.width, cfg.height, cfg.fov_deg, pose)


def make_cameras(cfg: TrajectoryConfig) -> list[Camera]:
    if cfg.count < 1:
        raise ValueError("need at least one camera")
    return [trajectory_camera(cfg, k - cfg.reference) for k in range(cfg.count)]


# --------------------------------------------------------------------------
# textures


def _value_noise(a, b, rng: np.random.Generator, cells: int) -> np.ndarray:
    grid = rng.uniform(0.15, 0.85, (cells + 1, cells + 1, 3))
    x = np.clip(a, 0, 1) * cells
    y = np.clip(b, 0, 1) * cells
    i = np.minimum(x.astype(int), cells - 1)
    j = np.minimum(y.astype(int), cells - 1)
    fx = x - i
    fy = y - j
    sx = (fx * fx * (3 - 2 * fx))[..., None]
    sy = (fy * fy * (3 - 2 * fy))[..., None]
    top = grid[j, i] * (1 - sx) + grid[j, i + 1] * sx
    bot = grid[j + 1, i] * (1 - sx) + grid[j + 1, i + 1] * sx
    return top * (1 - sy) + bot * sy


def texture_color(texture: str, seed: int, a, b) -> np.ndarray:
    """Procedural color at quad coordinates ``(a, b)`` in [0, 1]^2."""
    rng = np.random.default_rng(seed)
    if texture == "noise":
        # fine octave gives large quads enough detail for multi-view depth
        base = 0.5 * _value_noise(a, b, rng, 5) + 0.5 * _value_noise(a, b, rng, 40)
        theta = rng.uniform(0, np.pi)
        stripes = 0.5 + 0.5 * np.sin(2 * np.pi * 12.0 * (a * np.cos(theta) + b * np.sin(theta)))
        return np.clip(base * (0.75 + 0.25 * stripes[..., None]), 0, 1)
    if texture == "stripes":
        base = _value_noise(a, b, rng, 2)
        tint = rng.uniform(0.3, 0.9, 3)
        theta = rng.uniform(0, np.pi)
        stripes = 0.5 + 0.5 * np.sin(2 * np.pi * 2.0 * (a * np.cos(theta) + b * np.sin(theta)))
        return np.clip(0.5 * base + 0.5 * tint * (0.4 + 0.6 * stripes[..., None]), 0, 1)
    if texture == "flat":
        return np.broadcast_to(rng.uniform(0.2, 0.8, 3), np.shape(a) + (3,)).copy()
    raise ValueError(f"unknown texture {texture!r}")


# --------------------------------------------------------------------------
# ray casting


def intersect_quad(quad: Quad, origins, dirs):
    """Ray parameters and quad coordinates of ray-quad hits (inf where missed)."""
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), np.shape(dirs))
    dirs = np.asarray(dirs, dtype=np.float64)
    n = np.cross(quad.edge_u, quad.edge_v)
    denom = dirs @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = ((quad.corner - origins) @ n) / denom
        h = origins + np.where(np.isfinite(tau), tau, 0.0)[..., None] * dirs - quad.corner
    uu = quad.edge_u @ quad.edge_u
    uv = quad.edge_u @ quad.edge_v
    vv = quad.edge_v @ quad.edge_v
    hu = h @ quad.edge_u
    hv = h @ quad.edge_v
    det = uu * vv - uv * uv
    a = (vv * hu - uv * hv) / det
    b = (uu * hv - uv * hu) / det
    hit = (np.abs(denom) > 1e-12) & (tau > 1e-9) & (a >= 0) & (a <= 1) & (b >= 0) & (b <= 1)
    return np.where(hit, tau, np.inf), a, b


def cast_rays(scene: QuadScene, origins, dirs):
    """Nearest hit along each ray: (tau, quad index or -1, a, b)."""
    shape = np.shape(dirs)[:-1]
    best = np.full(shape, np.inf)
    index = np.full(shape, -1, dtype=np.int64)
    best_a = np.zeros(shape)
    best_b = np.zeros(shape)
    for qi, quad in enumerate(scene.quads):
        tau, a, b = intersect_quad(quad, origins, dirs)
        closer = tau < best
        best = np.where(closer, tau, best)
        index = np.where(closer, qi, index)
        best_a = np.where(closer, a, best_a)
        best_b = np.where(closer, b, best_b)
    return best, index, best_a, best_b


def raycast_render(scene: QuadScene, cam: Camera) -> tuple[FloatImage, FloatImage]:
    """Exact color and depth. Depth channel 0 is camera-frame z, channel 1 the hit flag."""
    origin, dirs = pixel_rays(cam)
    tau, index, a, b = cast_rays(scene, origin, dirs)
    color = np.zeros((cam.height, cam.width, 3))
    for qi, quad in enumerate(scene.quads):
        sel = index == qi
        if np.any(sel):
            color[sel] = texture_color(quad.texture, quad.seed, a[sel], b[sel])
    hit = index >= 0
    depth = np.where(hit, tau, 0.0)
    return FloatImage(color, "color"), FloatImage(np.stack([depth, hit.astype(np.float64)], -1), "depth")


def oracle_visibility(scene: QuadScene, cam_input: Camera, cam_target: Camera) -> FloatImage:
    """Binary mask over the target view: 1 where the surface point is seen by the input camera."""
    origin, dirs = pixel_rays(cam_target)
    tau, index, _, _ = cast_rays(scene, origin, dirs)
    hit = index >= 0
    X = origin + np.where(hit, tau, 1.0)[..., None] * dirs
    pc = cam_input.pose.apply(X)
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam_input.fx * pc[..., 0] / z + cam_input.cx
        v = cam_input.fy * pc[..., 1] / z + cam_input.cy
    inside = hit & (z > NEAR_PLANE) & (u >= 0) & (u < cam_input.width) & (v >= 0) & (v < cam_input.height)
    # rays from the input center scaled so the ray parameter is the input-camera depth
    o_in = cam_input.center
    d_in = (X - o_in) / np.where(inside, z, 1.0)[..., None]
    tau_in, _, _, _ = cast_rays(scene, o_in, d_in)
    visible = inside & (tau_in >= z - VISIBILITY_EPS)
    return FloatImage(visible.astype(np.float64), "mask")


def occluded_fraction(scene: QuadScene, cam: Camera, wall_index: int = 0) -> float:
    """Fraction of the camera's pixels whose nearest hit is not the wall quad."""
    origin, dirs = pixel_rays(cam)
    _, index, _, _ = cast_rays(scene, origin, dirs)
    return float(np.mean((index >= 0) & (index != wall_index)))


# --------------------------------------------------------------------------
# scene generators


def _frontal_quad(center, width, height, texture, seed) -> Quad:
    cx, cy, cz = center
    return Quad([cx - width / 2, cy - height / 2, cz], [width, 0, 0], [0, height, 0], texture, seed)


def gen_scene(kind: str, seed: int, n_quads: int = 4, reference: Camera | None = None) -> QuadScene:
    """Deterministic scene of the given kind.

    ``wall+occluder`` places an occluder hiding 10-40% of the wall from the
    camera at the origin (``reference``, default 64x64 at 60 degrees FOV).
    """
    if kind not in SCENE_KINDS:
        raise ValueError(f"unknown scene kind {kind!r}; expected one of {SCENE_KINDS}")
    rng = np.random.default_rng(seed)
    wall = _frontal_quad((0.0, 0.0, WALL_DEPTH), 10.0, 10.0, "noise", int(rng.integers(2**31)))
    bounds = ((-5.0, -5.0, 0.5), (5.0, 5.0, WALL_DEPTH + 0.5))
    if kind == "wall":
        return QuadScene((wall,), kind, seed, bounds)
    if kind == "wall+occluder":
        ref = reference or Camera.from_fov(64, 64, 60.0)
        for _ in range(1000):
            z = rng.uniform(2.2, 2.8)
            w = rng.uniform(0.7, 1.5)
            h = rng.uniform(0.7, 1.5)
            cx, cy = rng.uniform(-0.4, 0.4, 2)
            occ = _frontal_quad((cx, cy, z), w, h, "stripes", int(rng.integers(2**31)))
            scene = QuadScene((wall, occ), kind, seed, bounds)
            if 0.12 <= occluded_fraction(scene, ref) <= 0.38:
                return scene
        raise RuntimeError("could not place an occluder")  # unreachable for sane references
    if kind == "room-corner":
        floor_y = rng.uniform(1.0, 1.5)
        side_x = rng.uniform(-2.0, -1.2)
        back = _frontal_quad((0.0, 0.0, WALL_DEPTH), 10.0, 10.0, "noise", int(rng.integers(2**31)))
        floor = Quad([-5, floor_y, 0.5], [10, 0, 0], [0, 0, WALL_DEPTH - 0.5], "noise", int(rng.integers(2**31)))
        side = Quad([side_x, -5, 0.5], [0, 0, WALL_DEPTH - 0.5], [0, 10, 0], "stripes", int(rng.integers(2**31)))
        return QuadScene((back, floor, side), kind, seed, bounds)
    if n_quads < 1:
        raise ValueError("random-quads needs at least one quad")
    quads = [wall]
    for _ in range(n_quads):
        center = np.array([rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2), rng.uniform(1.8, 3.5)])
        eu = rng.normal(size=3) * np.array([1, 1, 0.3])
        eu *= rng.uniform(0.4, 1.0) / np.linalg.norm(eu)
        ev = np.cross([0, 0, 1.0], eu) + rng.normal(scale=0.1, size=3)
        ev *= rng.uniform(0.4, 1.0) / np.linalg.norm(ev)
        texture = str(rng.choice(["noise", "stripes"]))
        quads.append(Quad(center - 0.5 * (eu + ev), eu, ev, texture, int(rng.integers(2**31))))
    return QuadScene(tuple(quads), kind, seed, bounds)
