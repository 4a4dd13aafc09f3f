"""Tile-binned Gaussian splat rasterizer with an analytic backward pass.

Scenes are stored as struct-of-arrays. Per pixel, contributors are the
non-culled Gaussians within Mahalanobis distance 3 of the pixel center,
composited front to back in (depth, index) order until the remaining
transmittance drops below ``T_EPS``. Tiling only prunes candidates; it never
changes which Gaussians contribute, so results match an exhaustive per-pixel
evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numba
import numpy as np

from .geometry import LOWPASS_FLOOR, NEAR_PLANE, Camera, Quaternion

TILE = 8
MAHALANOBIS_CUTOFF = 3.0
T_EPS = 1e-4
DEPTH_VALID_ALPHA = 0.02
SH_C1 = 0.4886025119029199


def sh_coeff_count(degree: int) -> int:
    if degree not in (0, 1):
        raise ValueError(f"unsupported sh degree {degree}")
    return (degree + 1) ** 2


@dataclass
class FloatImage:
    """(H, W, C) float raster. ``semantics`` is one of color, depth, mask, alpha."""

    data: np.ndarray
    semantics: str = "color"

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise ValueError(f"expected (H, W, C) array, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        self.data = data
        if self.semantics not in ("color", "depth", "mask", "alpha"):
            raise ValueError(f"unknown semantics {self.semantics!r}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class Gaussian3D:
    mu: np.ndarray
    opacity: float
    rot: Quaternion
    scales: np.ndarray
    color: np.ndarray  # (K, 3) coefficients, K = 1 or 4

    def __post_init__(self):
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError("opacity outside [0, 1]")
        if not np.all(np.asarray(self.scales) > 0):
            raise ValueError("invalid scale")


@dataclass
class GaussianScene:
    means: np.ndarray  # (N, 3)
    opacities: np.ndarray  # (N,)
    quats: np.ndarray  # (N, 4) w, x, y, z
    scales: np.ndarray  # (N, 3)
    colors: np.ndarray  # (N, K, 3)
    sh_degree: int = 0
    scene_id: str = ""

    def __post_init__(self):
        self.means = np.ascontiguousarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.opacities = np.ascontiguousarray(self.opacities, dtype=np.float64).reshape(n)
        self.quats = np.ascontiguousarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.scales = np.ascontiguousarray(self.scales, dtype=np.float64).reshape(n, 3)
        k = sh_coeff_count(self.sh_degree)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64).reshape(n, k, 3)

    def __len__(self) -> int:
        return len(self.means)

    def __iter__(self) -> Iterator[Gaussian3D]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            self.means[i].copy(),
            float(self.opacities[i]),
            Quaternion(*self.quats[i]).normalized(),
            self.scales[i].copy(),
            self.colors[i].copy(),
        )

    @property
    def gaussians(self) -> list[Gaussian3D]:
        return list(self)

    @classmethod
    def from_gaussians(cls, gaussians, sh_degree: int = 0, scene_id: str = "") -> "GaussianScene":
        gaussians = list(gaussians)
        return cls(
            np.array([g.mu for g in gaussians]).reshape(-1, 3),
            np.array([g.opacity for g in gaussians]),
            np.array([g.rot.as_array() for g in gaussians]).reshape(-1, 4),
            np.array([g.scales for g in gaussians]).reshape(-1, 3),
            np.array([np.asarray(g.color).reshape(-1, 3) for g in gaussians]),
            sh_degree,
            scene_id,
        )

    def copy(self) -> "GaussianScene":
        return GaussianScene(
            self.means.copy(), self.opacities.copy(), self.quats.copy(), self.scales.copy(),
            self.colors.copy(), self.sh_degree, self.scene_id,
        )

    def subset(self, index) -> "GaussianScene":
        return GaussianScene(
            self.means[index], self.opacities[index], self.quats[index], self.scales[index],
            self.colors[index], self.sh_degree, self.scene_id,
        )

    def validate(self) -> None:
        if len(self) == 0:
            raise ValueError("empty scene")
        if np.any(self.opacities < 0) or np.any(self.opacities > 1):
            raise ValueError("opacity outside [0, 1]")
        if np.any(self.scales <= 0):
            raise ValueError("invalid scale")
        if np.any(np.linalg.norm(self.quats, axis=1) < 1e-12):
            raise ValueError("degenerate quaternion")


@dataclass
class SceneGradients:
    d_mu: np.ndarray
    d_opacity: np.ndarray
    d_rot: np.ndarray  # w.r.t. the raw (unnormalized) quaternion
    d_scales: np.ndarray
    d_color: np.ndarray
    d_mean2d: np.ndarray = field(repr=False, default=None)  # pixel-space, for densification

    def all_finite(self) -> bool:
        return all(
            np.all(np.isfinite(a)) for a in (self.d_mu, self.d_opacity, self.d_rot, self.d_scales, self.d_color)
        )


@dataclass
class RasterState:
    """Per-Gaussian projections and tile lists shared by forward and backward."""

    mean2d: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    rgb: np.ndarray
    visible: np.ndarray
    tile_offsets: np.ndarray
    tile_ids: np.ndarray
    width: int
    height: int


@dataclass
class RenderOutput:
    color: FloatImage
    mean_depth: FloatImage
    accum_alpha: FloatImage
    counts: np.ndarray
    state: RasterState = field(repr=False, default=None)

    @property
    def depth_valid(self) -> np.ndarray:
        return self.accum_alpha.data[:, :, 0] >= DEPTH_VALID_ALPHA


# --------------------------------------------------------------------------
# kernels


@numba.njit(cache=True, inline="always")
def _quat_rot_into(q, R):
    n = np.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    w = q[0] / n
    x = q[1] / n
    y = q[2] / n
    z = q[3] / n
    R[0, 0] = 1 - 2 * (y * y + z * z)
    R[0, 1] = 2 * (x * y - w * z)
    R[0, 2] = 2 * (x * z + w * y)
    R[1, 0] = 2 * (x * y + w * z)
    R[1, 1] = 1 - 2 * (x * x + z * z)
    R[1, 2] = 2 * (y * z - w * x)
    R[2, 0] = 2 * (x * z - w * y)
    R[2, 1] = 2 * (y * z + w * x)
    R[2, 2] = 1 - 2 * (x * x + y * y)
    return n


@numba.njit(cache=True, inline="always")
def _project_cov(mu, q, s, W, t, fx, fy, R, Sig, T, floor):
    """Fills R (rotation), Sig (3D covariance) and T = J W; returns camera point and 2D covariance."""
    px = W[0, 0] * mu[0] + W[0, 1] * mu[1] + W[0, 2] * mu[2] + t[0]
    py = W[1, 0] * mu[0] + W[1, 1] * mu[1] + W[1, 2] * mu[2] + t[1]
    pz = W[2, 0] * mu[0] + W[2, 1] * mu[1] + W[2, 2] * mu[2] + t[2]
    qn = _quat_rot_into(q, R)
    for a in range(3):
        for b in range(a, 3):
            acc = 0.0
            for c in range(3):
                acc += R[a, c] * R[b, c] * s[c] * s[c]
            Sig[a, b] = acc
            Sig[b, a] = acc
    j00 = fx / pz
    j02 = -fx * px / (pz * pz)
    j11 = fy / pz
    j12 = -fy * py / (pz * pz)
    for c in range(3):
        T[0, c] = j00 * W[0, c] + j02 * W[2, c]
        T[1, c] = j11 * W[1, c] + j12 * W[2, c]
    c00 = 0.0
    c01 = 0.0
    c11 = 0.0
    for a in range(3):
        ta0 = 0.0
        ta1 = 0.0
        for b in range(3):
            ta0 += Sig[a, b] * T[0, b]
            ta1 += Sig[a, b] * T[1, b]
        c00 += T[0, a] * ta0
        c01 += T[1, a] * ta0
        c11 += T[1, a] * ta1
    return px, py, pz, qn, c00 + floor, c01, c11 + floor


@numba.njit(cache=True)
def _preprocess(means, quats, scales, colors, W, t, fx, fy, cx, cy, width, height, floor):
    n = means.shape[0]
    k = colors.shape[1]
    mean2d = np.zeros((n, 2))
    conic = np.zeros((n, 3))
    depth = np.zeros(n)
    rgb = np.zeros((n, 3))
    bbox = np.zeros((n, 4), dtype=np.int64)
    visible = np.zeros(n, dtype=np.bool_)
    R = np.empty((3, 3))
    Sig = np.empty((3, 3))
    T = np.empty((2, 3))
    cam0 = -(W[0, 0] * t[0] + W[1, 0] * t[1] + W[2, 0] * t[2])
    cam1 = -(W[0, 1] * t[0] + W[1, 1] * t[1] + W[2, 1] * t[2])
    cam2 = -(W[0, 2] * t[0] + W[1, 2] * t[1] + W[2, 2] * t[2])
    for i in range(n):
        pz = W[2, 0] * means[i, 0] + W[2, 1] * means[i, 1] + W[2, 2] * means[i, 2] + t[2]
        depth[i] = pz
        if pz <= NEAR_PLANE:
            continue
        px, py, pz, qn, a_, b_, c_ = _project_cov(means[i], quats[i], scales[i], W, t, fx, fy, R, Sig, T, floor)
        det = a_ * c_ - b_ * b_
        if not det > 0:
            continue
        u = fx * px / pz + cx
        v = fy * py / pz + cy
        rx = MAHALANOBIS_CUTOFF * np.sqrt(a_)
        ry = MAHALANOBIS_CUTOFF * np.sqrt(c_)
        x0 = max(int(np.ceil(u - rx - 0.5)), 0)
        x1 = min(int(np.floor(u + rx - 0.5)), width - 1)
        y0 = max(int(np.ceil(v - ry - 0.5)), 0)
        y1 = min(int(np.floor(v + ry - 0.5)), height - 1)
        if x0 > x1 or y0 > y1:
            continue
        mean2d[i, 0] = u
        mean2d[i, 1] = v
        conic[i, 0] = c_ / det
        conic[i, 1] = -b_ / det
        conic[i, 2] = a_ / det
        bbox[i, 0] = x0
        bbox[i, 1] = x1
        bbox[i, 2] = y0
        bbox[i, 3] = y1
        visible[i] = True
        for ch in range(3):
            rgb[i, ch] = colors[i, 0, ch]
        if k == 4:
            d0 = means[i, 0] - cam0
            d1 = means[i, 1] - cam1
            d2 = means[i, 2] - cam2
            dn = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
            for ch in range(3):
                rgb[i, ch] += SH_C1 * (-d1 * colors[i, 1, ch] + d2 * colors[i, 2, ch] - d0 * colors[i, 3, ch]) / dn
    return mean2d, conic, depth, rgb, bbox, visible


@numba.njit(cache=True)
def _bin_tiles(order, bbox, visible, tiles_x, tiles_y):
    ntiles = tiles_x * tiles_y
    counts = np.zeros(ntiles + 1, dtype=np.int64)
    for i in order:
        if not visible[i]:
            continue
        for ty in range(bbox[i, 2] // TILE, bbox[i, 3] // TILE + 1):
            for tx in range(bbox[i, 0] // TILE, bbox[i, 1] // TILE + 1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    ids = np.empty(offsets[-1], dtype=np.int64)
    for i in order:
        if not visible[i]:
            continue
        for ty in range(bbox[i, 2] // TILE, bbox[i, 3] // TILE + 1):
            for tx in range(bbox[i, 0] // TILE, bbox[i, 1] // TILE + 1):
                tile = ty * tiles_x + tx
                ids[fill[tile]] = i
                fill[tile] += 1
    return offsets, ids


@numba.njit(cache=True)
def _rasterize_fwd(mean2d, conic, depth, rgb, opacities, tile_offsets, tile_ids, width, height):
    tiles_x = (width + TILE - 1) // TILE
    color = np.zeros((height, width, 3))
    alpha_acc = np.zeros((height, width))
    depth_acc = np.zeros((height, width))
    counts = np.zeros((height, width), dtype=np.int32)
    cut2 = MAHALANOBIS_CUTOFF * MAHALANOBIS_CUTOFF
    for py in range(height):
        for px in range(width):
            tile = (py // TILE) * tiles_x + px // TILE
            fx_ = px + 0.5
            fy_ = py + 0.5
            T = 1.0
            r = 0.0
            g_ = 0.0
            b = 0.0
            dsum = 0.0
            cnt = 0
            for j in range(tile_offsets[tile], tile_offsets[tile + 1]):
                i = tile_ids[j]
                dx = fx_ - mean2d[i, 0]
                dy = fy_ - mean2d[i, 1]
                m2 = conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy
                if m2 > cut2:
                    continue
                a = opacities[i] * np.exp(-0.5 * m2)
                w = a * T
                r += w * rgb[i, 0]
                g_ += w * rgb[i, 1]
                b += w * rgb[i, 2]
                dsum += w * depth[i]
                T *= 1.0 - a
                cnt += 1
                if T < T_EPS:
                    break
            color[py, px, 0] = r
            color[py, px, 1] = g_
            color[py, px, 2] = b
            alpha_acc[py, px] = 1.0 - T
            depth_acc[py, px] = dsum
            counts[py, px] = cnt
    return color, alpha_acc, depth_acc, counts


@numba.njit(cache=True)
def _rasterize_bwd(mean2d, conic, rgb, opacities, tile_offsets, tile_ids, width, height, upstream):
    n = mean2d.shape[0]
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    d_mean2d = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    d_opac = np.zeros(n)
    d_rgb = np.zeros((n, 3))
    cut2 = MAHALANOBIS_CUTOFF * MAHALANOBIS_CUTOFF
    maxlen = 0
    for tile in range(tiles_x * tiles_y):
        maxlen = max(maxlen, tile_offsets[tile + 1] - tile_offsets[tile])
    buf_i = np.empty(maxlen, dtype=np.int64)
    buf_a = np.empty(maxlen)
    buf_T = np.empty(maxlen)
    buf_dx = np.empty(maxlen)
    buf_dy = np.empty(maxlen)
    for py in range(height):
        for px in range(width):
            u0 = upstream[py, px, 0]
            u1 = upstream[py, px, 1]
            u2 = upstream[py, px, 2]
            if u0 == 0.0 and u1 == 0.0 and u2 == 0.0:
                continue
            tile = (py // TILE) * tiles_x + px // TILE
            fx_ = px + 0.5
            fy_ = py + 0.5
            T = 1.0
            m = 0
            for j in range(tile_offsets[tile], tile_offsets[tile + 1]):
                i = tile_ids[j]
                dx = fx_ - mean2d[i, 0]
                dy = fy_ - mean2d[i, 1]
                m2 = conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy
                if m2 > cut2:
                    continue
                a = opacities[i] * np.exp(-0.5 * m2)
                buf_i[m] = i
                buf_a[m] = a
                buf_T[m] = T
                buf_dx[m] = dx
                buf_dy[m] = dy
                m += 1
                T *= 1.0 - a
                if T < T_EPS:
                    break
            # color behind the current contributor, composited from transmittance 1
            b0 = 0.0
            b1 = 0.0
            b2 = 0.0
            for k in range(m - 1, -1, -1):
                i = buf_i[k]
                a = buf_a[k]
                Tk = buf_T[k]
                w = a * Tk
                d_rgb[i, 0] += w * u0
                d_rgb[i, 1] += w * u1
                d_rgb[i, 2] += w * u2
                c0 = rgb[i, 0]
                c1 = rgb[i, 1]
                c2 = rgb[i, 2]
                d_a = Tk * ((c0 - b0) * u0 + (c1 - b1) * u1 + (c2 - b2) * u2)
                b0 = a * c0 + (1.0 - a) * b0
                b1 = a * c1 + (1.0 - a) * b1
                b2 = a * c2 + (1.0 - a) * b2
                o = opacities[i]
                if o > 0.0:
                    g = a / o
                else:
                    dx = buf_dx[k]
                    dy = buf_dy[k]
                    g = np.exp(-0.5 * (conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy))
                d_opac[i] += d_a * g
                d_pow = d_a * o * g
                dx = buf_dx[k]
                dy = buf_dy[k]
                d_mean2d[i, 0] += d_pow * (conic[i, 0] * dx + conic[i, 1] * dy)
                d_mean2d[i, 1] += d_pow * (conic[i, 1] * dx + conic[i, 2] * dy)
                d_conic[i, 0] += d_pow * (-0.5 * dx * dx)
                d_conic[i, 1] += d_pow * (-0.5 * dx * dy)
                d_conic[i, 2] += d_pow * (-0.5 * dy * dy)
    return d_mean2d, d_conic, d_opac, d_rgb


@numba.njit(cache=True)
def _chain_gaussians(means, quats, scales, colors, W, t, fx, fy, floor, visible,
                     d_mean2d, d_conic, d_rgb):
    n = means.shape[0]
    k = colors.shape[1]
    d_mu = np.zeros((n, 3))
    d_q = np.zeros((n, 4))
    d_s = np.zeros((n, 3))
    d_col = np.zeros((n, k, 3))
    R = np.empty((3, 3))
    Sig = np.empty((3, 3))
    T = np.empty((2, 3))
    G_Sig = np.empty((3, 3))
    G_T = np.empty((2, 3))
    G_M = np.empty((3, 3))
    qh = np.empty(4)
    dqh = np.empty(4)
    cam0 = -(W[0, 0] * t[0] + W[1, 0] * t[1] + W[2, 0] * t[2])
    cam1 = -(W[0, 1] * t[0] + W[1, 1] * t[1] + W[2, 1] * t[2])
    cam2 = -(W[0, 2] * t[0] + W[1, 2] * t[1] + W[2, 2] * t[2])
    for i in range(n):
        if not visible[i]:
            continue
        s = scales[i]
        x, y, z, qn, a_, b_, c_ = _project_cov(means[i], quats[i], s, W, t, fx, fy, R, Sig, T, floor)
        det = a_ * c_ - b_ * b_
        q00 = c_ / det
        q01 = -b_ / det
        q11 = a_ / det
        g00 = d_conic[i, 0]
        g01 = d_conic[i, 1]
        g11 = d_conic[i, 2]
        # dL/dΣ' = -Q G Q for the symmetric conic Q
        h00 = q00 * g00 + q01 * g01
        h01 = q00 * g01 + q01 * g11
        h10 = q01 * g00 + q11 * g01
        h11 = q01 * g01 + q11 * g11
        s00 = -(h00 * q00 + h01 * q01)
        s01 = -(h00 * q01 + h01 * q11)
        s11 = -(h10 * q01 + h11 * q11)
        # Σ' = T Σ T^T: dL/dΣ = T^T GS T, dL/dT = 2 GS T Σ
        for a in range(3):
            ga0 = s00 * T[0, a] + s01 * T[1, a]
            ga1 = s01 * T[0, a] + s11 * T[1, a]
            for b in range(3):
                G_Sig[a, b] = ga0 * T[0, b] + ga1 * T[1, b]
        for c in range(3):
            ts0 = 0.0
            ts1 = 0.0
            for b in range(3):
                ts0 += T[0, b] * Sig[b, c]
                ts1 += T[1, b] * Sig[b, c]
            G_T[0, c] = 2.0 * (s00 * ts0 + s01 * ts1)
            G_T[1, c] = 2.0 * (s01 * ts0 + s11 * ts1)
        # T = J W
        gj00 = G_T[0, 0] * W[0, 0] + G_T[0, 1] * W[0, 1] + G_T[0, 2] * W[0, 2]
        gj02 = G_T[0, 0] * W[2, 0] + G_T[0, 1] * W[2, 1] + G_T[0, 2] * W[2, 2]
        gj11 = G_T[1, 0] * W[1, 0] + G_T[1, 1] * W[1, 1] + G_T[1, 2] * W[1, 2]
        gj12 = G_T[1, 0] * W[2, 0] + G_T[1, 1] * W[2, 1] + G_T[1, 2] * W[2, 2]
        du = d_mean2d[i, 0]
        dv = d_mean2d[i, 1]
        iz = 1.0 / z
        iz2 = iz * iz
        iz3 = iz2 * iz
        dp0 = du * fx * iz - gj02 * fx * iz2
        dp1 = dv * fy * iz - gj12 * fy * iz2
        dp2 = (
            -du * fx * x * iz2
            - dv * fy * y * iz2
            - gj00 * fx * iz2
            + gj02 * 2.0 * fx * x * iz3
            - gj11 * fy * iz2
            + gj12 * 2.0 * fy * y * iz3
        )
        for c in range(3):
            d_mu[i, c] = W[0, c] * dp0 + W[1, c] * dp1 + W[2, c] * dp2
        # Σ = M M^T with M = R diag(s)
        for a in range(3):
            for b in range(3):
                acc = 0.0
                for c in range(3):
                    acc += (G_Sig[a, c] + G_Sig[c, a]) * R[c, b]
                G_M[a, b] = acc * s[b]
        for b in range(3):
            acc = 0.0
            for a in range(3):
                acc += G_M[a, b] * R[a, b]
            d_s[i, b] = acc
            for a in range(3):
                G_M[a, b] *= s[b]  # now dL/dR
        for j in range(4):
            qh[j] = quats[i, j] / qn
        w_ = qh[0]
        xq = qh[1]
        yq = qh[2]
        zq = qh[3]
        dqh[0] = 2 * (-zq * G_M[0, 1] + yq * G_M[0, 2] + zq * G_M[1, 0] - xq * G_M[1, 2] - yq * G_M[2, 0] + xq * G_M[2, 1])
        dqh[1] = 2 * (yq * G_M[0, 1] + zq * G_M[0, 2] + yq * G_M[1, 0] - 2 * xq * G_M[1, 1] - w_ * G_M[1, 2]
                      + zq * G_M[2, 0] + w_ * G_M[2, 1] - 2 * xq * G_M[2, 2])
        dqh[2] = 2 * (-2 * yq * G_M[0, 0] + xq * G_M[0, 1] + w_ * G_M[0, 2] + xq * G_M[1, 0] + zq * G_M[1, 2]
                      - w_ * G_M[2, 0] + zq * G_M[2, 1] - 2 * yq * G_M[2, 2])
        dqh[3] = 2 * (-2 * zq * G_M[0, 0] - w_ * G_M[0, 1] + xq * G_M[0, 2] + w_ * G_M[1, 0] - 2 * zq * G_M[1, 1]
                      + yq * G_M[1, 2] + xq * G_M[2, 0] + yq * G_M[2, 1])
        proj = qh[0] * dqh[0] + qh[1] * dqh[1] + qh[2] * dqh[2] + qh[3] * dqh[3]
        for j in range(4):
            d_q[i, j] = (dqh[j] - qh[j] * proj) / qn
        for ch in range(3):
            d_col[i, 0, ch] = d_rgb[i, ch]
        if k == 4:
            e0 = means[i, 0] - cam0
            e1 = means[i, 1] - cam1
            e2 = means[i, 2] - cam2
            dn = np.sqrt(e0 * e0 + e1 * e1 + e2 * e2)
            dirx = e0 / dn
            diry = e1 / dn
            dirz = e2 / dn
            gx = 0.0
            gy = 0.0
            gz = 0.0
            for ch in range(3):
                d_col[i, 1, ch] = -SH_C1 * diry * d_rgb[i, ch]
                d_col[i, 2, ch] = SH_C1 * dirz * d_rgb[i, ch]
                d_col[i, 3, ch] = -SH_C1 * dirx * d_rgb[i, ch]
                gx += -SH_C1 * colors[i, 3, ch] * d_rgb[i, ch]
                gy += -SH_C1 * colors[i, 1, ch] * d_rgb[i, ch]
                gz += SH_C1 * colors[i, 2, ch] * d_rgb[i, ch]
            dot = dirx * gx + diry * gy + dirz * gz
            d_mu[i, 0] += (gx - dirx * dot) / dn
            d_mu[i, 1] += (gy - diry * dot) / dn
            d_mu[i, 2] += (gz - dirz * dot) / dn
    return d_mu, d_q, d_s, d_col


# --------------------------------------------------------------------------
# public API


def eval_gaussian_2d(sigma2d, dx) -> float:
    """Unnormalized density ``exp(-0.5 dx^T Σ^-1 dx)``."""
    sigma2d = np.asarray(sigma2d, dtype=np.float64)
    dx = np.asarray(dx, dtype=np.float64)
    return float(np.exp(-0.5 * dx @ np.linalg.solve(sigma2d, dx)))


def _cam_args(cam: Camera):
    return (
        np.ascontiguousarray(cam.pose.rotation),
        np.ascontiguousarray(cam.pose.translation),
        float(cam.fx), float(cam.fy), float(cam.cx), float(cam.cy),
    )


def prepare(scene: GaussianScene, cam: Camera) -> RasterState:
    """Project Gaussians, depth-sort them and bin them into screen tiles."""
    if len(scene) == 0:
        raise ValueError("empty scene")
    W, t, fx, fy, cx, cy = _cam_args(cam)
    mean2d, conic, depth, rgb, bbox, visible = _preprocess(
        scene.means, scene.quats, scene.scales, scene.colors, W, t, fx, fy, cx, cy,
        cam.width, cam.height, LOWPASS_FLOOR,
    )
    order = np.argsort(depth, kind="stable")
    tiles_x = (cam.width + TILE - 1) // TILE
    tiles_y = (cam.height + TILE - 1) // TILE
    offsets, ids = _bin_tiles(order, bbox, visible, tiles_x, tiles_y)
    return RasterState(mean2d, conic, depth, rgb, visible, offsets, ids, cam.width, cam.height)


def render(scene: GaussianScene, cam: Camera) -> RenderOutput:
    state = prepare(scene, cam)
    color, alpha, dsum, counts = _rasterize_fwd(
        state.mean2d, state.conic, state.depth, state.rgb, scene.opacities,
        state.tile_offsets, state.tile_ids, cam.width, cam.height,
    )
    valid = alpha >= DEPTH_VALID_ALPHA
    mean_depth = np.where(valid, dsum / np.where(valid, alpha, 1.0), 0.0)
    return RenderOutput(
        FloatImage(color, "color"),
        FloatImage(mean_depth, "depth"),
        FloatImage(alpha, "alpha"),
        counts,
        state,
    )


def render_backward(scene: GaussianScene, cam: Camera, upstream, state: RasterState | None = None) -> SceneGradients:
    """Gradients of ``sum(upstream * color)`` with respect to every Gaussian attribute."""
    up = upstream.data if isinstance(upstream, FloatImage) else np.asarray(upstream)
    if up.shape != (cam.height, cam.width, 3):
        raise ValueError(f"upstream shape {up.shape} does not match image {(cam.height, cam.width, 3)}")
    if state is None:
        state = prepare(scene, cam)
    up = np.ascontiguousarray(up, dtype=np.float64)
    d_mean2d, d_conic, d_opac, d_rgb = _rasterize_bwd(
        state.mean2d, state.conic, state.rgb, scene.opacities, state.tile_offsets, state.tile_ids,
        cam.width, cam.height, up,
    )
    W, t, fx, fy, _, _ = _cam_args(cam)
    d_mu, d_q, d_s, d_col = _chain_gaussians(
        scene.means, scene.quats, scene.scales, scene.colors, W, t, fx, fy, LOWPASS_FLOOR,
        state.visible, d_mean2d, d_conic, d_rgb,
    )
    return SceneGradients(d_mu, d_opac, d_q, d_s, d_col, d_mean2d)


def render_depth(scene: GaussianScene, cam: Camera) -> FloatImage:
    """Mean depth in channel 0 (0 where invalid) and a 0/1 validity flag in channel 1."""
    out = render(scene, cam)
    valid = out.depth_valid
    return FloatImage(np.stack([out.mean_depth.data[:, :, 0], valid.astype(np.float64)], axis=-1), "depth")
