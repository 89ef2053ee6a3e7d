"""Differentiable CPU splatting of 3D Gaussians.

Projection (EWA covariance, conics) runs in torch so gradients flow back to the
Gaussian fields; per-pixel front-to-back compositing runs in numba kernels with
an explicit backward pass.

Compositing rules, shared by every kernel:

* splats are visited in ascending camera depth, ties broken by their own attributes;
* a splat only touches pixels within Mahalanobis distance 3 of its mean;
* ``alpha = min(0.99, opacity * exp(-maha^2 / 2))`` and alphas below 1/255 are skipped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import os

import numba
import numpy as np
import torch

if "NUMBA_THREADING_LAYER" not in os.environ:
    # skip the TBB probe; the bundled TBB is often too old and only produces a warning
    numba.config.THREADING_LAYER = "omp"

from .camera import Camera
from .gaussians import Gaussians

__all__ = ["LOW_PASS", "ALPHA_MAX", "ALPHA_MIN", "TILE", "Splats2D", "RenderOutput", "quat_to_rotmat", "project", "render"]

LOW_PASS = 0.3
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
SUPPORT = 9.0  # squared Mahalanobis radius (3 sigma)
TILE = 16
NEAR_CLIP = 1e-2


@dataclass
class Splats2D:
    means2d: torch.Tensor  # [G, 2] pixels
    cov2d: torch.Tensor  # [G, 2, 2] pixels^2, low-pass included
    conic: torch.Tensor  # [G, 3] (a, b, c) of the inverse covariance
    depth: torch.Tensor  # [G]
    opacity: torch.Tensor  # [G]
    rgb: torch.Tensor  # [G, 3]
    visible: np.ndarray  # [G] bool, False for splats behind the near plane

    def __len__(self) -> int:
        return int(self.visible.sum())


@dataclass
class RenderOutput:
    color: torch.Tensor  # [H, W, 3]
    alpha: torch.Tensor  # [H, W]
    depth: torch.Tensor  # [H, W] alpha-weighted depth


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    w, x, y, z = q.unbind(-1)
    return torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    ).reshape(*q.shape[:-1], 3, 3)


def _mm(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # elementwise small-matrix product; keeps per-splat arithmetic independent of batch position
    return (a.unsqueeze(-1) * b.unsqueeze(-3)).sum(-2)


def project(gaussians: Gaussians, camera: Camera, near_clip: float = NEAR_CLIP) -> Splats2D:
    """EWA projection of world Gaussians into ``camera``'s image plane."""
    dtype = gaussians.means.dtype
    R = torch.as_tensor(camera.pose.R, dtype=dtype)
    t = torch.as_tensor(camera.pose.t, dtype=dtype)
    k = camera.intrinsics
    cam = gaussians.means @ R.T + t
    x, y, z = cam.unbind(-1)
    visible = (z > near_clip).detach().cpu().numpy()
    zs = torch.where(z > near_clip, z, torch.ones_like(z))
    means2d = torch.stack([k.fx * x / zs + k.cx, k.fy * y / zs + k.cy], dim=-1)

    M = _mm(R.expand(len(gaussians), 3, 3), quat_to_rotmat(gaussians.quats)) * gaussians.scales.unsqueeze(-2)
    sigma_cam = _mm(M, M.transpose(-1, -2))
    zero = torch.zeros_like(zs)
    J = torch.stack(
        [k.fx / zs, zero, -k.fx * x / (zs * zs), zero, k.fy / zs, -k.fy * y / (zs * zs)], dim=-1
    ).reshape(-1, 2, 3)
    cov = _mm(_mm(J, sigma_cam), J.transpose(-1, -2))
    cov = cov + LOW_PASS * torch.eye(2, dtype=dtype)
    a, b, c = cov[:, 0, 0], 0.5 * (cov[:, 0, 1] + cov[:, 1, 0]), cov[:, 1, 1]
    det = a * c - b * b
    conic = torch.stack([c / det, -b / det, a / det], dim=-1)
    return Splats2D(means2d, cov, conic, z, gaussians.opacities, gaussians.rgbs, visible)


# ---------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True, inline="always")
def _splat_alpha(px, py, mx, my, ca, cb, cc, op):
    dx = px - mx
    dy = py - my
    maha = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
    if maha > SUPPORT or maha < 0.0:
        return 0.0, 0.0, False, dx, dy
    g = math.exp(-0.5 * maha)
    a = op * g
    clamped = False
    if a > ALPHA_MAX:
        a = ALPHA_MAX
        clamped = True
    if a < ALPHA_MIN:
        return 0.0, g, False, dx, dy
    return a, g, clamped, dx, dy


@numba.njit(cache=True, inline="always")
def _composite_pixel(px, py, ids, lo, hi, mean, conic, opac, rgb, depth, bg, color, alpha, dmap, final_t):
    T = 1.0
    c0 = 0.0
    c1 = 0.0
    c2 = 0.0
    dd = 0.0
    for k in range(lo, hi):
        i = ids[k]
        a, g, cl, dx, dy = _splat_alpha(
            float(px), float(py), mean[i, 0], mean[i, 1], conic[i, 0], conic[i, 1], conic[i, 2], opac[i]
        )
        if a == 0.0:
            continue
        w = a * T
        c0 += w * rgb[i, 0]
        c1 += w * rgb[i, 1]
        c2 += w * rgb[i, 2]
        dd += w * depth[i]
        T *= 1.0 - a
    color[py, px, 0] = c0 + T * bg[0]
    color[py, px, 1] = c1 + T * bg[1]
    color[py, px, 2] = c2 + T * bg[2]
    alpha[py, px] = 1.0 - T
    dmap[py, px] = dd
    final_t[py, px] = T


@numba.njit(cache=True, parallel=True)
def _forward_tiled(mean, conic, opac, rgb, depth, bg, tile_ptr, tile_ids, H, W, tile, tiles_x, color, alpha, dmap, final_t):
    n_tiles = tile_ptr.shape[0] - 1
    for t in numba.prange(n_tiles):
        ty = t // tiles_x
        tx = t % tiles_x
        lo = tile_ptr[t]
        hi = tile_ptr[t + 1]
        for py in range(ty * tile, min((ty + 1) * tile, H)):
            for px in range(tx * tile, min((tx + 1) * tile, W)):
                _composite_pixel(px, py, tile_ids, lo, hi, mean, conic, opac, rgb, depth, bg, color, alpha, dmap, final_t)


@numba.njit(cache=True)
def _forward_naive(mean, conic, opac, rgb, depth, bg, order, H, W, color, alpha, dmap, final_t):
    for py in range(H):
        for px in range(W):
            _composite_pixel(px, py, order, 0, order.shape[0], mean, conic, opac, rgb, depth, bg, color, alpha, dmap, final_t)


@numba.njit(cache=True, parallel=True)
def _backward_tiled(
    mean, conic, opac, rgb, depth, bg, tile_ptr, tile_ids, H, W, tile, tiles_x,
    final_t, g_color, g_alpha, g_dmap, entry_grad, tile_bg_grad,
):
    # entry_grad[k] holds d/d(mx, my, ca, cb, cc, opacity, r, g, b, depth) for tile entry k
    n_tiles = tile_ptr.shape[0] - 1
    for t in numba.prange(n_tiles):
        ty = t // tiles_x
        tx = t % tiles_x
        lo = tile_ptr[t]
        hi = tile_ptr[t + 1]
        for py in range(ty * tile, min((ty + 1) * tile, H)):
            for px in range(tx * tile, min((tx + 1) * tile, W)):
                t_final = final_t[py, px]
                gc0 = g_color[py, px, 0]
                gc1 = g_color[py, px, 1]
                gc2 = g_color[py, px, 2]
                gd = g_dmap[py, px]
                ga = g_alpha[py, px]
                tile_bg_grad[t, 0] += gc0 * t_final
                tile_bg_grad[t, 1] += gc1 * t_final
                tile_bg_grad[t, 2] += gc2 * t_final
                behind = gc0 * bg[0] * t_final + gc1 * bg[1] * t_final + gc2 * bg[2] * t_final
                T = t_final
                for k in range(hi - 1, lo - 1, -1):
                    i = tile_ids[k]
                    a, g, cl, dx, dy = _splat_alpha(
                        float(px), float(py), mean[i, 0], mean[i, 1], conic[i, 0], conic[i, 1], conic[i, 2], opac[i]
                    )
                    if a == 0.0:
                        continue
                    T_before = T / (1.0 - a)
                    w = a * T_before
                    own = gc0 * rgb[i, 0] + gc1 * rgb[i, 1] + gc2 * rgb[i, 2] + gd * depth[i]
                    d_alpha = T_before * own - behind / (1.0 - a) + ga * t_final / (1.0 - a)
                    entry_grad[k, 6] += w * gc0
                    entry_grad[k, 7] += w * gc1
                    entry_grad[k, 8] += w * gc2
                    entry_grad[k, 9] += w * gd
                    behind += w * own
                    T = T_before
                    if not cl:
                        entry_grad[k, 5] += g * d_alpha
                        d_pow = a * d_alpha
                        entry_grad[k, 0] += d_pow * (conic[i, 0] * dx + conic[i, 1] * dy)
                        entry_grad[k, 1] += d_pow * (conic[i, 1] * dx + conic[i, 2] * dy)
                        entry_grad[k, 2] += d_pow * (-0.5 * dx * dx)
                        entry_grad[k, 3] += d_pow * (-dx * dy)
                        entry_grad[k, 4] += d_pow * (-0.5 * dy * dy)


@numba.njit(cache=True)
def _reduce_entries(tile_ids, entry_grad, n, out):
    for k in range(tile_ids.shape[0]):
        i = tile_ids[k]
        for j in range(entry_grad.shape[1]):
            out[i, j] += entry_grad[k, j]


@numba.njit(cache=True)
def _bin_tiles(order, mean, radius, H, W, tile, tiles_x, tiles_y):
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    spans = np.empty((order.shape[0], 4), dtype=np.int64)
    for k in range(order.shape[0]):
        i = order[k]
        x0 = max(int(math.ceil(mean[i, 0] - radius[i, 0])), 0)
        x1 = min(int(math.floor(mean[i, 0] + radius[i, 0])), W - 1)
        y0 = max(int(math.ceil(mean[i, 1] - radius[i, 1])), 0)
        y1 = min(int(math.floor(mean[i, 1] + radius[i, 1])), H - 1)
        if x0 > x1 or y0 > y1:
            spans[k, 0] = 1
            spans[k, 1] = 0
            spans[k, 2] = 1
            spans[k, 3] = 0
            continue
        spans[k, 0] = x0 // tile
        spans[k, 1] = x1 // tile
        spans[k, 2] = y0 // tile
        spans[k, 3] = y1 // tile
        for ty in range(spans[k, 2], spans[k, 3] + 1):
            for tx in range(spans[k, 0], spans[k, 1] + 1):
                counts[ty * tiles_x + tx + 1] += 1
    ptr = np.cumsum(counts)
    fill = ptr[:-1].copy()
    ids = np.empty(ptr[-1], dtype=np.int64)
    for k in range(order.shape[0]):
        for ty in range(spans[k, 2], spans[k, 3] + 1):
            for tx in range(spans[k, 0], spans[k, 1] + 1):
                t = ty * tiles_x + tx
                ids[fill[t]] = order[k]
                fill[t] += 1
    return ptr, ids


# ---------------------------------------------------------------------------


def _sort_order(splats: Splats2D) -> np.ndarray:
    """Visible splats near to far. Depth ties break on the splat's own render attributes, so
    the order (and therefore the image) does not depend on where a splat sits in the input."""
    idx = np.nonzero(splats.visible)[0]
    keys = [splats.depth.unsqueeze(-1), splats.means2d, splats.opacity.unsqueeze(-1), splats.rgb, splats.conic]
    table = np.concatenate([k.detach().cpu().numpy().astype(np.float64) for k in keys], axis=1)[idx]
    # lexsort treats the last key as primary
    return idx[np.lexsort((idx,) + tuple(table[:, c] for c in range(table.shape[1] - 1, -1, -1)))].astype(np.int64)


def _bin(splats: Splats2D, order: np.ndarray, H: int, W: int, tile: int):
    cov = splats.cov2d.detach().cpu().numpy().astype(np.float64)
    radius = 3.0 * np.sqrt(np.stack([cov[:, 0, 0], cov[:, 1, 1]], axis=-1)) * (1 + 1e-6) + 1e-6
    mean = splats.means2d.detach().cpu().numpy().astype(np.float64)
    tiles_x = -(-W // tile)
    tiles_y = -(-H // tile)
    ptr, ids = _bin_tiles(order, mean, radius, H, W, tile, tiles_x, tiles_y)
    return ptr, ids, tiles_x


def _np(t: torch.Tensor) -> np.ndarray:
    return np.ascontiguousarray(t.detach().cpu().numpy().astype(np.float64))


class _Composite(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means2d, conic, opacity, rgb, depth, background, H, W, tile, order, tiled):
        arrays = [_np(x) for x in (means2d, conic, opacity, rgb, depth, background)]
        color = np.zeros((H, W, 3))
        alpha = np.zeros((H, W))
        dmap = np.zeros((H, W))
        final_t = np.ones((H, W))
        if tiled:
            ptr, ids, tiles_x = tile
            _forward_tiled(*arrays, ptr, ids, H, W, TILE, tiles_x, color, alpha, dmap, final_t)
        else:
            _forward_naive(*arrays, order, H, W, color, alpha, dmap, final_t)
            tile = (np.array([0, len(order)], dtype=np.int64), order, 1)
        ctx.arrays = arrays
        ctx.tile = tile
        ctx.tiled = tiled
        ctx.final_t = final_t
        ctx.HW = (H, W)
        ctx.n = means2d.shape[0]
        dtype = means2d.dtype
        return (torch.from_numpy(color).to(dtype), torch.from_numpy(alpha).to(dtype), torch.from_numpy(dmap).to(dtype))

    @staticmethod
    def backward(ctx, g_color, g_alpha, g_dmap):
        H, W = ctx.HW
        ptr, ids, tiles_x = ctx.tile
        tile = TILE if ctx.tiled else max(H, W)
        entry_grad = np.zeros((len(ids), 10))
        tile_bg = np.zeros((len(ptr) - 1, 3))
        _backward_tiled(
            *ctx.arrays, ptr, ids, H, W, tile, tiles_x, ctx.final_t,
            _np(g_color), _np(g_alpha), _np(g_dmap), entry_grad, tile_bg,
        )
        per_splat = np.zeros((ctx.n, 10))
        _reduce_entries(ids, entry_grad, ctx.n, per_splat)
        dtype = g_color.dtype
        out = torch.from_numpy(per_splat).to(dtype)
        g_bg = torch.from_numpy(tile_bg.sum(0)).to(dtype)
        return out[:, 0:2], out[:, 2:5], out[:, 5], out[:, 6:9], out[:, 9], g_bg, None, None, None, None, None


def render(
    gaussians: Gaussians,
    camera: Camera,
    background=(0.0, 0.0, 0.0),
    tiled: bool = True,
) -> RenderOutput:
    """Render Gaussians into ``camera``; differentiable w.r.t. every Gaussian field and the background."""
    dtype = gaussians.means.dtype
    bg = background if torch.is_tensor(background) else torch.as_tensor(background, dtype=dtype)
    H, W = camera.height, camera.width
    if len(gaussians) == 0:
        color = bg.reshape(1, 1, 3).expand(H, W, 3).clone()
        zeros = torch.zeros(H, W, dtype=dtype)
        return RenderOutput(color, zeros, zeros.clone())
    splats = project(gaussians, camera)
    order = _sort_order(splats)
    tile = _bin(splats, order, H, W, TILE) if tiled else None
    color, alpha, dmap = _Composite.apply(
        splats.means2d, splats.conic, splats.opacity, splats.rgb, splats.depth, bg, H, W, tile, order, tiled
    )
    return RenderOutput(color, alpha, dmap)
