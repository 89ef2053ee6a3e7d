"""Independent reference implementations used by the tests.

Everything here is written the slow, literal way on purpose: plain loops over
pixels and windows, central differences for gradients.
"""

import math

import numpy as np
import torch

from h3r.camera import Camera, Intrinsics, look_at


# ---------------------------------------------------------------------------
# gradients


def fd_check(fn, inputs, eps=1e-4, max_entries=64, seed=0):
    """Compare autograd against central differences for ``sum(w * fn(*inputs))``.

    ``inputs`` are float64 tensors; each gets up to ``max_entries`` probed
    entries. Returns the worst relative error over inputs, where the error of
    one input is ``max|analytic - numeric| / max(max|numeric|, 1e-6)``.
    """
    gen = torch.Generator().manual_seed(seed)
    inputs = [x.detach().clone().double().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    outs = out if isinstance(out, (tuple, list)) else (out,)
    weights = [torch.randn(o.shape, generator=gen, dtype=torch.float64) for o in outs]

    def scalar(*args):
        res = fn(*args)
        res = res if isinstance(res, (tuple, list)) else (res,)
        return sum((w * r).sum() for w, r in zip(weights, res))

    loss = scalar(*inputs)
    grads = torch.autograd.grad(loss, inputs, allow_unused=True)
    worst = 0.0
    rng = np.random.default_rng(seed)
    for k, (x, g) in enumerate(zip(inputs, grads)):
        g = torch.zeros_like(x) if g is None else g
        flat = x.detach().reshape(-1)
        n = flat.numel()
        idx = np.arange(n) if n <= max_entries else rng.choice(n, size=max_entries, replace=False)
        num, ana = [], []
        for i in idx:
            args_p = [a.detach().clone() for a in inputs]
            args_m = [a.detach().clone() for a in inputs]
            args_p[k].view(-1)[i] += eps
            args_m[k].view(-1)[i] -= eps
            with torch.no_grad():
                num.append(float((scalar(*args_p) - scalar(*args_m)) / (2 * eps)))
            ana.append(float(g.reshape(-1)[i]))
        num, ana = np.array(num), np.array(ana)
        err = np.max(np.abs(num - ana)) / max(np.max(np.abs(num)), 1e-6)
        worst = max(worst, float(err))
    return worst


# ---------------------------------------------------------------------------
# geometry


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_camera_pair(rng, size=16, spread=0.4):
    """Two cameras looking at a common point a few units away."""
    f = rng.uniform(0.8, 1.5) * size
    intr = Intrinsics(f, f * rng.uniform(0.9, 1.1), (size - 1) / 2 + rng.uniform(-1, 1), (size - 1) / 2, size, size)
    target = rng.normal(size=3) * 0.2 + np.array([0.0, 0.0, 4.0])
    c1 = rng.normal(size=3) * spread
    c2 = c1 + rng.normal(size=3) * spread
    return Camera(intr, look_at(c1, target)), Camera(intr, look_at(c2, target))


def bilinear_loop(image, x, y):
    """Sample ``image`` [h, w, c] at one point; zeros outside [0, w-1] x [0, h-1] (1e-6 slack)."""
    h, w, _ = image.shape
    tol = 1e-6
    if not (-tol <= x <= w - 1 + tol and -tol <= y <= h - 1 + tol):
        return np.zeros(image.shape[2]), 0.0
    x0 = min(max(int(math.floor(x)), 0), w - 2)
    y0 = min(max(int(math.floor(y)), 0), h - 2)
    fx, fy = x - x0, y - y0
    v = (
        (1 - fx) * (1 - fy) * image[y0, x0]
        + fx * (1 - fy) * image[y0, x0 + 1]
        + (1 - fx) * fy * image[y0 + 1, x0]
        + fx * fy * image[y0 + 1, x0 + 1]
    )
    return v, 1.0


def brute_warp(src, cam_i: Camera, cam_j: Camera, depth):
    """Back-project every pixel of view i to camera depth ``depth``, project into j, sample ``src``."""
    h, w, c = src.shape
    ci = cam_i.at_resolution(w, h)
    cj = cam_j.at_resolution(w, h)
    K = ci.intrinsics
    out = np.zeros((h, w, c))
    mask = np.zeros((h, w))
    for v in range(h):
        for u in range(w):
            p_cam = np.array([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth])
            p_world = ci.pose.R.T @ (p_cam - ci.pose.t)
            q = cj.pose.R @ p_world + cj.pose.t
            if q[2] <= 1e-9:
                continue
            x = cj.intrinsics.fx * q[0] / q[2] + cj.intrinsics.cx
            y = cj.intrinsics.fy * q[1] / q[2] + cj.intrinsics.cy
            out[v, u], mask[v, u] = bilinear_loop(src, x, y)
    return out, mask


# ---------------------------------------------------------------------------
# metrics


def ssim_direct(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03, max_val=1.0):
    """SSIM from the windowed definition, one window position at a time."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    r = np.arange(size) - (size - 1) / 2
    g1 = np.exp(-(r**2) / (2 * sigma**2))
    win = np.outer(g1, g1)
    win /= win.sum()
    c1, c2 = (k1 * max_val) ** 2, (k2 * max_val) ** 2
    H, W, C = a.shape
    per_channel = []
    for ch in range(C):
        vals = []
        for i in range(H - size + 1):
            for j in range(W - size + 1):
                x = a[i : i + size, j : j + size, ch]
                y = b[i : i + size, j : j + size, ch]
                mx = np.sum(win * x)
                my = np.sum(win * y)
                vx = np.sum(win * (x - mx) ** 2)
                vy = np.sum(win * (y - my) ** 2)
                cxy = np.sum(win * (x - mx) * (y - my))
                vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
        per_channel.append(np.mean(vals))
    return float(np.mean(per_channel))


# ---------------------------------------------------------------------------
# compositing


def front_to_back(colors, alphas, background):
    """C = sum_i c_i a_i prod_{j<i} (1 - a_j) + T_final * background, inputs sorted near to far."""
    T = 1.0
    out = np.zeros(3)
    for c, a in zip(colors, alphas):
        out += T * a * np.asarray(c)
        T *= 1 - a
    return out + T * np.asarray(background), 1 - T
