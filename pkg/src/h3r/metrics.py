"""Image metrics and bucketed evaluation of a trained model."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from scipy.signal import fftconvolve

from .camera import geometric_mid_depth, view_overlap
from .scene import SceneBundle
from .tensor import ShapeError

__all__ = ["PSNR_CAP", "psnr", "ssim", "gaussian_window", "SceneScore", "EvalReport", "overlap_bucket", "spread_views", "evaluate"]

PSNR_CAP = 99.0


def _as_array(image) -> np.ndarray:
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    return np.asarray(image, dtype=np.float64)


def psnr(a, b, max_val: float = 1.0) -> float:
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse / max_val**2))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, max_val: float = 1.0, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over valid window positions, computed per channel and averaged. Inputs are ``[H, W(, C)]``."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < window or a.shape[1] < window:
        raise ShapeError(f"ssim: image {a.shape[:2]} smaller than the {window}x{window} window")
    if np.array_equal(a, b):
        return 1.0
    g = gaussian_window(window, sigma)
    c1, c2 = (k1 * max_val) ** 2, (k2 * max_val) ** 2

    def filt(x):
        return fftconvolve(x, g[::-1, ::-1], mode="valid")

    values = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        values.append(np.mean(num / den))
    return float(np.mean(values))


@dataclass
class SceneScore:
    scene: str
    psnr: float
    ssim: float
    bucket: Optional[str] = None
    n_context: int = 0
    overlap: float = float("nan")


@dataclass
class EvalReport:
    scores: list[SceneScore] = field(default_factory=list)

    @staticmethod
    def _mean(scores) -> dict:
        if not scores:
            return {"psnr": float("nan"), "ssim": float("nan"), "count": 0}
        return {
            "psnr": sum(s.psnr for s in scores) / len(scores),
            "ssim": sum(s.ssim for s in scores) / len(scores),
            "count": len(scores),
        }

    @property
    def aggregate(self) -> dict:
        return self._mean(self.scores)

    def buckets(self) -> dict:
        groups: dict = {}
        for s in self.scores:
            groups.setdefault(s.bucket, []).append(s)
        return {key: self._mean(groups[key]) for key in sorted(groups, key=str)}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scene", "bucket", "n_context", "overlap", "psnr", "ssim"])
            for s in self.scores:
                w.writerow([s.scene, s.bucket, s.n_context, f"{s.overlap:.4f}", f"{s.psnr:.4f}", f"{s.ssim:.6f}"])
            for key, agg in self.buckets().items():
                w.writerow([f"mean[{key}]", key, "", "", f"{agg['psnr']:.4f}", f"{agg['ssim']:.6f}"])
            agg = self.aggregate
            w.writerow(["mean", "", "", "", f"{agg['psnr']:.4f}", f"{agg['ssim']:.6f}"])


def overlap_bucket(value: float, width: float = 0.05) -> str:
    """Label of the ``width``-wide bin of [0, 1] holding ``value`` (1.0 lands in the last bin)."""
    n = round(1 / width)
    k = min(int(math.floor(value / width)), n - 1)
    return f"{k * width:.2f}-{(k + 1) * width:.2f}"


def _scene_overlap(scene: SceneBundle) -> float:
    ctx = scene.context
    mid = geometric_mid_depth(scene.near, scene.far)
    pairs = [(i, j) for i in range(len(ctx)) for j in range(len(ctx)) if i != j]
    return float(np.mean([view_overlap(ctx[i].camera, ctx[j].camera, mid) for i, j in pairs]))


def spread_views(views: list, n: int) -> list:
    """``n`` views evenly spaced through ``views`` (first and last included)."""
    if n > len(views):
        raise ValueError(f"asked for {n} views, only {len(views)} available")
    return [views[int(round(x))] for x in np.linspace(0, len(views) - 1, n)]


def evaluate(model, scenes: list[SceneBundle], bucket: str = "none", n_context: Optional[int] = None,
             background=(0.0, 0.0, 0.0)) -> EvalReport:
    """Render every target view of every scene and score it; one score per scene (mean over its targets)."""
    from .rasterizer import render

    if bucket not in ("none", "overlap", "views"):
        raise ValueError(f"unknown bucket {bucket!r}")
    report = EvalReport()
    dtype = torch.get_default_dtype()
    model.eval()
    with torch.no_grad():
        for scene in scenes:
            ctx = scene.context if n_context is None else spread_views(scene.context, n_context)
            if len(ctx) < 2:
                raise ValueError(f"scene {scene.name}: need at least two context views")
            if not scene.targets:
                raise ValueError(f"scene {scene.name}: no ground-truth target views")
            images = torch.as_tensor(np.stack([v.image for v in ctx]), dtype=dtype)
            pred = model(images, [v.camera for v in ctx], scene.near, scene.far)
            ps, ss = [], []
            for view in scene.targets:
                out = render(pred.gaussians, view.camera, background)
                img = out.color.clamp(0, 1).numpy()
                ps.append(psnr(view.image, img))
                ss.append(ssim(view.image, img))
            score = SceneScore(scene.name, float(np.mean(ps)), float(np.mean(ss)), n_context=len(ctx))
            if bucket == "overlap":
                score.overlap = _scene_overlap(scene)
                score.bucket = overlap_bucket(score.overlap)
            elif bucket == "views":
                score.bucket = str(len(ctx))
            report.scores.append(score)
    return report
