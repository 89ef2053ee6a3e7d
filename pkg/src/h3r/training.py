"""Reconstruction loss, learning-rate schedule, EMA and the training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .camera import Camera, flip_horizontal
from .config import RunConfig, TrainConfig, dump_config
from .network import H3R
from .rasterizer import render
from .scene import SceneBundle, View
from .tensor import Adam, NumericError, ShapeError, backward, check_finite, clip_global_norm

__all__ = [
    "LossWeights",
    "Schedule",
    "EmaState",
    "image_gradient",
    "reconstruction_loss",
    "lr_at",
    "ema_update",
    "Batch",
    "sample_batch",
    "flip_batch",
    "train_step",
    "Trainer",
]

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    lambda_perceptual: float = 0.05
    perceptual_enabled: bool = False
    gradient_weight: float = 1.0
    perceptual_fn: Optional[Callable[[torch.Tensor, torch.Tensor], torch.Tensor]] = None

    def __post_init__(self):
        if self.lambda_perceptual < 0 or self.gradient_weight < 0:
            raise ValueError("loss weights must be non-negative")


def image_gradient(image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Forward differences along x and y of ``[..., H, W, C]``; the last column/row is zero."""
    if image.shape[-3] < 2 or image.shape[-2] < 2:
        raise ShapeError(f"image_gradient: need H, W >= 2, got {tuple(image.shape)}")
    gx = torch.zeros_like(image)
    gy = torch.zeros_like(image)
    gx[..., :, :-1, :] = image[..., :, 1:, :] - image[..., :, :-1, :]
    gy[..., :-1, :, :] = image[..., 1:, :, :] - image[..., :-1, :, :]
    return gx, gy


def reconstruction_loss(target: torch.Tensor, pred: torch.Tensor, weights: LossWeights = LossWeights()) -> dict:
    """MSE + lambda * perceptual + MAE of image gradients. Returns the terms and ``total``."""
    if target.shape != pred.shape:
        raise ShapeError(f"reconstruction_loss: shapes {tuple(target.shape)} and {tuple(pred.shape)} differ")
    mse = ((pred - target) ** 2).mean()
    tx, ty = image_gradient(target)
    px, py = image_gradient(pred)
    grad_mae = 0.5 * ((px - tx).abs().mean() + (py - ty).abs().mean())
    total = mse + weights.gradient_weight * grad_mae
    perceptual = torch.zeros((), dtype=pred.dtype)
    if weights.perceptual_enabled:
        if weights.perceptual_fn is None:
            raise ValueError("perceptual loss enabled but no perceptual_fn supplied")
        perceptual = weights.perceptual_fn(target, pred)
        total = total + weights.lambda_perceptual * perceptual
    return {"total": total, "mse": mse, "grad_mae": grad_mae, "perceptual": perceptual}


@dataclass(frozen=True)
class Schedule:
    peak_lr: float = 1e-4
    min_lr: float = 5e-5
    warmup_steps: int = 3000
    decay_until: int = 150_000

    def __post_init__(self):
        if self.min_lr > self.peak_lr or self.warmup_steps >= self.decay_until:
            raise ValueError("need min_lr <= peak_lr and warmup_steps < decay_until")

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "Schedule":
        return cls(cfg.peak_lr, cfg.min_lr, cfg.warmup_steps, cfg.decay_until)


def lr_at(step: int, schedule: Schedule) -> float:
    """Linear warm-up to the peak, cosine down to ``min_lr`` at ``decay_until``, then constant."""
    if step < 0:
        raise ValueError("step must be non-negative")
    s = schedule
    if step < s.warmup_steps:
        return s.peak_lr * step / s.warmup_steps
    if step >= s.decay_until:
        return s.min_lr
    progress = (step - s.warmup_steps) / (s.decay_until - s.warmup_steps)
    return s.min_lr + (s.peak_lr - s.min_lr) * 0.5 * (1 + math.cos(math.pi * progress))


@dataclass
class EmaState:
    """Shadow parameters ``shadow <- decay * shadow + (1 - decay) * param``.

    Shadows start at zero; :meth:`averaged` divides out the ``1 - decay**n`` start-up bias.
    """

    decay: float = 0.999
    shadow: dict = field(default_factory=dict)
    updates: int = 0

    @classmethod
    def for_model(cls, model: torch.nn.Module, decay: float = 0.999) -> "EmaState":
        return cls(decay, {n: torch.zeros_like(p.detach()) for n, p in model.named_parameters()})

    def averaged(self) -> dict:
        if self.updates == 0:
            return {n: s.clone() for n, s in self.shadow.items()}
        correction = 1 - self.decay**self.updates
        return {n: s / correction for n, s in self.shadow.items()}


def ema_update(state: EmaState, params) -> None:
    items = params.named_parameters() if isinstance(params, torch.nn.Module) else params.items()
    with torch.no_grad():
        for name, p in items:
            shadow = state.shadow.get(name)
            if shadow is None:
                shadow = state.shadow[name] = torch.zeros_like(p)
            if shadow.shape != p.shape:
                raise ShapeError(f"ema_update: {name} shadow {tuple(shadow.shape)} vs param {tuple(p.shape)}")
            shadow.mul_(state.decay).add_(p.detach(), alpha=1 - state.decay)
    state.updates += 1


# ---------------------------------------------------------------------------


@dataclass
class Batch:
    images: torch.Tensor  # [N, H, W, 3]
    cameras: list[Camera]
    target_images: torch.Tensor  # [M, H, W, 3]
    target_cameras: list[Camera]
    near: float
    far: float


def _stack(views: list[View], dtype) -> torch.Tensor:
    return torch.as_tensor(np.stack([v.image for v in views]), dtype=dtype)


def batch_from_views(context: list[View], targets: list[View], near: float, far: float, dtype=None) -> Batch:
    dtype = dtype or torch.get_default_dtype()
    return Batch(
        _stack(context, dtype),
        [v.camera for v in context],
        _stack(targets, dtype) if targets else torch.zeros(0, *context[0].image.shape, dtype=dtype),
        [v.camera for v in targets],
        near,
        far,
    )


def sample_batch(scene: SceneBundle, cfg: TrainConfig, rng: np.random.Generator, dtype=None) -> Batch:
    """Context views from the scene's context set (size in [min_context, max_context]) plus target views."""
    context = scene.context
    n = int(rng.integers(cfg.min_context, min(cfg.max_context, len(context)) + 1))
    picked = sorted(rng.choice(len(context), size=n, replace=False)) if n < len(context) else range(len(context))
    targets = scene.targets
    m = min(cfg.targets_per_step, len(targets))
    chosen = sorted(rng.choice(len(targets), size=m, replace=False))
    return batch_from_views([context[i] for i in picked], [targets[i] for i in chosen], scene.near, scene.far, dtype)


def flip_batch(batch: Batch) -> Batch:
    """Mirror every image left-right and every camera consistently."""
    return Batch(
        torch.flip(batch.images, dims=[2]),
        [flip_horizontal(c) for c in batch.cameras],
        torch.flip(batch.target_images, dims=[2]),
        [flip_horizontal(c) for c in batch.target_cameras],
        batch.near,
        batch.far,
    )


def forward_losses(
    model: H3R,
    batch: Batch,
    include_target_poses: bool,
    weights: LossWeights,
    aux_weight: float = 1.0,
    background=(0.0, 0.0, 0.0),
) -> dict:
    """Render loss over target views, plus the auxiliary-head loss when target poses were given to the model."""
    pred = model(
        batch.images,
        batch.cameras,
        batch.near,
        batch.far,
        target_cameras=batch.target_cameras if include_target_poses else None,
    )
    terms = {"total": 0.0, "mse": 0.0, "grad_mae": 0.0, "render": 0.0, "aux": 0.0}
    M = len(batch.target_cameras)
    renders = []
    for k, cam in enumerate(batch.target_cameras):
        out = render(pred.gaussians, cam, background)
        renders.append(out.color)
        lk = reconstruction_loss(batch.target_images[k], out.color, weights)
        terms["render"] = terms["render"] + lk["total"] / M
        terms["mse"] = terms["mse"] + lk["mse"] / M
        terms["grad_mae"] = terms["grad_mae"] + lk["grad_mae"] / M
    terms["total"] = terms["render"]
    if include_target_poses and pred.target_images is not None and aux_weight > 0:
        aux = reconstruction_loss(batch.target_images, pred.target_images, weights)["total"]
        terms["aux"] = aux
        terms["total"] = terms["total"] + aux_weight * aux
    terms["renders"] = renders
    terms["prediction"] = pred
    return terms


def train_step(
    model: H3R,
    batch: Batch,
    optimizer: Adam,
    step: int,
    schedule: Schedule,
    ema: Optional[EmaState],
    rng: np.random.Generator,
    cfg: TrainConfig,
    weights: Optional[LossWeights] = None,
    accumulate: bool = False,
) -> dict:
    """One optimisation step: augment, forward, backward, clip, Adam, EMA.

    With ``accumulate`` the gradients are only accumulated (no clip/update), for gradient accumulation.
    """
    weights = weights or LossWeights(cfg.lambda_perceptual, cfg.perceptual, cfg.gradient_loss_weight)
    if rng.random() < cfg.flip_prob:
        batch = flip_batch(batch)
    include = bool(rng.random() < cfg.target_pose_prob)
    terms = forward_losses(model, batch, include, weights, cfg.aux_weight, cfg.background)
    loss = terms["total"]
    if not bool(torch.isfinite(loss.detach())):
        optimizer.zero_grad()
        raise NumericError(f"non-finite loss at step {step}: {float(loss.detach())}")
    backward(loss / cfg.grad_accum)
    lr = lr_at(step, schedule)
    metrics = {
        "step": step,
        "loss": float(loss.detach()),
        "mse": float(terms["mse"].detach()),
        "grad_mae": float(terms["grad_mae"].detach()),
        "psnr_train": float(-10 * math.log10(max(float(terms["mse"].detach()), 1e-10))),
        "lr": lr,
        "target_poses": include,
    }
    if accumulate:
        return metrics
    for p in optimizer.params:
        if p.grad is not None:
            check_finite(p.grad, "gradient")
    metrics["grad_norm"] = clip_global_norm(optimizer.params, cfg.grad_clip)
    optimizer.step(lr)
    optimizer.zero_grad()
    if ema is not None:
        ema_update(ema, model)
    return metrics


class Trainer:
    """Training loop over a list of scenes with CSV logging and periodic checkpoints."""

    CSV_FIELDS = ["step", "loss", "mse", "grad_mae", "psnr_train", "lr"]

    def __init__(self, cfg: RunConfig, scenes: list[SceneBundle], out_dir=None, model: Optional[H3R] = None):
        self.cfg = cfg
        self.scenes = scenes
        self.out_dir = Path(out_dir) if out_dir is not None else None
        torch.manual_seed(cfg.train.seed)
        self.model = model or H3R(cfg.model)
        self.optimizer = Adam(self.model)
        self.schedule = Schedule.from_config(cfg.train)
        self.ema = EmaState.for_model(self.model, cfg.train.ema_decay)
        self.rng = np.random.default_rng(cfg.train.seed)
        self.step = 0
        self.history: list[dict] = []

    def checkpoint(self, name: str) -> Path:
        from .checkpoint import save_checkpoint

        assert self.out_dir is not None
        path = self.out_dir / name
        save_checkpoint(self.model, path, ema=self.ema, config=self.cfg)
        return path

    def run(self, steps: Optional[int] = None, callback: Optional[Callable[[dict], None]] = None) -> list[dict]:
        steps = self.cfg.train.steps if steps is None else steps
        tc = self.cfg.train
        writer = None
        fh = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "config.ini").write_text(dump_config(self.cfg))
            fh = open(self.out_dir / "metrics.csv", "a" if self.step else "w", newline="")
            writer = csv.DictWriter(fh, fieldnames=self.CSV_FIELDS, extrasaction="ignore")
            if self.step == 0:
                writer.writeheader()
        start = time.time()
        try:
            for _ in range(steps):
                for k in range(tc.grad_accum):
                    scene = self.scenes[int(self.rng.integers(len(self.scenes)))]
                    batch = sample_batch(scene, tc, self.rng)
                    metrics = train_step(
                        self.model, batch, self.optimizer, self.step, self.schedule, self.ema, self.rng, tc,
                        accumulate=k < tc.grad_accum - 1,
                    )
                self.step += 1
                self.history.append(metrics)
                if writer is not None and (self.step % tc.log_every == 0 or self.step == 1):
                    writer.writerow(metrics)
                    fh.flush()
                if self.step % tc.log_every == 0:
                    log.info("step %d loss %.5f psnr %.2f lr %.2e (%.1fs)", self.step, metrics["loss"],
                             metrics["psnr_train"], metrics["lr"], time.time() - start)
                if callback is not None:
                    callback(metrics)
                if self.out_dir is not None and tc.checkpoint_every and self.step % tc.checkpoint_every == 0:
                    self.checkpoint(f"ckpt_{self.step:07d}.h3rt")
            if self.out_dir is not None:
                self.checkpoint("latest.h3rt")
        finally:
            if fh is not None:
                fh.close()
        return self.history
