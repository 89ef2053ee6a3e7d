"""Encoder stub, camera-aware transformer and hierarchical Gaussian decoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .camera import Camera, inverse_depth_samples, normalize_poses, pixel_rays, plane_sweep, plucker
from .config import ModelConfig
from .gaussians import Gaussians, ScaleRange, gaussians_from_raw, ray_distance
from .tensor import LayerNorm, Linear, ShapeError, matmul, softmax
from .volume import CostStrategy, FusionWeights, build_volume, fuse, multi_view_average, volume_channels

__all__ = [
    "EncoderStub",
    "Attention",
    "SwiGLU",
    "Block",
    "transformer_forward",
    "HierarchicalDecoder",
    "H3R",
    "Prediction",
    "assemble_target_tokens",
    "latent_plucker",
]


def _nchw(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 3, 1, 2)


def _nhwc(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 2, 3, 1)


class EncoderStub(nn.Module):
    """Two stride-2 conv stages: ``[N, H, W, 3] -> [N, H/4, W/4, c]``, each view independently."""

    def __init__(self, channels: int, trainable: bool = True):
        super().__init__()
        mid = max(channels // 2, 8)
        self.conv1 = nn.Conv2d(3, mid, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(mid, channels, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(channels, channels, 3, padding=1)
        self.set_trainable(trainable)

    def set_trainable(self, trainable: bool) -> None:
        for p in self.parameters():
            p.requires_grad_(trainable)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        N, H, W, _ = images.shape
        if H % 4 or W % 4:
            raise ShapeError(f"encoder: image size {H}x{W} not divisible by 4")
        x = F.silu(self.conv1(_nchw(images)))
        x = F.silu(self.conv2(x))
        return _nhwc(self.conv3(x))


class Attention(nn.Module):
    """Multi-head self-attention with L2-normalised queries/keys and a learnable per-head temperature."""

    def __init__(self, dim: int, heads: int, qk_scale: float):
        super().__init__()
        self.heads = heads
        self.wq = Linear(dim, dim, bias=False)
        self.wk = Linear(dim, dim, bias=False)
        self.wv = Linear(dim, dim, bias=False)
        self.wo = Linear(dim, dim)
        self.qk_scale = nn.Parameter(torch.full((heads,), float(qk_scale)))

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        T, D = x.shape
        return x.reshape(T, self.heads, D // self.heads).transpose(0, 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        q = F.normalize(self._split(self.wq(x)), dim=-1, eps=1e-6)
        k = F.normalize(self._split(self.wk(x)), dim=-1, eps=1e-6)
        return matmul(q, k.transpose(-1, -2)) * self.qk_scale.reshape(-1, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        attn = softmax(self.logits(x), -1)
        out = matmul(attn, self._split(self.wv(x)))
        return self.wo(out.transpose(0, 1).reshape(x.shape))


class SwiGLU(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.w1 = Linear(dim, hidden, bias=False)
        self.w3 = Linear(dim, hidden, bias=False)
        self.w2 = Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.w2(F.silu(self.w1(x)) * self.w3(x))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_hidden: int, qk_scale: float):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, qk_scale)
        self.norm2 = LayerNorm(dim)
        self.ffn = SwiGLU(dim, mlp_hidden)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        z = z + self.attn(self.norm1(z))
        return z + self.ffn(self.norm2(z))


def transformer_forward(z: torch.Tensor, r: torch.Tensor, pos_emb: Linear, blocks) -> torch.Tensor:
    """Add the ray embedding once, then run the pre-LN blocks over the ``[T, c']`` token sequence."""
    if z.dim() != 2 or r.shape != (z.shape[0], 6):
        raise ShapeError(f"transformer: tokens {tuple(z.shape)} and rays {tuple(r.shape)} disagree")
    z = z + pos_emb(r)
    for block in blocks:
        z = block(z)
    return z


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(F.silu(self.conv1(F.silu(x))))


class HierarchicalDecoder(nn.Module):
    """Latent tokens at 1/4 resolution to per-pixel channels via two (nearest x2, conv, ResBlock) stages.

    ``skip_channels`` extra full-resolution inputs (the view's image) join before the last stage.
    """

    def __init__(self, in_dim: int, widths, out_channels: int, skip_channels: int = 0):
        super().__init__()
        w0, w1, w2 = widths
        self.skip_channels = skip_channels
        self.stem = nn.Conv2d(in_dim, w0, 3, padding=1)
        self.res0 = ResBlock(w0)
        self.up1 = nn.Conv2d(w0, w1, 3, padding=1)
        self.res1 = ResBlock(w1)
        self.up2 = nn.Conv2d(w1 + skip_channels, w2, 3, padding=1)
        self.res2 = ResBlock(w2)
        self.head = nn.Conv2d(w2, out_channels, 3, padding=1)

    def forward(self, z: torch.Tensor, skip: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = self.res0(self.stem(_nchw(z)))
        x = self.res1(self.up1(F.interpolate(x, scale_factor=2, mode="nearest")))
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        if self.skip_channels:
            if skip is None:
                skip = torch.zeros(x.shape[0], x.shape[2], x.shape[3], self.skip_channels, dtype=x.dtype)
            x = torch.cat([x, _nchw(skip)], dim=1)
        x = self.res2(self.up2(x))
        return _nhwc(self.head(F.silu(x)))


def latent_plucker(camera: Camera, h: int, w: int) -> np.ndarray:
    """Plücker map ``[h, w, 6]`` of the latent grid of ``camera``."""
    o, d = pixel_rays(camera.at_resolution(w, h))
    return plucker(o, d)


def assemble_target_tokens(
    target_cameras: list[Camera], h: int, w: int, dim: int, dtype=None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Zero feature tokens and real Plücker rays for posed views without images."""
    dtype = dtype or torch.get_default_dtype()
    if not target_cameras:
        return torch.zeros(0, dim, dtype=dtype), torch.zeros(0, 6, dtype=dtype)
    rays = np.concatenate([latent_plucker(c, h, w).reshape(-1, 6) for c in target_cameras])
    return torch.zeros(len(rays), dim, dtype=dtype), torch.as_tensor(rays, dtype=dtype)


@dataclass
class Prediction:
    raw: torch.Tensor  # [N (+M), H, W, 12] raw Gaussian channels, distance already activated
    gaussians: Gaussians
    target_images: Optional[torch.Tensor]  # [M, H, W, 3] from the auxiliary head
    tokens_in: torch.Tensor  # [T, c'] tokens before the ray embedding
    tokens_out: torch.Tensor  # [T, c']
    n_context_tokens: int


class H3R(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c, hid = cfg.latent_channels, cfg.hidden
        self.strategy = CostStrategy.parse(cfg.cost_strategy)
        self.encoder = EncoderStub(c, cfg.encoder_trainable)
        self.fusion = FusionWeights(c, volume_channels(self.strategy, cfg.sweep_planes, c), hid)
        self.pos_emb = Linear(6, hid)
        self.transformer = nn.ModuleList(Block(hid, cfg.heads, cfg.mlp_hidden, cfg.qk_scale) for _ in range(cfg.layers))
        skip = 3 if cfg.image_skip else 0
        self.decoder = HierarchicalDecoder(hid, cfg.decoder_widths, 11 + cfg.depth_bins, skip)
        self.aux_head = HierarchicalDecoder(hid, cfg.decoder_widths, 3)
        self.scale_range = ScaleRange(cfg.s_min, cfg.s_max)
        self._init_heads()

    def _init_heads(self) -> None:
        with torch.no_grad():
            head = self.decoder.head
            head.weight.mul_(0.1)
            head.bias.zero_()
            head.bias[0:3] = 0.5  # rgb
            head.bias[3:6] = -2.0  # scale logits: ~2 px splats
            head.bias[6] = 1.0  # quaternion w
            head.bias[10] = 1.0  # opacity logit

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(images)

    def fused_tokens(self, x: torch.Tensor, cameras: list[Camera], near: float, far: float) -> torch.Tensor:
        """Per-view fused latents ``[N, h, w, c']`` from encoded views ``x`` ``[N, h, w, c]``."""
        samples = inverse_depth_samples(near, far, self.cfg.sweep_planes)
        out = []
        for i, cam_i in enumerate(cameras):
            volumes = [
                build_volume(x[i], plane_sweep(x[j], cam_i, cam_j, samples), self.strategy, j, i)
                for j, cam_j in enumerate(cameras)
                if j != i
            ]
            out.append(fuse(x[i], multi_view_average(volumes), self.fusion))
        return torch.stack(out)

    def decode_gaussians(self, feats: torch.Tensor, skip: Optional[torch.Tensor], near: float, far: float) -> torch.Tensor:
        """Raw per-pixel maps ``[V, H, W, 12]``; channel 11 holds the activated ray distance."""
        head = self.decoder(feats, skip)
        samples = inverse_depth_samples(near, far, self.cfg.depth_bins)
        t = ray_distance(head[..., 11:], samples)
        return torch.cat([head[..., :11], t.unsqueeze(-1)], dim=-1)

    def predict_target_views(self, feats: torch.Tensor) -> torch.Tensor:
        """Auxiliary RGB predictions ``[M, H, W, 3]`` from final-layer target features ``[M, h, w, c']``."""
        if feats.shape[0] == 0:
            h, w = feats.shape[1:3]
            return torch.zeros(0, 4 * h, 4 * w, 3, dtype=feats.dtype)
        return torch.sigmoid(self.aux_head(feats))

    def forward(
        self,
        images: torch.Tensor,
        cameras: list[Camera],
        near: Optional[float] = None,
        far: Optional[float] = None,
        target_cameras: Optional[list[Camera]] = None,
    ) -> Prediction:
        near = self.cfg.near if near is None else near
        far = self.cfg.far if far is None else far
        target_cameras = list(target_cameras or [])
        N, H, W, _ = images.shape
        if N < 2:
            raise ShapeError("H3R needs at least two context views")
        if len(cameras) != N:
            raise ShapeError(f"{N} images but {len(cameras)} cameras")
        x = self.encode(images)
        h, w = x.shape[1:3]
        z = self.fused_tokens(x, cameras, near, far)

        ray_cams = cameras + target_cameras
        if self.cfg.normalize_poses:
            poses, _ = normalize_poses([c.pose for c in ray_cams])
            ray_cams = [Camera(c.intrinsics, p) for c, p in zip(ray_cams, poses)]
        dtype = z.dtype
        r_ctx = torch.as_tensor(np.concatenate([latent_plucker(c, h, w).reshape(-1, 6) for c in ray_cams[:N]]), dtype=dtype)
        z_t, r_t = assemble_target_tokens(ray_cams[N:], h, w, self.cfg.hidden, dtype)
        tokens = torch.cat([z.reshape(-1, self.cfg.hidden), z_t])
        rays = torch.cat([r_ctx, r_t])
        out = transformer_forward(tokens, rays, self.pos_emb, self.transformer)

        M = len(target_cameras)
        n_ctx = N * h * w
        feats = out.reshape(N + M, h, w, -1)
        skip = None
        if self.cfg.image_skip:
            skip = torch.cat([images, torch.zeros(M, H, W, 3, dtype=images.dtype)])
        raw = self.decode_gaussians(feats, skip, near, far)
        all_cams = cameras + target_cameras
        gaussians = Gaussians.concat([gaussians_from_raw(raw[v], all_cams[v], self.scale_range) for v in range(N + M)])
        target_images = self.predict_target_views(feats[N:]) if M else None
        return Prediction(raw, gaussians, target_images, tokens, out, n_ctx)
