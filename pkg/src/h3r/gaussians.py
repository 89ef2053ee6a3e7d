"""Activation of raw per-pixel network channels into 3D Gaussians.

Raw channel layout (last axis, 12 channels):

====== ======= =========================
slice  name    activation
====== ======= =========================
0:3    rgb     ReLU (zero-order SH color)
3:6    scale   sigmoid into [s_min, s_max] pixels, then world units
6:10   rotation  L2 normalisation
10     opacity sigmoid
11     t       ray distance (already activated)
====== ======= =========================
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .camera import Camera, DepthSamples, pixel_rays
from .tensor import ContractError, ShapeError, softmax

__all__ = [
    "RAW_CHANNELS",
    "RGB",
    "SCALE",
    "ROTATION",
    "OPACITY",
    "DISTANCE",
    "ScaleRange",
    "Gaussians",
    "ray_distance",
    "scale_activation",
    "normalize_quaternion",
    "activate",
    "center_from_distance",
    "gaussians_from_raw",
    "write_splats",
    "read_splats",
]

RAW_CHANNELS = 12
RGB = slice(0, 3)
SCALE = slice(3, 6)
ROTATION = slice(6, 10)
OPACITY = 10
DISTANCE = 11


@dataclass(frozen=True)
class ScaleRange:
    s_min: float = 0.5
    s_max: float = 15.0

    def __post_init__(self):
        if not (0 < self.s_min < self.s_max):
            raise ContractError(f"ScaleRange needs 0 < s_min < s_max, got {self.s_min}, {self.s_max}")


@dataclass
class Gaussians:
    """Activated splats, one row per Gaussian."""

    means: torch.Tensor  # [G, 3] world
    scales: torch.Tensor  # [G, 3] world units
    quats: torch.Tensor  # [G, 4] unit (w, x, y, z)
    opacities: torch.Tensor  # [G]
    rgbs: torch.Tensor  # [G, 3]
    degenerate_quats: int = 0

    def __len__(self) -> int:
        return self.means.shape[0]

    @staticmethod
    def concat(parts: list["Gaussians"]) -> "Gaussians":
        return Gaussians(
            torch.cat([p.means for p in parts]),
            torch.cat([p.scales for p in parts]),
            torch.cat([p.quats for p in parts]),
            torch.cat([p.opacities for p in parts]),
            torch.cat([p.rgbs for p in parts]),
            sum(p.degenerate_quats for p in parts),
        )

    def index(self, idx) -> "Gaussians":
        return Gaussians(self.means[idx], self.scales[idx], self.quats[idx], self.opacities[idx], self.rgbs[idx])

    def detach(self) -> "Gaussians":
        return Gaussians(
            *(getattr(self, f.name).detach() for f in fields(self) if f.name != "degenerate_quats"),
            degenerate_quats=self.degenerate_quats,
        )


def ray_distance(logits: torch.Tensor, samples: DepthSamples) -> torch.Tensor:
    """Expected depth ``sum softmax(logits) * d`` over the last axis."""
    if logits.shape[-1] != len(samples):
        raise ShapeError(f"ray_distance: {logits.shape[-1]} logits for {len(samples)} depth samples")
    d = torch.as_tensor(samples.values, dtype=logits.dtype)
    return (softmax(logits, -1) * d).sum(-1)


def scale_activation(scale_logits: torch.Tensor, scale_range: ScaleRange, p_world, t) -> torch.Tensor:
    """Pixel-space scale in ``[s_min, s_max]`` converted to world units at distance ``t``.

    ``p_world`` is the footprint of one pixel at unit depth (1/fx).
    """
    w = torch.sigmoid(scale_logits)
    s_pixel = (1 - w) * scale_range.s_min + w * scale_range.s_max
    return s_pixel * p_world * t


def normalize_quaternion(raw: torch.Tensor, eps: float = 1e-8) -> tuple[torch.Tensor, int]:
    """Unit quaternions from raw 4-vectors; near-zero inputs become the identity rotation.

    Returns the quaternions and the number of degenerate inputs replaced.
    """
    norm = torch.linalg.vector_norm(raw, dim=-1, keepdim=True)
    degenerate = norm < eps
    identity = torch.zeros_like(raw)
    identity[..., 0] = 1
    q = torch.where(degenerate, identity, raw / torch.where(degenerate, torch.ones_like(norm), norm))
    return q, int(degenerate.sum())


def activate(raw: torch.Tensor) -> dict:
    """Opacity, rotation and color from raw channels ``[..., 12]``."""
    if raw.shape[-1] != RAW_CHANNELS:
        raise ShapeError(f"activate: expected {RAW_CHANNELS} channels, got {raw.shape[-1]}")
    quats, degenerate = normalize_quaternion(raw[..., ROTATION])
    return {
        "opacity": torch.sigmoid(raw[..., OPACITY]),
        "quat": quats,
        "rgb": torch.relu(raw[..., RGB]),
        "degenerate_quats": degenerate,
    }


def center_from_distance(origins: torch.Tensor, directions: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    return origins + t.unsqueeze(-1) * directions


def gaussians_from_raw(raw: torch.Tensor, camera: Camera, scale_range: ScaleRange = ScaleRange()) -> Gaussians:
    """Pixel-aligned Gaussians of one view from its ``[H, W, 12]`` raw map."""
    H, W = raw.shape[:2]
    if (camera.height, camera.width) != (H, W):
        camera = camera.at_resolution(W, H)
    o, d = pixel_rays(camera)
    o = torch.as_tensor(o, dtype=raw.dtype)
    d = torch.as_tensor(d, dtype=raw.dtype)
    t = raw[..., DISTANCE]
    act = activate(raw)
    scales = scale_activation(raw[..., SCALE], scale_range, 1.0 / camera.intrinsics.fx, t.unsqueeze(-1))
    means = center_from_distance(o, d, t)
    return Gaussians(
        means.reshape(-1, 3),
        scales.reshape(-1, 3),
        act["quat"].reshape(-1, 4),
        act["opacity"].reshape(-1),
        act["rgb"].reshape(-1, 3),
        act["degenerate_quats"],
    )


_RECORD = struct.Struct("<14f")


def write_splats(gaussians: Gaussians, path) -> None:
    """Little-endian splat file: u64 count then per Gaussian xyz, scale, quat, opacity, rgb as f32."""
    g = gaussians.detach()
    table = np.concatenate(
        [
            g.means.cpu().numpy().reshape(-1, 3),
            g.scales.cpu().numpy().reshape(-1, 3),
            g.quats.cpu().numpy().reshape(-1, 4),
            g.opacities.cpu().numpy().reshape(-1, 1),
            g.rgbs.cpu().numpy().reshape(-1, 3),
        ],
        axis=1,
    ).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", table.shape[0]))
        fh.write(table.tobytes())


def read_splats(path, dtype: torch.dtype = torch.float32) -> Gaussians:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise ValueError(f"{path}: too short for a splat file")
    (count,) = struct.unpack_from("<Q", data)
    expected = 8 + count * _RECORD.size
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {count} splats, found {len(data)}")
    table = torch.from_numpy(np.frombuffer(data, dtype="<f4", offset=8).reshape(count, 14).copy()).to(dtype)
    return Gaussians(table[:, 0:3], table[:, 3:6], table[:, 6:10], table[:, 10], table[:, 11:14])
