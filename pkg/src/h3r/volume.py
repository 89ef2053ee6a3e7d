"""Latent volumes built from plane-swept neighbour latents, and their fusion."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .tensor import ContractError, Linear, ShapeError

__all__ = [
    "CostStrategy",
    "LatentVolume",
    "FusionWeights",
    "volume_channels",
    "build_volume",
    "fuse",
    "multi_view_average",
]


class CostStrategy(str, enum.Enum):
    CORRELATION = "correlation"
    DIFFERENCE = "difference"
    COST_FREE = "cost-free"

    @classmethod
    def parse(cls, value) -> "CostStrategy":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            choices = ", ".join(s.value for s in cls)
            raise ContractError(f"unknown cost strategy {value!r} (choose from {choices})") from None


def volume_channels(strategy: CostStrategy, depth_planes: int, channels: int) -> int:
    strategy = CostStrategy.parse(strategy)
    return depth_planes if strategy is CostStrategy.CORRELATION else depth_planes * channels


@dataclass
class LatentVolume:
    values: torch.Tensor  # [h, w, d] or [h, w, d*c]
    strategy: CostStrategy
    source_view: Optional[int] = None
    reference_view: Optional[int] = None


def build_volume(
    x_i: torch.Tensor,
    sweep: torch.Tensor,
    strategy: CostStrategy,
    source_view: Optional[int] = None,
    reference_view: Optional[int] = None,
) -> LatentVolume:
    """Turn a plane sweep ``[h, w, d, c]`` of view j into a volume aligned with ``x_i`` ``[h, w, c]``."""
    strategy = CostStrategy.parse(strategy)
    if sweep.dim() != 4 or x_i.dim() != 3 or sweep.shape[:2] != x_i.shape[:2] or sweep.shape[3] != x_i.shape[2]:
        raise ShapeError(f"build_volume: reference {tuple(x_i.shape)} incompatible with sweep {tuple(sweep.shape)}")
    h, w, d, c = sweep.shape
    if strategy is CostStrategy.CORRELATION:
        values = (sweep * x_i.unsqueeze(2)).sum(-1) / math.sqrt(c)
    elif strategy is CostStrategy.DIFFERENCE:
        values = (sweep - x_i.unsqueeze(2)).reshape(h, w, d * c)
    else:
        values = sweep.reshape(h, w, d * c)
    return LatentVolume(values, strategy, source_view, reference_view)


class FusionWeights(nn.Module):
    """The two projections summed into a fused token: reference latent and its volume."""

    def __init__(self, channels: int, volume_dim: int, hidden: int):
        super().__init__()
        self.linear1 = Linear(channels, hidden)
        self.linear2 = Linear(volume_dim, hidden)

    def forward(self, x_i: torch.Tensor, volume: LatentVolume) -> torch.Tensor:
        return fuse(x_i, volume, self)


def fuse(x_i: torch.Tensor, volume: LatentVolume, weights: FusionWeights) -> torch.Tensor:
    if x_i.shape[-1] != weights.linear1.weight.shape[1]:
        raise ShapeError(f"fuse: latent has {x_i.shape[-1]} channels, Linear1 expects {weights.linear1.weight.shape[1]}")
    if volume.values.shape[-1] != weights.linear2.weight.shape[1]:
        raise ShapeError(
            f"fuse: volume has {volume.values.shape[-1]} channels, Linear2 expects {weights.linear2.weight.shape[1]}"
        )
    return weights.linear1(x_i) + weights.linear2(volume.values)


def multi_view_average(volumes: list[LatentVolume]) -> LatentVolume:
    """Pixel-wise mean of the volumes that several source views produce for one reference view."""
    if not volumes:
        raise ContractError("multi_view_average: no volumes given")
    strategies = {v.strategy for v in volumes}
    if len(strategies) != 1:
        raise ContractError(f"multi_view_average: mixed strategies {sorted(s.value for s in strategies)}")
    shapes = {tuple(v.values.shape) for v in volumes}
    if len(shapes) != 1:
        raise ShapeError(f"multi_view_average: mixed shapes {sorted(shapes)}")
    if len(volumes) == 1:
        mean = volumes[0].values
    else:
        mean = torch.stack([v.values for v in volumes]).sum(0) / len(volumes)
    return LatentVolume(mean, volumes[0].strategy, None, volumes[0].reference_view)
