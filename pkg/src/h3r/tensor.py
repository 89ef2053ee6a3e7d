"""Tensor primitives with reverse-mode differentiation.

Tensors are ``torch.Tensor`` objects; torch's autograd graph plays the role of
the tape. The numerically sensitive primitives (softmax, layer norm, bilinear
sampling, Adam, global-norm clipping) are written out here so that every
module composes the same audited kernels.
"""

from __future__ import annotations

import contextlib
import math
from collections.abc import Iterable, Iterator
from typing import Optional

import torch
from torch import nn

__all__ = [
    "ShapeError",
    "ContractError",
    "NumericError",
    "Adam",
    "Linear",
    "LayerNorm",
    "adam_step",
    "backward",
    "bilinear_sample",
    "check_finite",
    "clip_global_norm",
    "default_dtype",
    "finite_checks",
    "global_norm",
    "layer_norm",
    "matmul",
    "precision",
    "softmax",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(ValueError):
    """A precondition other than shape was violated."""


class NumericError(FloatingPointError):
    """A non-finite value was produced from finite inputs."""


_CHECK_FINITE = True
EDGE_TOL = 1e-6


@contextlib.contextmanager
def finite_checks(enabled: bool) -> Iterator[None]:
    global _CHECK_FINITE
    previous, _CHECK_FINITE = _CHECK_FINITE, enabled
    try:
        yield
    finally:
        _CHECK_FINITE = previous


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        bad = int((~torch.isfinite(x)).sum())
        raise NumericError(f"{what}: {bad} non-finite value(s) in tensor of shape {tuple(x.shape)}")
    return x


def _checked(x: torch.Tensor, what: str) -> torch.Tensor:
    return check_finite(x, what) if _CHECK_FINITE else x


@contextlib.contextmanager
def precision(bits: int) -> Iterator[None]:
    """Temporarily switch the default floating type (32 for training, 64 for gradient checks)."""
    dtype = {32: torch.float32, 64: torch.float64}[bits]
    previous = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def default_dtype() -> torch.dtype:
    return torch.get_default_dtype()


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batched matrix product ``[..., m, k] @ [..., k, n]``."""
    sa, sb = tuple(a.shape), tuple(b.shape)
    if a.dim() < 2 or b.dim() < 2 or sa[-1] != sb[-2]:
        raise ShapeError(f"matmul: incompatible shapes {sa} and {sb}")
    try:
        torch.broadcast_shapes(sa[:-2], sb[:-2])
    except RuntimeError:
        raise ShapeError(f"matmul: batch dimensions of {sa} and {sb} do not broadcast") from None
    return _checked(torch.matmul(a, b), "matmul")


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    if not -x.dim() <= axis < x.dim():
        raise ContractError(f"softmax: axis {axis} invalid for rank {x.dim()}")
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return _checked(e / e.sum(dim=axis, keepdim=True), "softmax")


def layer_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return _checked(centered / torch.sqrt(var + eps) * gamma + beta, "layer_norm")


def bilinear_sample(image: torch.Tensor, coords: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample ``image[h, w, c]`` at continuous pixel coordinates ``coords[..., 2]`` = (x, y).

    Integer coordinates address pixel centers, so ``(2, 3)`` returns ``image[3, 2]``.
    Samples whose 2x2 neighbourhood leaves the image are zero with mask 0; the
    closed far edge (x == w - 1) is still valid, and coordinates within
    ``EDGE_TOL`` outside the border count as on it (absorbs homography round-off).
    """
    if image.dim() != 3 or coords.shape[-1] != 2:
        raise ShapeError(f"bilinear_sample: expected map [h,w,c] and coords [...,2], got {tuple(image.shape)} and {tuple(coords.shape)}")
    h, w, c = image.shape
    x = coords[..., 0]
    y = coords[..., 1]
    valid = (x >= -EDGE_TOL) & (x <= w - 1 + EDGE_TOL) & (y >= -EDGE_TOL) & (y <= h - 1 + EDGE_TOL)
    with torch.no_grad():
        x0 = torch.clamp(torch.floor(x), 0, max(w - 2, 0)).long()
        y0 = torch.clamp(torch.floor(y), 0, max(h - 2, 0)).long()
        x1 = torch.clamp(x0 + 1, max=w - 1)
        y1 = torch.clamp(y0 + 1, max=h - 1)
    fx = (x - x0.to(x.dtype)).unsqueeze(-1)
    fy = (y - y0.to(y.dtype)).unsqueeze(-1)
    flat = image.reshape(h * w, c)

    def gather(yy: torch.Tensor, xx: torch.Tensor) -> torch.Tensor:
        return flat[(yy * w + xx).reshape(-1)].reshape(*yy.shape, c)

    top = gather(y0, x0) * (1 - fx) + gather(y0, x1) * fx
    bottom = gather(y1, x0) * (1 - fx) + gather(y1, x1) * fx
    out = top * (1 - fy) + bottom * fy
    mask = valid.to(image.dtype)
    out = torch.where(valid.unsqueeze(-1), out, torch.zeros((), dtype=out.dtype))
    return _checked(out, "bilinear_sample"), mask


def backward(loss: torch.Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.numel() != 1 or loss.dim() > 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ContractError("backward: loss is not connected to any differentiable input")
    check_finite(loss.detach(), "loss")
    loss.reshape(()).backward()


class Linear(nn.Module):
    """Affine map ``x @ weight.T + bias`` over the last axis."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True, init_scale: Optional[float] = None):
        super().__init__()
        scale = init_scale if init_scale is not None else 1.0 / math.sqrt(in_features)
        self.weight = nn.Parameter(torch.empty(out_features, in_features).uniform_(-scale, scale))
        self.bias = nn.Parameter(torch.zeros(out_features)) if bias else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        lead = x.shape[:-1]
        y = matmul(x.reshape(-1, x.shape[-1]), self.weight.t())
        if self.bias is not None:
            y = y + self.bias
        return y.reshape(*lead, -1)


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return layer_norm(x, self.weight, self.bias, self.eps)


def _as_list(params) -> list[torch.Tensor]:
    if isinstance(params, nn.Module):
        return [p for p in params.parameters() if p.requires_grad]
    return list(params)


def global_norm(tensors: Iterable[Optional[torch.Tensor]]) -> float:
    total = 0.0
    for t in tensors:
        if t is not None:
            total += float(torch.sum(t.detach().double() ** 2))
    return math.sqrt(total)


def clip_global_norm(params, max_norm: float = 0.5) -> float:
    """Rescale the ``.grad`` of ``params`` so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    params = _as_list(params)
    norm = global_norm(p.grad for p in params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad.mul_(scale)
    return norm


def adam_step(
    params: list[torch.Tensor],
    grads: list[Optional[torch.Tensor]],
    state: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update in place, no weight decay.

    ``state`` holds ``step`` and per-parameter first/second moments ``m``, ``v``.
    """
    if "m" not in state:
        state["step"] = 0
        state["m"] = [torch.zeros_like(p) for p in params]
        state["v"] = [torch.zeros_like(p) for p in params]
    if len(state["m"]) != len(params):
        raise ShapeError(f"adam_step: state tracks {len(state['m'])} tensors, got {len(params)}")
    state["step"] += 1
    step = state["step"]
    bc1 = 1 - beta1**step
    bc2 = 1 - beta2**step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state["m"], state["v"]):
            if m.shape != p.shape:
                raise ShapeError(f"adam_step: moment shape {tuple(m.shape)} != parameter shape {tuple(p.shape)}")
            if g is None:
                g = torch.zeros_like(p)
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / bc1)


class Adam:
    """Stateful wrapper around :func:`adam_step` for a fixed parameter list."""

    def __init__(self, params, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = _as_list(params)
        self.betas = betas
        self.eps = eps
        self.state: dict = {}

    def step(self, lr: float) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, lr, self.betas[0], self.betas[1], self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
