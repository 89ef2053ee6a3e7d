"""Pinhole cameras, pixel rays, Plücker coordinates and plane-sweep warping.

Conventions used throughout the package:

* extrinsics are camera-from-world, ``x_cam = R @ x_world + t``;
* the camera looks along +z with x to the right and y down;
* integer pixel coordinates address pixel centers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from .tensor import ContractError, bilinear_sample

__all__ = [
    "Intrinsics",
    "Pose",
    "Camera",
    "DepthSamples",
    "look_at",
    "pixel_rays",
    "plucker",
    "inverse_depth_samples",
    "homography",
    "homography_warp",
    "plane_sweep",
    "normalize_poses",
    "view_overlap",
    "flip_horizontal",
]


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ContractError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ContractError(
                f"principal point ({self.cx}, {self.cy}) outside a {self.width}x{self.height} image"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def rescaled(self, width: int, height: int) -> "Intrinsics":
        """Intrinsics of the same camera sampled on a ``width x height`` grid (half-pixel correct)."""
        sx = width / self.width
        sy = height / self.height
        # a principal point near the border may leave the coarse grid; that is still a valid camera
        out = object.__new__(Intrinsics)
        for name, value in (
            ("fx", self.fx * sx),
            ("fy", self.fy * sy),
            ("cx", (self.cx + 0.5) * sx - 0.5),
            ("cy", (self.cy + 0.5) * sy - 0.5),
            ("width", width),
            ("height", height),
        ):
            object.__setattr__(out, name, value)
        return out


@dataclass(frozen=True)
class Pose:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ContractError("Pose.R is not a proper rotation (tolerance 1e-6)")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t


@dataclass(frozen=True)
class Camera:
    intrinsics: Intrinsics
    pose: Pose

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    def at_resolution(self, width: int, height: int) -> "Camera":
        return replace(self, intrinsics=self.intrinsics.rescaled(width, height))

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points ``[..., 3]`` to pixel coordinates ``[..., 2]`` and camera depth."""
        cam = points @ self.pose.R.T + self.pose.t
        z = cam[..., 2]
        k = self.intrinsics
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack([k.fx * cam[..., 0] / z + k.cx, k.fy * cam[..., 1] / z + k.cy], axis=-1)
        return uv, z


def look_at(center, target, down=(0.0, 1.0, 0.0)) -> Pose:
    """Camera-from-world pose at ``center`` looking at ``target``; ``down`` is the world direction shown as image-down."""
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    forward /= np.linalg.norm(forward)
    right = np.cross(np.asarray(down, dtype=np.float64), forward)
    right /= np.linalg.norm(right)
    down_axis = np.cross(forward, right)
    R = np.stack([right, down_axis, forward])
    return Pose(R, -R @ center)


def pixel_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """World-frame ray origins and unit directions through every pixel center, each ``[h, w, 3]``."""
    k = camera.intrinsics
    v, u = np.meshgrid(np.arange(k.height, dtype=np.float64), np.arange(k.width, dtype=np.float64), indexing="ij")
    d_cam = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)
    d = d_cam @ camera.pose.R  # R^T applied to row vectors
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(camera.pose.center, d.shape).copy()
    return o, d


def plucker(origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Plücker coordinates ``[o x d, d]`` along the last axis, with ``d`` normalised first."""
    d = directions / np.linalg.norm(directions, axis=-1, keepdims=True)
    return np.concatenate([np.cross(origins, d), d], axis=-1)


@dataclass(frozen=True)
class DepthSamples:
    near: float
    far: float
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.values)


def inverse_depth_samples(near: float, far: float, count: int) -> DepthSamples:
    """``count`` depths from ``near`` to ``far`` with uniformly spaced inverse depth."""
    if not (0 < near < far):
        raise ContractError(f"inverse_depth_samples: need 0 < near < far, got near={near}, far={far}")
    if count < 2:
        raise ContractError(f"inverse_depth_samples: count must be >= 2, got {count}")
    values = 1.0 / np.linspace(1.0 / near, 1.0 / far, count)
    values[0], values[-1] = near, far
    return DepthSamples(float(near), float(far), values)


def homography(cam_i: Camera, cam_j: Camera, depth: float) -> np.ndarray:
    """Map pixels of view i to pixels of view j via the fronto-parallel plane z=depth in frame i."""
    R_ij = cam_j.pose.R @ cam_i.pose.R.T
    t_ij = cam_j.pose.t - R_ij @ cam_i.pose.t
    n = np.array([0.0, 0.0, 1.0])
    Ki_inv = np.linalg.inv(cam_i.intrinsics.matrix)
    return cam_j.intrinsics.matrix @ (R_ij + np.outer(t_ij, n) / depth) @ Ki_inv


def _warp_coords(cam_i: Camera, cam_j: Camera, depths, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ci = cam_i.at_resolution(w, h)
    cj = cam_j.at_resolution(w, h)
    v, u = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    pix = np.stack([u, v, np.ones_like(u)], axis=-1)
    coords, front = [], []
    for depth in depths:
        q = pix @ homography(ci, cj, float(depth)).T
        z = q[..., 2]
        ok = z > 1e-9
        safe = np.where(ok, z, 1.0)
        xy = q[..., :2] / safe[..., None]
        coords.append(np.where(ok[..., None], xy, -1e6))
        front.append(ok)
    return np.stack(coords), np.stack(front)


def homography_warp(
    src_latent: torch.Tensor, cam_i: Camera, cam_j: Camera, depth: float
) -> tuple[torch.Tensor, torch.Tensor]:
    """Warp view j's ``[h, w, c]`` latent into view i through the plane at ``depth``.

    Cameras are given at image resolution; intrinsics are rescaled to the latent grid.
    """
    if depth <= 0:
        raise ContractError(f"homography_warp: depth must be positive, got {depth}")
    h, w, _ = src_latent.shape
    coords, front = _warp_coords(cam_i, cam_j, [depth], h, w)
    coords_t = torch.as_tensor(coords[0], dtype=src_latent.dtype)
    out, mask = bilinear_sample(src_latent, coords_t)
    return out, mask * torch.as_tensor(front[0], dtype=mask.dtype)


def plane_sweep(x_j: torch.Tensor, cam_i: Camera, cam_j: Camera, samples: DepthSamples) -> torch.Tensor:
    """Stack of warped latents ``[h, w, d, c]``, one slice per depth in ``samples``."""
    h, w, _ = x_j.shape
    coords, _ = _warp_coords(cam_i, cam_j, samples.values, h, w)
    out, _ = bilinear_sample(x_j, torch.as_tensor(coords, dtype=x_j.dtype))
    return out.permute(1, 2, 0, 3)


def _chordal_mean(rotations: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(rotations.mean(axis=0))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def normalize_poses(poses: list[Pose]) -> tuple[list[Pose], np.ndarray]:
    """Re-express poses in the frame of their mean pose.

    Returns the new poses and the 4x4 transform ``M`` with ``x_world = M @ x_canonical``.
    """
    if not poses:
        raise ContractError("normalize_poses: need at least one pose")
    centers = np.stack([p.center for p in poses])
    rotations = np.stack([p.R.T for p in poses])
    M = np.eye(4)
    M[:3, :3] = _chordal_mean(rotations)
    M[:3, 3] = centers.mean(axis=0)
    return [Pose.from_matrix(p.matrix @ M) for p in poses], M


def view_overlap(cam_i: Camera, cam_j: Camera, depth_mid: float) -> float:
    """Fraction of view-i pixels whose point at ``depth_mid`` lands inside view j's frame."""
    k = cam_i.intrinsics
    v, u = np.meshgrid(np.arange(k.height, dtype=np.float64), np.arange(k.width, dtype=np.float64), indexing="ij")
    x_cam = np.stack([(u - k.cx) / k.fx * depth_mid, (v - k.cy) / k.fy * depth_mid, np.full_like(u, depth_mid)], -1)
    world = (x_cam - cam_i.pose.t) @ cam_i.pose.R
    uv, z = cam_j.project(world)
    kj = cam_j.intrinsics
    inside = (
        (z > 0)
        & (uv[..., 0] >= -0.5)
        & (uv[..., 0] < kj.width - 0.5)
        & (uv[..., 1] >= -0.5)
        & (uv[..., 1] < kj.height - 0.5)
    )
    return float(inside.mean())


_MIRROR = np.diag([-1.0, 1.0, 1.0])


def flip_horizontal(camera: Camera) -> Camera:
    """Camera observing the x-mirrored world, whose image is the left-right flip of the original."""
    k = camera.intrinsics
    intr = replace(k, cx=k.width - 1 - k.cx)
    pose = Pose(_MIRROR @ camera.pose.R @ _MIRROR, _MIRROR @ camera.pose.t)
    return Camera(intr, pose)


def geometric_mid_depth(near: float, far: float) -> float:
    return math.sqrt(near * far)
