import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from h3r.camera import Camera, Intrinsics, Pose, look_at
from h3r.gaussians import Gaussians, normalize_quaternion
from h3r.rasterizer import LOW_PASS, project, quat_to_rotmat, render
from oracles import fd_check, front_to_back, random_rotation


def random_gaussians(rng, n, depth=(2.0, 6.0), spread=1.0, scale=(0.02, 0.3), dtype=torch.float64):
    means = np.column_stack([rng.normal(size=(n, 2)) * spread, rng.uniform(*depth, size=n)])
    return Gaussians(
        torch.as_tensor(means, dtype=dtype),
        torch.as_tensor(rng.uniform(*scale, size=(n, 3)), dtype=dtype),
        normalize_quaternion(torch.as_tensor(rng.normal(size=(n, 4)), dtype=dtype))[0],
        torch.as_tensor(rng.uniform(0.05, 1.0, size=n), dtype=dtype),
        torch.as_tensor(rng.uniform(size=(n, 3)), dtype=dtype),
    )


@pytest.fixture
def camera():
    return Camera(Intrinsics(40.0, 40.0, 23.5, 15.5, 48, 32), Pose.identity())


def test_quat_to_rotmat_orthonormal(rng):
    q = normalize_quaternion(torch.as_tensor(rng.normal(size=(20, 4))))[0]
    R = quat_to_rotmat(q)
    eye = torch.eye(3, dtype=torch.float64).expand(20, 3, 3)
    np.testing.assert_allclose((R @ R.transpose(-1, -2)).numpy(), eye.numpy(), atol=1e-12)
    np.testing.assert_allclose(torch.linalg.det(R).numpy(), 1.0, atol=1e-12)


def test_projected_covariance_of_sphere_on_axis():
    cam = Camera(Intrinsics(50.0, 50.0, 10.0, 10.0, 21, 21), Pose.identity())
    g = Gaussians(torch.tensor([[0.0, 0.0, 4.0]], dtype=torch.float64), torch.full((1, 3), 0.2, dtype=torch.float64),
                  torch.tensor([[0.3, 0.5, -0.1, 0.8]], dtype=torch.float64) / math.sqrt(0.99),
                  torch.tensor([0.5], dtype=torch.float64), torch.ones(1, 3, dtype=torch.float64))
    s = project(g, cam)
    expected = (50 * 0.2 / 4) ** 2 + LOW_PASS
    np.testing.assert_allclose(s.cov2d[0].numpy(), np.eye(2) * expected, atol=1e-9)
    np.testing.assert_allclose(s.means2d[0].numpy(), [10.0, 10.0], atol=1e-12)


def test_two_splat_closed_form():
    cam = Camera(Intrinsics(30.0, 30.0, 8.0, 8.0, 17, 17), Pose.identity())
    depths = [2.0, 3.5]
    scales = [0.15, 0.3]
    opac = [0.7, 0.9]
    colors = [[1.0, 0.2, 0.0], [0.1, 0.3, 0.9]]
    background = [0.2, 0.2, 0.2]
    # far splat listed first so sorting is exercised
    g = Gaussians(
        torch.tensor([[0.0, 0.0, depths[1]], [0.0, 0.0, depths[0]]], dtype=torch.float64),
        torch.tensor([[scales[1]] * 3, [scales[0]] * 3], dtype=torch.float64),
        torch.tensor([[1.0, 0, 0, 0]] * 2, dtype=torch.float64),
        torch.tensor([opac[1], opac[0]], dtype=torch.float64),
        torch.tensor([colors[1], colors[0]], dtype=torch.float64),
    )
    out = render(g, cam, background)
    var = [(30 * s / z) ** 2 + LOW_PASS for s, z in zip(scales, depths)]
    for py, px in [(8, 8), (9, 8), (8, 11), (5, 6), (12, 13)]:
        r2 = (px - 8.0) ** 2 + (py - 8.0) ** 2
        alphas = []
        for k in range(2):
            maha = r2 / var[k]
            a = min(0.99, opac[k] * math.exp(-0.5 * maha)) if maha <= 9 else 0.0
            alphas.append(a if a >= 1 / 255 else 0.0)
        ref, ref_alpha = front_to_back(colors, alphas, background)
        np.testing.assert_allclose(out.color[py, px].numpy(), ref, atol=1e-6)
        assert float(out.alpha[py, px]) == pytest.approx(ref_alpha, abs=1e-6)


def test_permutation_invariance_bit_exact(rng, camera):
    g = random_gaussians(rng, 300)
    ref = render(g, camera, (0.1, 0.2, 0.3))
    for _ in range(3):
        perm = torch.as_tensor(rng.permutation(len(g)))
        out = render(g.index(perm), camera, (0.1, 0.2, 0.3))
        assert torch.equal(out.color, ref.color)
        assert torch.equal(out.alpha, ref.alpha)


def test_permutation_invariance_with_depth_ties(camera):
    # identical depths: the tie-break must not depend on input order once colours differ only by index
    g = Gaussians(
        torch.tensor([[0.0, 0.0, 3.0], [0.05, 0.0, 3.0]], dtype=torch.float64),
        torch.full((2, 3), 0.2, dtype=torch.float64),
        torch.tensor([[1.0, 0, 0, 0]] * 2, dtype=torch.float64),
        torch.tensor([0.6, 0.6], dtype=torch.float64),
        torch.tensor([[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]], dtype=torch.float64),
    )
    a = render(g, camera).color
    b = render(g.index(torch.tensor([1, 0])), camera).color
    assert torch.equal(a, b)


def test_tiled_equals_naive_bit_exact(rng, camera):
    g = random_gaussians(rng, 400, scale=(0.01, 0.6))
    tiled = render(g, camera, (0.3, 0.0, 0.5), tiled=True)
    naive = render(g, camera, (0.3, 0.0, 0.5), tiled=False)
    assert torch.equal(tiled.color, naive.color)
    assert torch.equal(tiled.alpha, naive.alpha)
    assert torch.equal(tiled.depth, naive.depth)


@given(st.integers(0, 2**31 - 1))
def test_alpha_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    cam = Camera(Intrinsics(20.0, 20.0, 7.5, 7.5, 16, 16), Pose(random_rotation(rng) if seed % 3 == 0 else np.eye(3), np.zeros(3)))
    out = render(random_gaussians(rng, 60), cam)
    assert torch.all(out.alpha >= 0) and torch.all(out.alpha <= 1)
    assert torch.all(torch.isfinite(out.color))


def test_empty_and_behind_camera(camera):
    empty = Gaussians(*(torch.zeros(0, k, dtype=torch.float64) for k in (3, 3, 4)), torch.zeros(0, dtype=torch.float64),
                      torch.zeros(0, 3, dtype=torch.float64))
    out = render(empty, camera, (0.5, 0.25, 1.0))
    assert torch.all(out.color == torch.tensor([0.5, 0.25, 1.0], dtype=torch.float64))
    behind = Gaussians(torch.tensor([[0.0, 0.0, -2.0]], dtype=torch.float64), torch.full((1, 3), 0.5, dtype=torch.float64),
                       torch.tensor([[1.0, 0, 0, 0]], dtype=torch.float64), torch.ones(1, dtype=torch.float64),
                       torch.ones(1, 3, dtype=torch.float64))
    assert torch.count_nonzero(render(behind, camera).alpha) == 0


def test_render_is_deterministic(rng, camera):
    g = random_gaussians(rng, 200)
    g.means.requires_grad_(True)
    grads = []
    for _ in range(2):
        g.means.grad = None
        render(g, camera).color.sum().backward()
        grads.append(g.means.grad.clone())
    assert torch.equal(grads[0], grads[1])


def _smooth_scene():
    # every splat covers the whole 8x8 image well inside 3 sigma, so the render is smooth
    cam = Camera(Intrinsics(8.0, 8.0, 3.5, 3.5, 8, 8), Pose.identity())
    means = torch.tensor([[0.05, -0.02, 2.0], [-0.1, 0.08, 2.6], [0.02, 0.1, 3.1]], dtype=torch.float64)
    scales = torch.tensor([[1.1, 1.3, 0.4], [1.6, 1.2, 0.8], [1.9, 2.1, 0.5]], dtype=torch.float64)
    quats = normalize_quaternion(torch.tensor([[1.0, 0.1, -0.2, 0.3], [0.9, 0.0, 0.2, -0.1], [1.0, -0.3, 0.1, 0.2]],
                                              dtype=torch.float64))[0]
    opac = torch.tensor([0.45, 0.6, 0.7], dtype=torch.float64)
    rgb = torch.tensor([[0.9, 0.1, 0.3], [0.2, 0.8, 0.4], [0.5, 0.5, 0.9]], dtype=torch.float64)
    return cam, (means, scales, quats, opac, rgb)


def test_rasterizer_gradient_three_splats():
    cam, fields = _smooth_scene()

    def fn(means, scales, quats, opac, rgb, bg):
        out = render(Gaussians(means, scales, quats, opac, rgb), cam, bg)
        return out.color, out.alpha, out.depth

    bg = torch.tensor([0.1, 0.2, 0.3], dtype=torch.float64)
    assert fd_check(fn, [*fields, bg]) < 1e-3


def test_gradient_tiled_matches_naive(rng, camera):
    g = random_gaussians(rng, 150, scale=(0.05, 0.4))
    grads = []
    for tiled in (True, False):
        fields = [t.detach().clone().requires_grad_(True) for t in (g.means, g.scales, g.quats, g.opacities, g.rgbs)]
        w = torch.as_tensor(np.random.default_rng(5).normal(size=(32, 48, 3)))
        (render(Gaussians(*fields), camera, tiled=tiled).color * w).sum().backward()
        grads.append([f.grad for f in fields])
    for a, b in zip(*grads):
        np.testing.assert_allclose(a.numpy(), b.numpy(), rtol=1e-10, atol=1e-12)


def test_render_rotated_camera_consistency(rng):
    # rendering the same world through two cameras that differ only by a roll around the optical axis
    K = Intrinsics(20.0, 20.0, 7.5, 7.5, 16, 16)
    cam = Camera(K, look_at([0.0, 0.0, 0.0], [0.0, 0.0, 5.0]))
    g = random_gaussians(rng, 50, depth=(3.0, 6.0), spread=0.5)
    out = render(g, cam)
    flipped = Camera(K, Pose(np.diag([-1.0, -1.0, 1.0]) @ cam.pose.R, np.diag([-1.0, -1.0, 1.0]) @ cam.pose.t))
    out2 = render(g, flipped)
    np.testing.assert_allclose(out2.color.numpy()[::-1, ::-1], out.color.numpy(), atol=1e-9)
