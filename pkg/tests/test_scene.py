import json

import numpy as np
import pytest

from h3r.camera import Camera, Intrinsics, Pose
from h3r.scene import (
    Rect,
    SceneFormatError,
    SyntheticSceneSpec,
    camera_from_json,
    camera_to_json,
    generate_scene,
    load_scene,
    raycast,
    read_ppm,
    render_view,
    save_scene,
    write_ppm,
)
from h3r.camera import pixel_rays
from h3r.tensor import ContractError

SMALL = SyntheticSceneSpec(seed=7, resolution=24, supersample=1)


@pytest.fixture(scope="module")
def scene():
    return generate_scene(SMALL)


def plane(depth, freq=0.8, checker=1.5):
    return Rect((0.0, 0.0, depth), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), 20.0, 20.0, (0.1, 0.2, 0.3), (0.9, 0.8, 0.6),
                freq, checker, 0.3)


def test_generation_is_deterministic(scene):
    again = generate_scene(SMALL)
    for a, b in zip(scene.views, again.views):
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.camera.pose.matrix, b.camera.pose.matrix)
    assert (scene.near, scene.far) == (again.near, again.far)
    other = generate_scene(SyntheticSceneSpec(seed=8, resolution=24, supersample=1))
    assert not np.array_equal(other.views[0].image, scene.views[0].image)


def test_generated_scene_invariants(scene):
    assert len(scene.context) == 2 and len(scene.targets) == 3
    for v in scene.views:
        assert v.image.shape == (24, 24, 3)
        assert np.array_equal(np.round(v.image * 255) / 255, v.image)
        assert scene.near < v.depth.min() and v.depth.max() < scene.far


def test_context_views_spread_along_path():
    spec = SyntheticSceneSpec(seed=2, resolution=16, supersample=1, n_context=4, n_target=2, trajectory="baseline")
    bundle = generate_scene(spec)
    xs = [v.camera.pose.center[0] for v in bundle.context]
    assert xs[0] == pytest.approx(-0.25) and xs[-1] == pytest.approx(0.25)
    assert np.all(np.diff(xs) > 0)


def test_fronto_parallel_plane_has_constant_depth():
    cam = Camera(Intrinsics(30.0, 30.0, 15.5, 11.5, 32, 24), Pose.identity())
    _, z = render_view([plane(2.5)], cam)
    np.testing.assert_allclose(z, 2.5, atol=1e-12)


@pytest.mark.parametrize("depth", [1.5, 3.0])
def test_stereo_disparity(depth):
    # a single textured plane seen from the two ends of a horizontal baseline
    spec_baseline = 0.2
    k = Intrinsics(40.0, 40.0, 31.5, 15.5, 64, 32)
    left = Camera(k, Pose(np.eye(3), np.array([spec_baseline / 2, 0.0, 0.0])))
    right = Camera(k, Pose(np.eye(3), np.array([-spec_baseline / 2, 0.0, 0.0])))
    rect = [plane(depth, freq=1.3, checker=0.0)]
    a, _ = render_view(rect, left, 3)
    b, _ = render_view(rect, right, 3)
    expected = k.fx * spec_baseline / depth
    # sub-pixel shift minimising the squared difference on the overlapping columns
    cols = np.arange(k.width, dtype=np.float64)
    best, best_err = None, np.inf
    for s in np.arange(0.0, 12.0, 0.01):
        src = cols - s
        ok = (src >= 0) & (src <= k.width - 1)
        shifted = np.stack([np.stack([np.interp(src[ok], cols, b[r, :, c]) for c in range(3)], -1)
                            for r in range(k.height)])
        err = np.mean((a[:, ok] - shifted) ** 2)
        if err < best_err:
            best, best_err = s, err
    assert abs(best - expected) < 0.5
    assert abs(camera_disparity(left, right, depth) - expected) < 1e-9


def camera_disparity(left, right, depth):
    p = np.array([[0.1, 0.05, depth]])
    return float(left.project(p)[0][0, 0] - right.project(p)[0][0, 0])


def test_texture_corner_projects_onto_rendered_location(scene):
    # locate a checker corner of the backdrop in each view through the ray caster's texture coordinates
    backdrop = scene.rects[0]
    n = backdrop.checker
    c = np.asarray(backdrop.center)
    for view in scene.views:
        cam = view.camera
        o, d = pixel_rays(cam)
        _, _, ab, ident = raycast(scene.rects, o, d)
        checked = 0
        for ia in range(-3, 4):
            for ib in range(-3, 4):
                corner_ab = np.array([ia / n, ib / n])
                corner = c + corner_ab[0] * np.asarray(backdrop.u) + corner_ab[1] * np.asarray(backdrop.v)
                uv, z = cam.project(corner[None])
                u, v = uv[0]
                x0, y0 = int(np.floor(u)), int(np.floor(v))
                if not (0 <= x0 < cam.width - 1 and 0 <= y0 < cam.height - 1):
                    continue
                if np.any(ident[y0:y0 + 2, x0:x0 + 2] != 0):
                    continue  # occluded by foreground geometry
                # the backdrop's texture coordinates are affine in the pixel grid up to perspective; invert locally
                J = np.stack([ab[y0, x0 + 1] - ab[y0, x0], ab[y0 + 1, x0] - ab[y0, x0]], -1)
                duv = np.linalg.solve(J, corner_ab - ab[y0, x0])
                rendered = np.array([x0, y0]) + duv
                assert np.linalg.norm(rendered - uv[0]) < 0.5
                checked += 1
        assert checked > 0


def test_ppm_roundtrip(tmp_path, rng):
    img = np.round(rng.uniform(size=(5, 7, 3)) * 255) / 255
    write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), img)
    raw = (tmp_path / "a.ppm").read_bytes()
    (tmp_path / "b.ppm").write_bytes(raw.replace(b"P6\n", b"P6\n# comment\n", 1))
    assert np.array_equal(read_ppm(tmp_path / "b.ppm"), img)
    (tmp_path / "c.ppm").write_bytes(raw[:-4])
    with pytest.raises(SceneFormatError):
        read_ppm(tmp_path / "c.ppm")
    (tmp_path / "d.ppm").write_bytes(raw.replace(b"P6", b"P5", 1))
    with pytest.raises(SceneFormatError):
        read_ppm(tmp_path / "d.ppm")


def test_scene_roundtrip(scene, tmp_path):
    save_scene(scene, tmp_path)
    back = load_scene(tmp_path)
    assert back.name == scene.name and (back.near, back.far) == (scene.near, scene.far)
    for a, b in zip(scene.views, back.views):
        assert a.name == b.name and a.role == b.role
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.camera.pose.matrix, b.camera.pose.matrix)
        assert np.array_equal(a.camera.intrinsics.matrix, b.camera.intrinsics.matrix)
        assert np.array_equal(a.depth, b.depth)


def test_missing_image_names_the_view(scene, tmp_path):
    save_scene(scene, tmp_path)
    (tmp_path / "view_002.ppm").unlink()
    with pytest.raises(SceneFormatError, match="view_002"):
        load_scene(tmp_path)


def test_missing_manifest_and_bad_json(tmp_path):
    with pytest.raises(SceneFormatError, match="cameras.json"):
        load_scene(tmp_path)
    (tmp_path / "cameras.json").write_text("{nope")
    with pytest.raises(SceneFormatError, match="invalid JSON"):
        load_scene(tmp_path)


def test_camera_json_validation(simple_camera):
    entry = camera_to_json(simple_camera)
    assert np.array_equal(camera_from_json(entry).pose.matrix, simple_camera.pose.matrix)
    bad = json.loads(json.dumps(entry))
    bad["extrinsics"][0] *= 1.01
    with pytest.raises(SceneFormatError, match="orthonormal"):
        camera_from_json(bad, "views[3]")
    small = json.loads(json.dumps(entry))
    small["extrinsics"][0] *= 1 + 1e-6
    cam = camera_from_json(small)
    R = cam.pose.R
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-12
    skew = json.loads(json.dumps(entry))
    skew["intrinsics"][1] = 0.5
    with pytest.raises(SceneFormatError, match="pinhole"):
        camera_from_json(skew)
    del skew["width"]
    with pytest.raises(SceneFormatError, match="width"):
        camera_from_json(skew)


def test_invalid_spec():
    with pytest.raises(ContractError):
        generate_scene(SyntheticSceneSpec(resolution=30))
