"""Scene bundles: procedural generation by exact ray casting, and the on-disk format.

Directory layout::

    scene/
      cameras.json      manifest (schema below)
      view_000.ppm      8-bit P6 pixmaps
      view_000.depth.npy optional ground-truth depth

``cameras.json``::

    {"format": "h3r-scene", "version": 1, "near": float, "far": float,
     "views": [{"name": str, "image": str, "role": "context" | "target",
                "width": int, "height": int,
                "intrinsics": [9 floats, row-major 3x3, pixels],
                "extrinsics": [16 floats, row-major 4x4 camera-from-world],
                "depth": str (optional)}]}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .camera import Camera, Intrinsics, Pose, look_at, pixel_rays
from .tensor import ContractError

__all__ = [
    "SceneFormatError",
    "View",
    "SceneBundle",
    "SyntheticSceneSpec",
    "Rect",
    "generate_scene",
    "raycast",
    "save_scene",
    "load_scene",
    "write_ppm",
    "read_ppm",
]


class SceneFormatError(ValueError):
    """A scene directory does not follow the documented layout."""


@dataclass
class View:
    name: str
    camera: Camera
    image: np.ndarray  # [H, W, 3] float in [0, 1], multiples of 1/255
    role: str = "context"
    depth: Optional[np.ndarray] = None


@dataclass
class SceneBundle:
    views: list[View]
    near: float
    far: float
    name: str = "scene"
    rects: Optional[list] = field(default=None, repr=False, compare=False)  # generator geometry, not serialised

    def __post_init__(self):
        if not (0 < self.near < self.far):
            raise ContractError(f"scene {self.name}: need 0 < near < far, got {self.near}, {self.far}")
        sizes = {v.image.shape for v in self.views}
        if len(sizes) > 1:
            raise ContractError(f"scene {self.name}: images differ in size {sorted(sizes)}")

    @property
    def context(self) -> list[View]:
        return [v for v in self.views if v.role == "context"]

    @property
    def targets(self) -> list[View]:
        return [v for v in self.views if v.role == "target"]


# ---------------------------------------------------------------------------
# procedural scenes


@dataclass(frozen=True)
class Rect:
    """Textured rectangle ``center + a*u + b*v`` with |a| <= half_u, |b| <= half_v."""

    center: tuple
    u: tuple
    v: tuple
    half_u: float
    half_v: float
    color_a: tuple
    color_b: tuple
    frequency: float
    checker: float
    phase: float = 0.0

    def texture(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        f = self.frequency
        wave = 0.5 + 0.5 * np.sin(2 * np.pi * f * a + self.phase) * np.cos(2 * np.pi * f * 0.7 * b - self.phase)
        check = ((np.floor(a * self.checker) + np.floor(b * self.checker)) % 2).astype(np.float64)
        mix = np.clip(0.65 * wave + 0.35 * check, 0.0, 1.0)[..., None]
        return (1 - mix) * np.asarray(self.color_a) + mix * np.asarray(self.color_b)


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple

    def contains(self, p: np.ndarray) -> bool:
        return bool(np.all(p > np.asarray(self.lo)) and np.all(p < np.asarray(self.hi)))


@dataclass(frozen=True)
class SyntheticSceneSpec:
    seed: int = 0
    n_planes: int = 2
    n_boxes: int = 1
    resolution: int = 64
    n_context: int = 2
    n_target: int = 3
    fov_deg: float = 50.0
    radius: float = 1.5
    radius_jitter: float = 0.1
    arc_deg: float = 24.0
    trajectory: str = "arc"  # "arc" or "baseline" (pure x translation, fronto-parallel)
    baseline: float = 0.5
    frequency: float = 0.6
    supersample: int = 3
    backdrop_depth: float = 3.0
    max_retries: int = 8


def _palette(rng: np.random.Generator) -> tuple:
    a = rng.uniform(0.05, 0.55, 3)
    b = rng.uniform(0.45, 0.95, 3)
    return tuple(a), tuple(b)


def _box_faces(lo, hi, rng, freq) -> list[Rect]:
    lo, hi = np.asarray(lo), np.asarray(hi)
    c = (lo + hi) / 2
    half = (hi - lo) / 2
    faces = []
    for axis in range(3):
        others = [k for k in range(3) if k != axis]
        for sign in (-1, 1):
            center = c.copy()
            center[axis] += sign * half[axis]
            u = np.zeros(3)
            v = np.zeros(3)
            u[others[0]] = 1
            v[others[1]] = 1
            ca, cb = _palette(rng)
            faces.append(Rect(tuple(center), tuple(u), tuple(v), half[others[0]], half[others[1]], ca, cb,
                              freq * rng.uniform(1.0, 1.6), rng.uniform(1.0, 2.0), rng.uniform(0, 2 * np.pi)))
    return faces


def raycast(rects: list[Rect], origins: np.ndarray, dirs: np.ndarray, background=(0.0, 0.0, 0.0)):
    """Nearest-hit colors, ray distances, camera-free hit points and rect ids for rays ``[..., 3]``."""
    shape = origins.shape[:-1]
    o = origins.reshape(-1, 3)
    d = dirs.reshape(-1, 3)
    best = np.full(len(o), np.inf)
    ident = np.full(len(o), -1)
    ab = np.zeros((len(o), 2))
    for k, r in enumerate(rects):
        c, u, v = (np.asarray(x, dtype=np.float64) for x in (r.center, r.u, r.v))
        n = np.cross(u, v)
        denom = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((c - o) @ n) / denom
        p = o + t[:, None] * d
        a = (p - c) @ u
        b = (p - c) @ v
        hit = (np.abs(denom) > 1e-12) & (t > 1e-6) & (np.abs(a) <= r.half_u) & (np.abs(b) <= r.half_v) & (t < best)
        best = np.where(hit, t, best)
        ident = np.where(hit, k, ident)
        ab[hit] = np.stack([a[hit], b[hit]], -1)
    color = np.tile(np.asarray(background, dtype=np.float64), (len(o), 1))
    for k, r in enumerate(rects):
        sel = ident == k
        if sel.any():
            color[sel] = r.texture(ab[sel, 0], ab[sel, 1])
    return color.reshape(*shape, 3), best.reshape(shape), ab.reshape(*shape, 2), ident.reshape(shape)


def render_view(rects: list[Rect], camera: Camera, supersample: int = 1):
    """Anti-aliased ground-truth image and per-pixel camera-frame depth (center sample) for ``camera``."""
    k = camera.intrinsics
    s = supersample
    offsets = (np.arange(s) + 0.5) / s - 0.5
    acc = np.zeros((k.height, k.width, 3))
    R = camera.pose.R
    origin = camera.pose.center
    v, u = np.meshgrid(np.arange(k.height, dtype=np.float64), np.arange(k.width, dtype=np.float64), indexing="ij")
    for oy in offsets:
        for ox in offsets:
            d_cam = np.stack([(u + ox - k.cx) / k.fx, (v + oy - k.cy) / k.fy, np.ones_like(u)], -1)
            d = d_cam @ R
            d /= np.linalg.norm(d, axis=-1, keepdims=True)
            color, _, _, _ = raycast(rects, np.broadcast_to(origin, d.shape), d)
            acc += color
    o, d = pixel_rays(camera)
    _, dist, _, _ = raycast(rects, o, d)
    z = dist * (d @ R[2])  # ray distance to camera-frame depth
    return acc / (s * s), z


def _quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255) / 255


def _build(spec: SyntheticSceneSpec, rng: np.random.Generator):
    freq = spec.frequency
    zc = spec.backdrop_depth
    rects: list[Rect] = []
    ca, cb = _palette(rng)
    rects.append(Rect((0.0, 0.0, zc), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), 8.0, 8.0, ca, cb, freq, 1.2, rng.uniform(0, 6)))
    boxes: list[Box] = []
    for _ in range(spec.n_planes):
        center = (rng.uniform(-0.9, 0.9), rng.uniform(-0.7, 0.7), zc - rng.uniform(0.6, 1.6))
        yaw = rng.uniform(-0.5, 0.5)
        u = (math.cos(yaw), 0.0, math.sin(yaw))
        ca, cb = _palette(rng)
        rects.append(Rect(center, u, (0.0, 1.0, 0.0), rng.uniform(0.35, 0.7), rng.uniform(0.3, 0.6), ca, cb,
                          freq * rng.uniform(1.0, 1.8), rng.uniform(1.5, 3.0), rng.uniform(0, 6)))
    for _ in range(spec.n_boxes):
        c = np.array([rng.uniform(-0.8, 0.8), rng.uniform(-0.5, 0.5), zc - rng.uniform(0.8, 1.8)])
        half = rng.uniform(0.15, 0.35, 3)
        boxes.append(Box(tuple(c - half), tuple(c + half)))
        rects.extend(_box_faces(c - half, c + half, rng, freq))
    return rects, boxes


def _cameras(spec: SyntheticSceneSpec, rng: np.random.Generator) -> tuple[list[Camera], int]:
    n = spec.n_context + spec.n_target
    res = spec.resolution
    f = 0.5 * res / math.tan(math.radians(spec.fov_deg) / 2)
    intr = Intrinsics(f, f, (res - 1) / 2, (res - 1) / 2, res, res)
    target = np.array([0.0, 0.0, spec.backdrop_depth])
    # context views evenly spaced along the path (ends included), targets in between
    fractions = np.linspace(0.0, 1.0, n)
    ctx_idx = sorted({int(round(x)) for x in np.linspace(0, n - 1, spec.n_context)})
    tgt_idx = [i for i in range(n) if i not in ctx_idx]
    cams = []
    for i in ctx_idx + tgt_idx:
        s = fractions[i]
        if spec.trajectory == "baseline":
            center = np.array([(s - 0.5) * spec.baseline, 0.0, 0.0])
            pose = Pose(np.eye(3), -center)
        else:
            theta = math.radians(spec.arc_deg) * (s - 0.5)
            radius = (spec.radius + spec.backdrop_depth) * (1 + rng.uniform(-spec.radius_jitter, spec.radius_jitter))
            radius = max(radius, spec.backdrop_depth + 0.5)
            center = target + radius * np.array([math.sin(theta), rng.uniform(-0.03, 0.03), -math.cos(theta)])
            aim = target + np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), 0.0])
            pose = look_at(center, aim)
        cams.append(Camera(intr, pose))
    return cams, len(ctx_idx)


def generate_scene(spec: SyntheticSceneSpec, name: Optional[str] = None) -> SceneBundle:
    """Deterministic procedural scene: a textured backdrop, floating planes and boxes, posed views."""
    if spec.resolution % 4 or spec.n_context < 1:
        raise ContractError("resolution must be a multiple of 4 and n_context >= 1")
    for attempt in range(spec.max_retries):
        rng = np.random.default_rng([spec.seed, attempt])
        rects, boxes = _build(spec, rng)
        cams, n_ctx = _cameras(spec, rng)
        if any(b.contains(c.pose.center) for b in boxes for c in cams):
            continue
        views = []
        for k, cam in enumerate(cams):
            image, depth = render_view(rects, cam, spec.supersample)
            if not np.all(np.isfinite(depth)):
                break
            role = "context" if k < n_ctx else "target"
            views.append(View(f"view_{k:03d}", cam, _quantize(image), role, depth))
        else:
            all_depth = np.concatenate([v.depth.ravel() for v in views])
            near = float(np.floor(0.8 * all_depth.min() * 100) / 100)
            far = float(np.ceil(1.25 * all_depth.max() * 100) / 100)
            return SceneBundle(views, near, far, name or f"synthetic_{spec.seed:05d}", rects)
    raise ContractError(f"could not generate a valid scene for seed {spec.seed} in {spec.max_retries} attempts")


# ---------------------------------------------------------------------------
# file format


def write_ppm(path, image: np.ndarray) -> None:
    data = np.asarray(image)
    if data.dtype != np.uint8:
        data = np.round(np.clip(data, 0.0, 1.0) * 255).astype(np.uint8)
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data).tobytes())


def read_ppm(path) -> np.ndarray:
    """8-bit P6 pixmap as float ``[H, W, 3]`` in [0, 1]."""
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise SceneFormatError(f"{path}: truncated pixmap header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise SceneFormatError(f"{path}: only 8-bit P6 pixmaps are supported")
    w, h = int(tokens[1]), int(tokens[2])
    pixels = data[pos + 1 : pos + 1 + w * h * 3]
    if len(pixels) != w * h * 3:
        raise SceneFormatError(f"{path}: expected {w * h * 3} pixel bytes, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def camera_to_json(camera: Camera) -> dict:
    return {
        "width": camera.width,
        "height": camera.height,
        "intrinsics": [float(x) for x in camera.intrinsics.matrix.ravel()],
        "extrinsics": [float(x) for x in camera.pose.matrix.ravel()],
    }


def camera_from_json(entry: dict, where: str = "camera") -> Camera:
    for key in ("width", "height", "intrinsics", "extrinsics"):
        if key not in entry:
            raise SceneFormatError(f"{where}: missing field '{key}'")
    K = np.asarray(entry["intrinsics"], dtype=np.float64)
    E = np.asarray(entry["extrinsics"], dtype=np.float64)
    if K.shape != (9,):
        raise SceneFormatError(f"{where}.intrinsics: expected 9 numbers, got {K.size}")
    if E.shape != (16,):
        raise SceneFormatError(f"{where}.extrinsics: expected 16 numbers, got {E.size}")
    K = K.reshape(3, 3)
    E = E.reshape(4, 4)
    if K[0, 1] != 0 or K[1, 0] != 0 or np.any(K[2] != [0, 0, 1]):
        raise SceneFormatError(f"{where}.intrinsics: not a pinhole matrix without skew")
    if np.any(E[3] != [0, 0, 0, 1]):
        raise SceneFormatError(f"{where}.extrinsics: last row must be [0, 0, 0, 1]")
    R = E[:3, :3]
    gram = np.abs(R.T @ R - np.eye(3)).max()
    if gram > 1e-4 or abs(np.linalg.det(R) - 1) > 1e-4:
        raise SceneFormatError(f"{where}.extrinsics: rotation is not orthonormal (Gram error {gram:.3g} > 1e-4)")
    # re-orthonormalise within tolerance so downstream checks at 1e-6 hold
    U, _, Vt = np.linalg.svd(R)
    R_clean = R if gram < 1e-12 else U @ Vt
    try:
        intr = Intrinsics(K[0, 0], K[1, 1], K[0, 2], K[1, 2], int(entry["width"]), int(entry["height"]))
    except ContractError as exc:
        raise SceneFormatError(f"{where}.intrinsics: {exc}") from None
    return Camera(intr, Pose(R_clean, E[:3, 3]))


def save_scene(bundle: SceneBundle, directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    views = []
    for v in bundle.views:
        entry = {"name": v.name, "image": f"{v.name}.ppm", "role": v.role, **camera_to_json(v.camera)}
        write_ppm(out / entry["image"], v.image)
        if v.depth is not None:
            entry["depth"] = f"{v.name}.depth.npy"
            np.save(out / entry["depth"], v.depth)
        views.append(entry)
    manifest = {"format": "h3r-scene", "version": 1, "name": bundle.name, "near": bundle.near, "far": bundle.far, "views": views}
    (out / "cameras.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return out


def load_scene(directory) -> SceneBundle:
    root = Path(directory)
    path = root / "cameras.json"
    if not path.exists():
        raise SceneFormatError(f"{root}: no cameras.json manifest")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}: invalid JSON ({exc})") from None
    for key in ("near", "far", "views"):
        if key not in manifest:
            raise SceneFormatError(f"{path}: missing field '{key}'")
    views = []
    for k, entry in enumerate(manifest["views"]):
        where = f"views[{k}]"
        name = entry.get("name", f"view_{k:03d}")
        if entry.get("role", "context") not in ("context", "target"):
            raise SceneFormatError(f"{where}.role: expected 'context' or 'target', got {entry.get('role')!r}")
        if "image" not in entry:
            raise SceneFormatError(f"{where}: missing field 'image'")
        camera = camera_from_json(entry, where)
        image_path = root / entry["image"]
        if not image_path.exists():
            raise SceneFormatError(f"{where} ({name!r}): image file {entry['image']!r} not found")
        image = read_ppm(image_path)
        if image.shape[:2] != (camera.height, camera.width):
            raise SceneFormatError(f"{where} ({name!r}): image is {image.shape[1]}x{image.shape[0]}, camera says {camera.width}x{camera.height}")
        depth = np.load(root / entry["depth"]) if "depth" in entry and (root / entry["depth"]).exists() else None
        views.append(View(name, camera, image, entry.get("role", "context"), depth))
    try:
        return SceneBundle(views, float(manifest["near"]), float(manifest["far"]), manifest.get("name", root.name))
    except ContractError as exc:
        raise SceneFormatError(f"{path}: {exc}") from None
