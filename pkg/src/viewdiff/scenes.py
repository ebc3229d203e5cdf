"""Procedural multi-view scenes rendered by ray casting.

Each scene is one parametric object (a sphere, a cube, or a cube with a
sphere on top) with flat per-region albedo, a single directional light and a
plain background. Cameras sit on a sphere around the origin and look at it.
Images are quantised to 8-bit levels so that in-memory renders and the PNG
files on disk hold identical values.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image

from .errors import IoError, MissingDataset

TAU = 2.0 * math.pi
PRIMITIVES = ("sphere", "cube", "composite")
N_ALBEDO = {"sphere": 2, "cube": 6, "composite": 8}
FOV = math.radians(60.0)
AMBIENT = 0.3

ELEVATION_RANGE = (-math.pi / 6, math.pi / 2)
RADIUS_RANGE = (1.5, 2.5)


@dataclass(frozen=True)
class CameraPose:
    """Camera on a sphere around the origin: distance, azimuth, elevation (radians)."""

    radius: float
    azimuth: float
    elevation: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if not -math.pi / 2 < self.elevation < math.pi / 2:
            raise ValueError(f"elevation {self.elevation} outside (-pi/2, pi/2)")
        az = float(self.azimuth) % TAU
        if az >= TAU:  # tiny negative inputs round up to exactly tau
            az = 0.0
        object.__setattr__(self, "azimuth", az)
        object.__setattr__(self, "radius", float(self.radius))
        object.__setattr__(self, "elevation", float(self.elevation))

    @property
    def position(self) -> np.ndarray:
        ce = math.cos(self.elevation)
        return self.radius * np.array(
            [ce * math.cos(self.azimuth), math.sin(self.elevation), ce * math.sin(self.azimuth)]
        )


def relative_pose(condition: CameraPose, target: CameraPose) -> np.ndarray:
    """Condition-to-target pose feature ``(d_elev, sin d_az, cos d_az, d_radius)``."""
    d_az = target.azimuth - condition.azimuth
    return np.array(
        [
            target.elevation - condition.elevation,
            math.sin(d_az),
            math.cos(d_az),
            target.radius - condition.radius,
        ]
    )


@dataclass(frozen=True)
class SceneSpec:
    """One object to render.

    ``albedo`` lists RGB colours per region: two hemispheres (split on the
    object's local x axis) for a sphere, six faces (+x, -x, +y, -y, +z, -z)
    for a cube, and the six cube faces followed by the two sphere halves for
    the composite.
    """

    primitive: str
    albedo: tuple
    light: tuple = (0.4, 0.8, 0.45)
    background: tuple = (0.9, 0.9, 0.9)
    size: float = 0.5
    yaw: float = 0.0

    def __post_init__(self):
        if self.primitive not in PRIMITIVES:
            raise ValueError(f"unknown primitive {self.primitive!r}")
        albedo = tuple(tuple(float(c) for c in rgb) for rgb in self.albedo)
        if len(albedo) != N_ALBEDO[self.primitive] or any(len(rgb) != 3 for rgb in albedo):
            raise ValueError(f"{self.primitive} needs {N_ALBEDO[self.primitive]} RGB albedos")
        if any(not 0.0 <= c <= 1.0 for rgb in albedo for c in rgb):
            raise ValueError("albedo channels must lie in [0, 1]")
        bg = tuple(float(c) for c in self.background)
        if len(bg) != 3 or any(not 0.0 <= c <= 1.0 for c in bg):
            raise ValueError("background must be an RGB triple in [0, 1]")
        light = np.asarray(self.light, dtype=float)
        norm = float(np.linalg.norm(light))
        if light.shape != (3,) or norm == 0:
            raise ValueError("light must be a non-zero 3-vector")
        object.__setattr__(self, "albedo", albedo)
        object.__setattr__(self, "background", bg)
        object.__setattr__(self, "light", tuple(float(v) for v in light / norm))
        object.__setattr__(self, "size", float(self.size))
        object.__setattr__(self, "yaw", float(self.yaw))


@dataclass
class ViewRecord:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    pose: CameraPose
    scene_id: str
    view_id: int = 0
    foreground: Optional[np.ndarray] = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# ray casting


def _camera_rays(pose: CameraPose, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    origin = pose.position
    forward = -origin / np.linalg.norm(origin)
    right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    half = math.tan(FOV / 2)
    ticks = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    u = ticks[None, :] * half
    v = -ticks[:, None] * half
    dirs = forward + u[..., None] * right + v[..., None] * up
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return origin, dirs.reshape(-1, 3)


def _rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _hit_sphere(o, d, center, radius):
    """Distance, world normal and local x of the nearest hit (inf where missed)."""
    oc = o - center
    b = d @ oc
    disc = b * b - (oc @ oc - radius * radius)
    hit = disc >= 0
    t = np.full(len(d), np.inf)
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t_near = -b - sq
    t = np.where(hit & (t_near > 1e-9), t_near, t)
    p = o + d * np.where(np.isfinite(t), t, 0.0)[:, None]
    n = (p - center) / radius
    return t, n


def _hit_box(o, d, center, half, rot):
    """Slab test in the box frame; returns distance, world normal and face index."""
    ol = (o - center) @ rot
    dl = d @ rot
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dl
        t1 = (-half - ol) * inv
        t2 = (half - ol) * inv
    t_lo = np.minimum(t1, t2)
    t_hi = np.maximum(t1, t2)
    t_enter = t_lo.max(axis=1)
    t_exit = t_hi.min(axis=1)
    hit = (t_enter <= t_exit) & (t_enter > 1e-9)
    t = np.where(hit, t_enter, np.inf)
    axis = t_lo.argmax(axis=1)
    sign = -np.sign(dl[np.arange(len(dl)), axis])
    normal_local = np.zeros_like(dl)
    normal_local[np.arange(len(dl)), axis] = sign
    face = 2 * axis + (sign < 0)
    return t, normal_local @ rot.T, face


def render(scene: SceneSpec, pose: CameraPose, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Render to a ``[3, H, W]`` float32 image and a boolean foreground mask."""
    if resolution not in (16, 32, 64):
        raise ValueError(f"resolution must be 16, 32 or 64, got {resolution}")
    origin, dirs = _camera_rays(pose, resolution)
    n_pix = len(dirs)
    rot = _rot_y(scene.yaw)
    albedo = np.asarray(scene.albedo)

    best_t = np.full(n_pix, np.inf)
    normal = np.zeros((n_pix, 3))
    color = np.zeros((n_pix, 3))

    def merge(t, n, region_albedo):
        closer = t < best_t
        best_t[closer] = t[closer]
        normal[closer] = n[closer]
        color[closer] = region_albedo[closer]

    s = scene.size
    if scene.primitive in ("cube", "composite"):
        half = s if scene.primitive == "cube" else 0.7 * s
        center = np.zeros(3) if scene.primitive == "cube" else np.array([0.0, -0.3 * s, 0.0])
        t, n, face = _hit_box(origin, dirs, center, half, rot)
        merge(t, n, albedo[face])
    if scene.primitive in ("sphere", "composite"):
        radius = s if scene.primitive == "sphere" else 0.55 * s
        center = np.zeros(3) if scene.primitive == "sphere" else np.array([0.0, 0.95 * s, 0.0])
        t, n = _hit_sphere(origin, dirs, center, radius)
        local_x = n @ rot[:, 0]
        offset = 0 if scene.primitive == "sphere" else 6
        region = offset + (local_x < 0).astype(int)
        merge(t, n, albedo[region])

    fg = np.isfinite(best_t)
    lambert = np.clip(normal @ np.asarray(scene.light), 0.0, None)
    shaded = color * (AMBIENT + (1.0 - AMBIENT) * lambert)[:, None]
    img = np.where(fg[:, None], shaded, np.asarray(scene.background))
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    img = img.reshape(resolution, resolution, 3).transpose(2, 0, 1)
    return img.astype(np.float32), fg.reshape(resolution, resolution)


def render_view(scene: SceneSpec, pose: CameraPose, resolution: int = 32, scene_id: str = "",
                view_id: int = 0) -> ViewRecord:
    img, fg = render(scene, pose, resolution)
    return ViewRecord(img, pose, scene_id, view_id, fg)


# ---------------------------------------------------------------------------
# datasets


def random_scene(rng: np.random.Generator) -> SceneSpec:
    primitive = PRIMITIVES[int(rng.integers(len(PRIMITIVES)))]
    albedo = tuple(tuple(rng.uniform(0.1, 0.95, 3)) for _ in range(N_ALBEDO[primitive]))
    light = rng.normal(size=3)
    light[1] = abs(light[1]) + 0.5
    # backgrounds are kept well away from mid-grey, either pale or dark
    if rng.random() < 0.5:
        background = tuple(rng.uniform(0.75, 0.95, 3))
    else:
        background = tuple(rng.uniform(0.03, 0.2, 3))
    size = {"sphere": rng.uniform(0.45, 0.6), "cube": rng.uniform(0.32, 0.42),
            "composite": rng.uniform(0.4, 0.5)}[primitive]
    return SceneSpec(primitive, albedo, tuple(light), background, size, rng.uniform(0, TAU))


def random_pose(rng: np.random.Generator) -> CameraPose:
    return CameraPose(
        radius=rng.uniform(*RADIUS_RANGE),
        azimuth=rng.uniform(0.0, TAU),
        elevation=rng.uniform(*ELEVATION_RANGE),
    )


def scene_name(i: int) -> str:
    return f"scene_{i:04d}"


def save_png(image: np.ndarray, path: Union[str, Path]) -> None:
    """Write a ``[3, H, W]`` image in [0, 1] as 8-bit RGB."""
    arr = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, "RGB").save(path, format="PNG")


def load_png(path: Union[str, Path]) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def make_dataset(
    root: Union[str, Path],
    n_scenes: int,
    views_per_scene: int = 12,
    resolution: int = 32,
    seed: int = 0,
) -> Path:
    """Render ``n_scenes`` objects from ``views_per_scene`` random cameras each.

    Writes ``<root>/<scene_id>/<view_id>.png`` and ``<root>/manifest.json`` and
    returns the manifest path.
    """
    if n_scenes < 1 or views_per_scene < 1:
        raise ValueError("n_scenes and views_per_scene must be positive")
    root = Path(root)
    rng = np.random.default_rng(seed)
    entries, scenes = [], []
    try:
        root.mkdir(parents=True, exist_ok=True)
        for i in range(n_scenes):
            sid = scene_name(i)
            spec = random_scene(rng)
            poses = [random_pose(rng) for _ in range(views_per_scene)]
            (root / sid).mkdir(exist_ok=True)
            scenes.append({"scene_id": sid, **asdict(spec)})
            for v, pose in enumerate(poses):
                img, fg = render(spec, pose, resolution)
                if not fg.any():
                    raise RuntimeError(f"{sid} view {v}: object left the frame")
                rel = f"{sid}/{v:02d}.png"
                save_png(img, root / rel)
                entries.append({"scene_id": sid, "view_id": v, "radius": pose.radius,
                                "azimuth": pose.azimuth, "elevation": pose.elevation, "file": rel})
        manifest = {"seed": seed, "resolution": resolution, "views_per_scene": views_per_scene,
                    "n_scenes": n_scenes, "scenes": scenes, "entries": entries}
        path = root / "manifest.json"
        path.write_text(json.dumps(manifest, indent=1) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write dataset under {root}: {exc}") from exc
    return path


@dataclass
class MultiViewDataset:
    """All views of a rendered dataset held in memory."""

    images: np.ndarray  # [n_scenes, views, 3, H, W] float32
    poses: list[list[CameraPose]]
    scene_ids: list[str]
    resolution: int

    @property
    def n_scenes(self) -> int:
        return len(self.scene_ids)

    @property
    def views_per_scene(self) -> int:
        return self.images.shape[1]

    def record(self, scene: int, view: int) -> ViewRecord:
        return ViewRecord(self.images[scene, view], self.poses[scene][view], self.scene_ids[scene], view)


def load_dataset(root: Union[str, Path]) -> MultiViewDataset:
    root = Path(root)
    path = root / "manifest.json"
    if not path.is_file():
        raise MissingDataset(f"no manifest at {path}; run render-dataset first")
    try:
        manifest = json.loads(path.read_text())
        n, v, res = manifest["n_scenes"], manifest["views_per_scene"], manifest["resolution"]
        images = np.zeros((n, v, 3, res, res), dtype=np.float32)
        poses: list[list[Optional[CameraPose]]] = [[None] * v for _ in range(n)]
        ids = [s["scene_id"] for s in manifest["scenes"]]
        index = {sid: i for i, sid in enumerate(ids)}
        for e in manifest["entries"]:
            i, j = index[e["scene_id"]], e["view_id"]
            images[i, j] = load_png(root / e["file"])
            poses[i][j] = CameraPose(e["radius"], e["azimuth"], e["elevation"])
    except (OSError, KeyError, ValueError) as exc:
        raise MissingDataset(f"dataset at {root} is unreadable: {exc}") from exc
    if any(p is None for row in poses for p in row):
        raise MissingDataset(f"dataset at {root} is missing views")
    return MultiViewDataset(images, poses, ids, res)


def sample_views(rng: np.random.Generator, pool: Sequence[int], count: int) -> list[int]:
    """Draw ``count`` distinct view ids from ``pool``."""
    return [int(pool[i]) for i in rng.choice(len(pool), size=count, replace=False)]
